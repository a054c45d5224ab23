import csv
from pathlib import Path

import matplotlib
from loguru import logger
from matplotlib.figure import Figure
from pydantic import BaseModel

from core.exceptions import RunNotFoundError
from schemas.report_model import AblationResult, ApMode, PipelineResult
from utilis.manifest_helper import read_json, write_json

REPORT_FILE = "report.json"
TABLE_FILE = "tables.csv"
PER_CLASS_FILE = "per_class.csv"
SERIES = ("baseline", "adapted", "oracle")

RESULT_COLUMNS = [
    "name", "scenario", "IMG", "FEA", "OUT", "baseline_map50",
    "adapted_map50", "oracle_map50", "coverage", "coverage_pct",
    "frechet_source_target", "frechet_translated_target",
]
ABLATION_COLUMNS = ["label", "IMG", "FEA", "OUT", "mAP@50", "coverage",
                    "coverage_pct", "status", "error"]
PER_CLASS_COLUMNS = ["name", "model", "mode", "class", "ap50"]

# Fixed SVG ids and no timestamp, so reruns write identical files.
matplotlib.rcParams["svg.hashsalt"] = "uda-report"


def format_percent(value: float | None) -> str:
    """Render a ratio as a percentage with two decimals, e.g. 98.22%."""
    if value is None:
        return ""
    return f"{100.0 * value:.2f}%"


def format_cell(value) -> str:
    """
    Canonical CSV text of a value; floats use ``repr`` so parsing the
    cell gives back the same float.
    """
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def results_table(results: list[PipelineResult],
                  mode: ApMode) -> list[dict[str, str]]:
    rows = []
    for result in results:
        rows.append({column: format_cell(value) for column, value in zip(
            RESULT_COLUMNS, [
                result.name, result.scenario, result.flags.img,
                result.flags.fea, result.flags.out,
                result.baseline.map_for(mode), result.adapted.map_for(mode),
                result.oracle.map_for(mode), result.coverage,
                format_percent(result.coverage),
                result.frechet.get("source_target"),
                result.frechet.get("translated_target"),
            ])})
    return rows


def ablation_table(ablation: AblationResult) -> list[dict[str, str]]:
    return [{column: format_cell(value) for column, value in zip(
        ABLATION_COLUMNS, [
            row.label, row.img, row.fea, row.out, row.map50, row.coverage,
            format_percent(row.coverage), row.status, row.error,
        ])} for row in ablation.rows]


def per_class_table(results: list[PipelineResult]) -> list[dict[str, str]]:
    """One row per (result, model, AP mode, class)."""
    rows = []
    for result in results:
        for model in SERIES:
            report = getattr(result, model)
            for mode, per_class in report.per_class_ap.items():
                for class_name, ap in per_class.items():
                    rows.append({
                        "name": result.name, "model": model,
                        "mode": ApMode(mode).value, "class": class_name,
                        "ap50": format_cell(ap),
                    })
    return rows


def write_table(path: Path, columns: list[str],
                rows: list[dict[str, str]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=columns,
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def read_table(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as handle:
        return list(csv.DictReader(handle))


def render_curves(result: PipelineResult, path: Path) -> bool:
    """
    SVG chart of validation mAP@50 against iteration, one line per model.
    Returns:
        bool: False when no curve has points and nothing was written.
    """
    series = {name: result.curves.get(name, []) for name in SERIES}
    if not any(series.values()):
        return False
    figure = Figure(figsize=(6, 4))
    axis = figure.subplots()
    for name, points in series.items():
        if points:
            iterations, values = zip(*points)
            axis.plot(iterations, values, marker="o", label=name)
    axis.set_xlabel("iteration")
    axis.set_ylabel("validation mAP@50")
    axis.set_title(f"{result.scenario} {result.flags.slug}")
    axis.legend()
    path.parent.mkdir(parents=True, exist_ok=True)
    figure.savefig(path, format="svg", metadata={"Date": None})
    return True


def emit_report(results: list[PipelineResult], out_dir: Path,
                mode: ApMode = ApMode.ALLPOINT) -> list[Path]:
    """
    Write ``report.json``, ``tables.csv``, ``per_class.csv`` and one SVG
    curve chart per result with a non-empty history.
    Args:
        results (list[PipelineResult]): At least one result.
        out_dir (Path): Output directory.
        mode (ApMode): AP mode of the table columns.
    Returns:
        list[Path]: Written files.
    """
    written = [out_dir / REPORT_FILE, out_dir / TABLE_FILE,
               out_dir / PER_CLASS_FILE]
    write_json(out_dir / REPORT_FILE, {
        "mode": mode.value,
        "results": [result.model_dump(mode="json", by_alias=True)
                    for result in results],
    })
    write_table(out_dir / TABLE_FILE, RESULT_COLUMNS,
                results_table(results, mode))
    write_table(out_dir / PER_CLASS_FILE, PER_CLASS_COLUMNS,
                per_class_table(results))
    for result in results:
        chart = out_dir / f"curves_{result.flags.slug}.svg"
        if render_curves(result, chart):
            written.append(chart)
        else:
            logger.info(f"No validation history for {result.flags.slug}; "
                        "chart omitted")
    return written


def write_ablation(ablation: AblationResult, out_dir: Path,
                   mode: ApMode = ApMode.ALLPOINT) -> list[Path]:
    """Ablation report: the grid as ``tables.csv`` plus per-row charts."""
    written = [out_dir / REPORT_FILE, out_dir / TABLE_FILE,
               out_dir / PER_CLASS_FILE]
    write_json(out_dir / REPORT_FILE, {
        "mode": mode.value,
        **ablation.model_dump(mode="json", by_alias=True),
    })
    write_table(out_dir / TABLE_FILE, ABLATION_COLUMNS,
                ablation_table(ablation))
    write_table(out_dir / PER_CLASS_FILE, PER_CLASS_COLUMNS,
                per_class_table(ablation.results))
    for result in ablation.results:
        chart = out_dir / f"curves_{result.flags.slug}.svg"
        if render_curves(result, chart):
            written.append(chart)
    return written


def write_rows(rows: list[BaseModel], model: type[BaseModel],
               out_dir: Path, kind: str) -> list[Path]:
    """
    Write a list of flat rows as ``report.json`` and ``tables.csv``; the
    table columns are the fields of ``model``.
    Args:
        rows (list[BaseModel]): Rows of type ``model``.
        model (type[BaseModel]): Row schema.
        out_dir (Path): Output directory.
        kind (str): Stored as ``kind`` in the report.
    Returns:
        list[Path]: Written files.
    """
    dumped = [row.model_dump(mode="json") for row in rows]
    write_json(out_dir / REPORT_FILE, {"kind": kind, "rows": dumped})
    columns = list(model.model_fields)
    write_table(out_dir / TABLE_FILE, columns,
                [{column: format_cell(row[column]) for column in columns}
                 for row in dumped])
    logger.info(f"Wrote {len(rows)} {kind} rows to {out_dir}")
    return [out_dir / REPORT_FILE, out_dir / TABLE_FILE]


def list_runs(output_root: Path) -> list[dict[str, str]]:
    """Runs with an emitted report, as ``{scenario, run}`` pairs."""
    runs = []
    for report in sorted(output_root.glob(f"*/*/reports/{REPORT_FILE}")):
        run_dir = report.parent.parent
        runs.append({"scenario": run_dir.parent.name, "run": run_dir.name})
    return runs


def _reports_dir(output_root: Path, scenario: str, run: str) -> Path:
    directory = output_root / scenario / run / "reports"
    if ".." in (scenario, run) or not (directory / REPORT_FILE).exists():
        raise RunNotFoundError(f"no report for run {scenario}/{run}")
    return directory


def load_report(output_root: Path, scenario: str, run: str) -> dict:
    """
    Raises:
        RunNotFoundError: If the run has no emitted report.
    """
    return read_json(_reports_dir(output_root, scenario, run) / REPORT_FILE)


def load_table(output_root: Path, scenario: str,
               run: str) -> list[dict[str, str]]:
    """
    Raises:
        RunNotFoundError: If the run has no emitted report.
    """
    return read_table(_reports_dir(output_root, scenario, run) / TABLE_FILE)
