import argparse
import asyncio
import json
import sys
from pathlib import Path

from loguru import logger
from pydantic import ValidationError

from core.exceptions import ConfigurationError, DataError, UdaError
from core.log_config import setup_logging
from schemas.detector_model import Role
from schemas.experiment_model import ExperimentConfig, Flags
from schemas.report_model import ApMode, PipelineResult
from services.engine_services import checkpoint_path, train
from services.metrics_services import evaluate
from services.model_services import load_checkpoint
from services.pipeline_services import (RunLayout, ensure_data,
                                        ensure_pseudo_labels, ensure_role,
                                        ensure_teacher, ensure_translation,
                                        read_meta, require_data, role_inputs,
                                        run_ablation, run_pipeline,
                                        run_temperature_sweep,
                                        run_threshold_sweep,
                                        run_translator_comparison,
                                        teacher_reuses_baseline)
from services.report_services import REPORT_FILE, emit_report
from utilis.manifest_helper import read_json, write_json

ROLE_CHOICES = [role.value for role in Role]


def parse_override(text: str) -> tuple[list[str], object]:
    """
    Split ``a.b=value`` into a key path and a value. The value is parsed
    as JSON and kept as a string when that fails.
    """
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigurationError(f"override must look like a.b=value, "
                                 f"got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def apply_overrides(payload: dict, overrides: list[str]) -> dict:
    for text in overrides:
        path, value = parse_override(text)
        node = payload
        for part in path[:-1]:
            child = node.get(part)
            if not isinstance(child, dict):
                child = {}
                node[part] = child
            node = child
        node[path[-1]] = value
    return payload


def load_config(path: Path, overrides: list[str] | None = None,
                flags: str | None = None) -> ExperimentConfig:
    """
    Read a JSON experiment config, apply ``--set`` overrides to the raw
    document and validate it.
    Args:
        path (Path): Config file.
        overrides (list[str] | None): ``a.b=value`` items.
        flags (str | None): Three 0/1 digits replacing the config flags.
    Returns:
        ExperimentConfig: The validated config.
    Raises:
        ConfigurationError: If the file is unreadable or invalid.
    """
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"cannot read config {path}: {e}") from e
    payload = apply_overrides(payload, overrides or [])
    if flags is not None:
        try:
            parsed = Flags.parse(flags)
        except ValueError as e:
            raise ConfigurationError(str(e)) from e
        payload["flags"] = parsed.model_dump()
    try:
        return ExperimentConfig.model_validate(payload)
    except ValidationError as e:
        raise ConfigurationError(f"invalid config {path}: {e}") from e


def _context(args) -> tuple[ExperimentConfig, RunLayout]:
    config = load_config(args.config, args.set, args.flags)
    return config, RunLayout.for_config(config)


def gen_data_command(args) -> None:
    config, layout = _context(args)
    paths = asyncio.run(ensure_data(
        config.model_copy(update={"generate_missing": True}), layout))
    print(paths.model_dump_json(indent=2))


def translate_command(args) -> None:
    config, layout = _context(args)
    if args.compare_modes:
        rows = asyncio.run(run_translator_comparison(
            config, train_teachers=args.train_teachers))
        print(json.dumps([row.model_dump(mode="json") for row in rows],
                         indent=2))
        return
    data = require_data(config, layout)
    print(asyncio.run(ensure_translation(config, layout, data)))


def train_command(args) -> None:
    config, layout = _context(args)
    data = require_data(config, layout)
    role = Role(args.role)
    if args.resume is not None:
        labeled, unlabeled, _ = role_inputs(config, layout, data, role)
        result = train(config.train_config(role), labeled,
                       layout.role_dir(role), unlabeled=unlabeled,
                       validation=data.target_val,
                       eval_config=config.evaluation,
                       resume_from=args.resume)
        print(result.selected_checkpoint)
        return
    if role == Role.TEACHER:
        stage = ensure_teacher(config, layout, data)
    else:
        stage = ensure_role(config, layout, data, role)
    print(stage.selected_checkpoint)


def pseudo_label_command(args) -> None:
    config, layout = _context(args)
    if config.pseudo is None:
        raise ConfigurationError("pseudo-label needs a pseudo section")
    data = require_data(config, layout)
    teacher = ensure_teacher(config, layout, data)
    if args.temperatures:
        rows = run_temperature_sweep(config, layout, data, teacher)
    elif args.sweep:
        rows = run_threshold_sweep(config, layout, data, teacher,
                                   train_students=args.train_students)
    else:
        counts = ensure_pseudo_labels(config, layout, data, teacher)
        print(json.dumps(counts))
        return
    print(json.dumps([row.model_dump(mode="json") for row in rows], indent=2))


def _checkpoint_for_role(layout: RunLayout, role: Role) -> Path:
    if role == Role.TEACHER and teacher_reuses_baseline(layout.flags):
        role = Role.BASELINE
    run_dir = layout.role_dir(role)
    meta = read_meta(run_dir)
    if meta is None:
        return checkpoint_path(run_dir, 0)
    return run_dir / meta["selected_checkpoint"]


def eval_command(args) -> None:
    config, layout = _context(args)
    data = require_data(config, layout)
    path = args.checkpoint or _checkpoint_for_role(layout, Role(args.role))
    checkpoint = load_checkpoint(path)
    modes = (tuple(ApMode) if args.mode is None else (ApMode(args.mode),))
    report = evaluate(checkpoint.detector, args.manifest or data.target_val,
                      config.evaluation, modes=modes,
                      metadata={"checkpoint": str(path),
                                "params_hash": checkpoint.params_hash})
    if args.output is not None:
        write_json(args.output, report)
    print(report.model_dump_json(indent=2))


def pipeline_command(args) -> None:
    config, _ = _context(args)
    result = asyncio.run(run_pipeline(config))
    print(json.dumps({"name": result.name, "stages": result.stages,
                      "coverage": result.coverage}))


def ablate_command(args) -> None:
    config, _ = _context(args)
    ablation = asyncio.run(run_ablation(config, workers=args.workers))
    failed = [row.label for row in ablation.rows if row.status == "failed"]
    print(json.dumps({"rows": len(ablation.rows), "failed": failed}))


def report_command(args) -> None:
    """Re-render tables and charts from the ``report.json`` of a run."""
    config, layout = _context(args)
    reports_dir = layout.reports_dir
    payload = read_json(reports_dir / REPORT_FILE)
    results = [PipelineResult.model_validate(result)
               for result in payload.get("results", [])]
    if not results:
        raise DataError(f"{reports_dir / REPORT_FILE} holds no "
                        "pipeline results")
    mode = ApMode(args.mode or config.evaluation.report_mode)
    for path in emit_report(results, reports_dir, mode):
        print(path)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, required=True,
                        help="JSON experiment config")
    parser.add_argument("--set", action="append", default=[],
                        metavar="KEY=VALUE",
                        help="Override a config field, e.g. seed=3")
    parser.add_argument("--flags", default=None,
                        help="IMG/FEA/OUT as three digits, e.g. 110")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uda",
        description="Multilevel domain adaptation for object detection",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--log-level", default=None,
                        help="Overrides UDA_LOG_LEVEL")
    commands = parser.add_subparsers(dest="command", required=True)

    gen_data = commands.add_parser("gen-data", help="Generate the datasets")
    _add_common(gen_data)
    gen_data.set_defaults(handler=gen_data_command)

    translate = commands.add_parser(
        "translate", help="Fit the translator and translate source_train")
    _add_common(translate)
    translate.add_argument(
        "--compare-modes", action="store_true",
        help="Compare deterministic and multimodal translation on every "
             "scenario preset")
    translate.add_argument(
        "--train-teachers", action="store_true",
        help="With --compare-modes, train and score a teacher per mode")
    translate.set_defaults(handler=translate_command)

    train_parser = commands.add_parser("train", help="Train one role")
    _add_common(train_parser)
    train_parser.add_argument("--role", choices=ROLE_CHOICES, required=True)
    train_parser.add_argument("--resume", type=Path, default=None,
                              help="Continue from this checkpoint")
    train_parser.set_defaults(handler=train_command)

    pseudo = commands.add_parser(
        "pseudo-label", help="Pseudo-label target_train with the teacher")
    _add_common(pseudo)
    pseudo.add_argument("--sweep", action="store_true",
                        help="Count kept labels over threshold_sweep")
    pseudo.add_argument("--train-students", action="store_true",
                        help="With --sweep, train one student per threshold")
    pseudo.add_argument("--temperatures", action="store_true",
                        help="Train one soft-label student per "
                             "temperature_sweep value plus a hard one")
    pseudo.set_defaults(handler=pseudo_label_command)

    eval_parser = commands.add_parser("eval", help="Evaluate a checkpoint")
    _add_common(eval_parser)
    eval_parser.add_argument("--role", choices=ROLE_CHOICES,
                             default=Role.BASELINE.value)
    eval_parser.add_argument("--checkpoint", type=Path, default=None)
    eval_parser.add_argument("--manifest", type=Path, default=None,
                             help="Labeled manifest; target_val by default")
    eval_parser.add_argument("--mode", choices=[m.value for m in ApMode],
                             default=None)
    eval_parser.add_argument("--output", type=Path, default=None)
    eval_parser.set_defaults(handler=eval_command)

    pipeline = commands.add_parser("pipeline",
                                   help="Run every stage the flags call for")
    _add_common(pipeline)
    pipeline.set_defaults(handler=pipeline_command)

    ablate = commands.add_parser("ablate", help="Run the 2^3 flag grid")
    _add_common(ablate)
    ablate.add_argument("--workers", type=int, default=1)
    ablate.set_defaults(handler=ablate_command)

    report = commands.add_parser("report",
                                 help="Re-emit tables and charts of a run")
    _add_common(report)
    report.add_argument("--mode", choices=[m.value for m in ApMode],
                        default=None)
    report.set_defaults(handler=report_command)
    return parser


def main(argv: list[str] | None = None) -> int:
    """
    Entry point of the ``uda`` command.
    Returns:
        int: 0 on success, else the exit code of the raised error
        (2 configuration, 3 data, 4 internal invariant).
    """
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        args.handler(args)
    except UdaError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except ValidationError as e:
        logger.error(f"Invalid configuration: {e}")
        return ConfigurationError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
