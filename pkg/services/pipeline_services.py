import asyncio
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from loguru import logger
from pydantic import BaseModel, ConfigDict

from core.audit import audit
from core.config import get_settings
from core.exceptions import (ConfigurationError, ManifestNotFoundError,
                             MissingDataError, UndefinedCoverageError)
from schemas.detector_model import (LabelMode, PseudoLabelConfig, Role,
                                    TrainingHistory)
from schemas.experiment_model import ExperimentConfig, Flags
from schemas.report_model import (AblationResult, AblationRow, ApMode,
                                  EvalReport, PipelineResult, SweepRow,
                                  TranslatorRow)
from schemas.scenario_presets import SCENARIO_PRESETS
from schemas.scene_model import DatasetManifest
from schemas.style_model import TranslatorMode
from services.engine_services import HISTORY_FILE, train
from services.metrics_services import (coverage, evaluate, feature_stats,
                                       frechet_distance)
from services.model_services import Checkpoint, Detector, load_checkpoint
from services.pseudolabel_services import (build_student_dataset,
                                           generate_pseudo_labels,
                                           sweep_thresholds)
from services.report_services import emit_report, write_ablation, write_rows
from services.scenegen_services import DatasetPaths, generate_dataset
from services.translator_services import fit_translator, translate_dataset
from utilis.manifest_helper import (content_hash, load_manifest, read_json,
                                    write_json)

META_FILE = "meta.json"
TRANSLATED_SPLIT = "translated"
PSEUDO_SPLIT = "pseudo"
JOINT_SPLIT = "joint"


def _output_root(config: ExperimentConfig) -> Path:
    return config.output_dir or get_settings().output_root


class RunLayout(BaseModel):
    """
    Directory layout of one scenario:
    ``<root>/{data,baseline,oracle,ablation}`` shared by every flag row and
    ``<root>/<flags>/{data,ckpts,labels,reports}`` per row.
    """
    root: Path
    flags: Flags

    @classmethod
    def for_config(cls, config: ExperimentConfig) -> "RunLayout":
        """
        The config's ``output_dir`` wins; ``UDA_OUTPUT_ROOT`` applies only
        to configs that leave it unset.
        """
        output_root = _output_root(config)
        return cls(root=output_root / config.scenario.name, flags=config.flags)

    @property
    def data_dir(self) -> Path:
        return self.root / "data"

    @property
    def baseline_dir(self) -> Path:
        return self.root / "baseline"

    @property
    def oracle_dir(self) -> Path:
        return self.root / "oracle"

    @property
    def ablation_dir(self) -> Path:
        return self.root / "ablation"

    @property
    def flags_dir(self) -> Path:
        return self.root / self.flags.slug

    @property
    def translated_dir(self) -> Path:
        return self.flags_dir / "data"

    @property
    def labels_dir(self) -> Path:
        return self.flags_dir / "labels"

    @property
    def reports_dir(self) -> Path:
        return self.flags_dir / "reports"

    def role_dir(self, role: Role) -> Path:
        if role == Role.BASELINE:
            return self.baseline_dir
        if role == Role.ORACLE:
            return self.oracle_dir
        return self.flags_dir / "ckpts" / role.value


class StageOutput(BaseModel):
    """A trained role, fresh or reused from disk."""
    role: Role
    detector: Detector
    history: TrainingHistory
    final_checkpoint: Path
    selected_checkpoint: Path
    params_hash: str
    stage_hash: str

    model_config = ConfigDict(arbitrary_types_allowed=True)


def read_meta(directory: Path) -> dict | None:
    try:
        return read_json(directory / META_FILE)
    except ManifestNotFoundError:
        return None


def is_current(directory: Path, stage_hash: str) -> bool:
    meta = read_meta(directory)
    return meta is not None and meta.get("hash") == stage_hash


def write_meta(directory: Path, stage_hash: str, **fields) -> None:
    write_json(directory / META_FILE, {"hash": stage_hash, **fields})


def data_hash(config: ExperimentConfig) -> str:
    return content_hash({
        "scenario": config.scenario.model_dump(mode="json"),
        "sizes": config.sizes.model_dump(mode="json"),
        "image_size": list(config.image_size),
        "object_count_range": list(config.object_count_range),
        "splits": list(DatasetPaths.model_fields),
        "seed": config.seed,
    })


def _dataset_paths(layout: RunLayout) -> DatasetPaths:
    return DatasetPaths(
        source_train=layout.data_dir / "source_train.json",
        target_train=layout.data_dir / "target_train.json",
        target_val=layout.data_dir / "target_val.json",
        source_val=layout.data_dir / "source_val.json",
    )


def require_data(config: ExperimentConfig, layout: RunLayout) -> DatasetPaths:
    """
    Raises:
        MissingDataError: If the generated datasets are absent or stale.
    """
    if not is_current(layout.data_dir, data_hash(config)):
        raise MissingDataError(
            f"no datasets for this config under {layout.data_dir}; "
            f"run `uda gen-data --config <config>` first")
    return _dataset_paths(layout)


async def ensure_data(config: ExperimentConfig,
                      layout: RunLayout) -> DatasetPaths:
    """Generate the four splits unless matching ones are on disk."""
    digest = data_hash(config)
    if is_current(layout.data_dir, digest):
        logger.info(f"Reusing datasets in {layout.data_dir}")
        return _dataset_paths(layout)
    if not config.generate_missing:
        return require_data(config, layout)
    paths = await generate_dataset(
        config.scenario, config.sizes, config.seed, layout.data_dir,
        config.image_size, config.object_count_range)
    write_meta(layout.data_dir, digest, stage="generate")
    return paths


def translation_hash(config: ExperimentConfig) -> str:
    return content_hash({"data": data_hash(config),
                         "translator": config.translator.model_dump(
                             mode="json"),
                         "seed": config.seed})


def require_translation(config: ExperimentConfig, layout: RunLayout) -> Path:
    if not is_current(layout.translated_dir, translation_hash(config)):
        raise MissingDataError(
            f"no translated dataset under {layout.translated_dir}; "
            f"run `uda translate --config <config>` first")
    return layout.translated_dir / f"{TRANSLATED_SPLIT}.json"


async def _translate_into(config: ExperimentConfig, data: DatasetPaths,
                          out_dir: Path) -> Path:
    digest = translation_hash(config)
    manifest = out_dir / f"{TRANSLATED_SPLIT}.json"
    if is_current(out_dir, digest):
        logger.info(f"Reusing translation in {out_dir}")
        return manifest
    with audit.consumer("translator"):
        source = load_manifest(data.source_train, include_annotations=False)
        target = load_manifest(data.target_train, include_annotations=False)
        model = fit_translator(source, target, config.translator)
        labeled_source = load_manifest(data.source_train,
                                       include_annotations=True)
    write_json(out_dir / "translator.json", model)
    await translate_dataset(model, labeled_source,
                            config.translator.styles_per_image, config.seed,
                            out_dir, TRANSLATED_SPLIT)
    write_meta(out_dir, digest, stage="translate",
               mode=config.translator.mode.value)
    return manifest


async def ensure_translation(config: ExperimentConfig, layout: RunLayout,
                             data: DatasetPaths) -> Path:
    """Fit the translator on unlabeled images and translate source_train."""
    return await _translate_into(config, data, layout.translated_dir)


def _labeled_for_teacher(config: ExperimentConfig, layout: RunLayout,
                         data: DatasetPaths) -> Path:
    if config.flags.img:
        return require_translation(config, layout)
    return data.source_train


def role_inputs(config: ExperimentConfig, layout: RunLayout,
                data: DatasetPaths, role: Role
                ) -> tuple[Path, Path | None, str]:
    """Labeled manifest, unlabeled manifest and upstream hash of a role."""
    if role == Role.BASELINE:
        return data.source_train, None, data_hash(config)
    if role == Role.ORACLE:
        return data.target_train, None, data_hash(config)
    if role == Role.TEACHER:
        labeled = _labeled_for_teacher(config, layout, data)
        upstream = (translation_hash(config) if config.flags.img
                    else data_hash(config))
        unlabeled = data.target_train if config.flags.fea else None
        return labeled, unlabeled, upstream
    joint = layout.labels_dir / f"{JOINT_SPLIT}.json"
    meta = read_meta(layout.labels_dir)
    if meta is None or not joint.exists():
        raise MissingDataError(
            f"no pseudo-labeled dataset under {layout.labels_dir}; "
            f"run `uda pseudo-label --config <config>` first")
    return joint, None, meta["hash"]


def _role_hash(config: ExperimentConfig, role: Role, upstream: str) -> str:
    return content_hash({
        "upstream": upstream,
        "train": config.train_config(role).model_dump(mode="json",
                                                      by_alias=True),
        "evaluation": config.evaluation.model_dump(mode="json"),
        "flags": (config.flags.model_dump()
                  if role in (Role.TEACHER, Role.STUDENT) else None),
    })


def _load_stage(role: Role, run_dir: Path, stage_hash: str) -> StageOutput:
    meta = read_meta(run_dir)
    checkpoint = load_checkpoint(run_dir / meta["selected_checkpoint"])
    history = TrainingHistory.model_validate(read_json(run_dir / HISTORY_FILE))
    return StageOutput(
        role=role,
        detector=checkpoint.detector,
        history=history,
        final_checkpoint=run_dir / meta["final_checkpoint"],
        selected_checkpoint=run_dir / meta["selected_checkpoint"],
        params_hash=checkpoint.params_hash,
        stage_hash=stage_hash,
    )


def ensure_role(config: ExperimentConfig, layout: RunLayout,
                data: DatasetPaths, role: Role) -> StageOutput:
    """
    Train a role unless a run with the same stage hash is on disk.
    Raises:
        MissingDataError: If an upstream stage has not been run.
    """
    labeled, unlabeled, upstream = role_inputs(config, layout, data, role)
    run_dir = layout.role_dir(role)
    digest = _role_hash(config, role, upstream)
    if is_current(run_dir, digest):
        logger.info(f"Reusing {role.value} run in {run_dir}")
        return _load_stage(role, run_dir, digest)

    result = train(config.train_config(role), labeled, run_dir,
                   unlabeled=unlabeled, validation=data.target_val,
                   eval_config=config.evaluation)
    write_meta(run_dir, digest, stage=role.value,
               final_checkpoint=result.final_checkpoint.name,
               selected_checkpoint=result.selected_checkpoint.name,
               params_hash=result.params_hash)
    return StageOutput(
        role=role,
        detector=result.detector,
        history=result.history,
        final_checkpoint=result.final_checkpoint,
        selected_checkpoint=result.selected_checkpoint,
        params_hash=result.params_hash,
        stage_hash=digest,
    )


def teacher_reuses_baseline(flags: Flags) -> bool:
    return not flags.img and not flags.fea


def ensure_teacher(config: ExperimentConfig, layout: RunLayout,
                   data: DatasetPaths,
                   baseline: StageOutput | None = None) -> StageOutput:
    """
    Without IMG and FEA the teacher is the source-trained baseline.
    """
    if teacher_reuses_baseline(config.flags):
        return baseline or ensure_role(config, layout, data, Role.BASELINE)
    return ensure_role(config, layout, data, Role.TEACHER)


def ensure_pseudo_labels(config: ExperimentConfig, layout: RunLayout,
                         data: DatasetPaths,
                         teacher: StageOutput) -> dict[str, int]:
    """
    Label target_train with the teacher's final-iteration checkpoint and
    join the result with the teacher's labeled data.
    Returns:
        dict[str, int]: Kept and candidate pseudo-label counts.
    """
    digest = content_hash({"teacher": teacher.stage_hash,
                           "pseudo": config.pseudo.model_dump(mode="json")})
    sidecar = layout.labels_dir / f"{PSEUDO_SPLIT}.sidecar.json"
    if is_current(layout.labels_dir, digest):
        counts = read_json(sidecar)
        return {"kept": counts["kept_count"], "total": counts["total_count"]}

    snapshot = load_checkpoint(teacher.final_checkpoint)
    with audit.consumer("pseudolabel"):
        target = load_manifest(data.target_train, include_annotations=False)
        pseudo = generate_pseudo_labels(
            snapshot.detector, target, config.pseudo, layout.labels_dir,
            snapshot.params_hash, PSEUDO_SPLIT)
    with audit.consumer(Role.STUDENT.value):
        labeled = load_manifest(_labeled_for_teacher(config, layout, data),
                                include_annotations=True)
        build_student_dataset(labeled, pseudo,
                              layout.labels_dir / f"{JOINT_SPLIT}.json")
    write_meta(layout.labels_dir, digest, stage="pseudo-label")
    counts = read_json(sidecar)
    return {"kept": counts["kept_count"], "total": counts["total_count"]}


def _frechet(detector: Detector, first: Path, second: Path) -> float:
    with audit.consumer("metrics"):
        a = load_manifest(first, include_annotations=False)
        b = load_manifest(second, include_annotations=False)
    return frechet_distance(feature_stats(detector, a),
                            feature_stats(detector, b))


def _coverage(baseline: EvalReport, adapted: EvalReport, oracle: EvalReport,
              mode: ApMode) -> float | None:
    values = [report.map_for(mode) for report in (baseline, adapted, oracle)]
    if any(value is None for value in values):
        return None
    try:
        return coverage(*values)
    except UndefinedCoverageError as e:
        logger.warning(str(e))
        return None


def stage_trace(flags: Flags) -> list[str]:
    stages = []
    if flags.img:
        stages.append("translate")
    if flags.fea:
        stages.append("teacher(grl)")
    elif flags.img:
        stages.append("teacher(supervised)")
    else:
        stages.append("teacher(baseline)")
    if flags.out:
        stages.extend(["pseudo-label", "student"])
    return stages


async def run_pipeline(config: ExperimentConfig) -> PipelineResult:
    """
    Run every stage the flags call for and evaluate on target_val.
    IMG replaces source_train by its translation for all labeled use; FEA
    trains the teacher with gradient-reversal alignment against target_train;
    OUT pseudo-labels target_train and trains the student, which becomes
    the final model.
    Args:
        config (ExperimentConfig): Experiment config.
    Returns:
        PipelineResult: Reports, coverage, distances and curves.
    Raises:
        MissingDataError: If data is absent and generation is disabled.
    """
    layout = RunLayout.for_config(config)
    data = await ensure_data(config, layout)
    baseline = ensure_role(config, layout, data, Role.BASELINE)
    oracle = ensure_role(config, layout, data, Role.ORACLE)

    manifests = {"source_train": data.source_train,
                 "target_train": data.target_train,
                 "target_val": data.target_val}
    if config.flags.img:
        manifests["translated"] = await ensure_translation(config, layout,
                                                           data)
    teacher = ensure_teacher(config, layout, data, baseline)
    final = teacher
    pseudo_counts = None
    checkpoints = {"baseline": baseline.params_hash,
                   "oracle": oracle.params_hash,
                   "teacher": teacher.params_hash}
    if config.flags.out:
        pseudo_counts = ensure_pseudo_labels(config, layout, data, teacher)
        manifests["pseudo"] = layout.labels_dir / f"{PSEUDO_SPLIT}.json"
        manifests["joint"] = layout.labels_dir / f"{JOINT_SPLIT}.json"
        final = ensure_role(config, layout, data, Role.STUDENT)
        checkpoints["student"] = final.params_hash
    checkpoints["final"] = final.params_hash
    # Relative to the scenario root so reports do not depend on where
    # the run was written.
    relative = {name: str(path.relative_to(layout.root))
                for name, path in manifests.items()}

    reports = {
        name: evaluate(stage.detector, data.target_val, config.evaluation,
                       metadata={"model": name,
                                 "params_hash": stage.params_hash,
                                 "manifest": relative["target_val"]})
        for name, stage in (("baseline", baseline), ("adapted", final),
                            ("oracle", oracle))}
    mode = ApMode(config.evaluation.report_mode)
    frechet = {"source_target": _frechet(baseline.detector,
                                         data.source_train,
                                         data.target_train),
               "translated_target": None}
    if config.flags.img:
        frechet["translated_target"] = _frechet(
            baseline.detector, manifests["translated"], data.target_train)

    result = PipelineResult(
        name=config.name,
        scenario=config.scenario.name,
        flags=config.flags,
        stages=stage_trace(config.flags),
        checkpoints=checkpoints,
        manifests=relative,
        baseline=reports["baseline"],
        adapted=reports["adapted"],
        oracle=reports["oracle"],
        coverage=_coverage(reports["baseline"], reports["adapted"],
                           reports["oracle"], mode),
        frechet=frechet,
        curves={"baseline": baseline.history.validation_curve(),
                "adapted": final.history.validation_curve(),
                "oracle": oracle.history.validation_curve()},
        pseudo_label_counts=pseudo_counts,
    )
    emit_report([result], layout.reports_dir, mode)
    logger.info(f"{config.scenario.name} {config.flags.slug}: "
                f"coverage {result.coverage}")
    return result


ALL_FLAGS = [Flags.parse(f"{bits:03b}") for bits in range(8)]


def _run_row(config_json: str, bits: str) -> str:
    """Process-pool entry point: one ablation row, result as JSON."""
    config = ExperimentConfig.model_validate_json(config_json)
    result = asyncio.run(run_pipeline(config.with_flags(Flags.parse(bits))))
    return result.model_dump_json(by_alias=True)


def _row(result: PipelineResult, mode: ApMode) -> AblationRow:
    return AblationRow(label=result.flags.slug, img=result.flags.img,
                       fea=result.flags.fea, out=result.flags.out,
                       map50=result.adapted.map_for(mode),
                       coverage=result.coverage)


async def run_ablation(config: ExperimentConfig,
                       workers: int = 1) -> AblationResult:
    """
    Run the eight flag combinations on shared data, baseline and oracle,
    and emit the grid table with an oracle row.
    A failing row is recorded as failed; the others still run.
    Args:
        config (ExperimentConfig): Base config; its flags are ignored.
        workers (int): Rows run in this many processes when > 1.
    Returns:
        AblationResult: Rows in flag order plus the oracle row.
    """
    mode = ApMode(config.evaluation.report_mode)
    shared = await run_pipeline(config.with_flags(Flags()))
    outcomes: dict[str, PipelineResult | Exception] = {
        Flags().bits: shared}
    pending = [flags for flags in ALL_FLAGS if flags.bits != Flags().bits]

    if workers > 1:
        loop = asyncio.get_running_loop()
        with ProcessPoolExecutor(max_workers=workers) as executor:
            futures = {flags.bits: loop.run_in_executor(
                executor, _run_row, config.model_dump_json(by_alias=True),
                flags.bits) for flags in pending}
            for bits, future in futures.items():
                try:
                    outcomes[bits] = PipelineResult.model_validate_json(
                        await future)
                except Exception as e:
                    outcomes[bits] = e
    else:
        for flags in pending:
            try:
                outcomes[flags.bits] = await run_pipeline(
                    config.with_flags(flags))
            except Exception as e:
                outcomes[flags.bits] = e

    rows, results = [], []
    for flags in ALL_FLAGS:
        outcome = outcomes[flags.bits]
        if isinstance(outcome, Exception):
            logger.error(f"Ablation row {flags.slug} failed: {outcome}")
            rows.append(AblationRow(label=flags.slug, img=flags.img,
                                    fea=flags.fea, out=flags.out,
                                    status="failed", error=str(outcome)))
        else:
            rows.append(_row(outcome, mode))
            results.append(outcome)
    oracle_map = shared.oracle.map_for(mode)
    rows.append(AblationRow(
        label="oracle", map50=oracle_map,
        coverage=1.0 if shared.coverage is not None else None))

    ablation = AblationResult(scenario=config.scenario.name, rows=rows,
                              results=results)
    layout = RunLayout.for_config(config)
    write_ablation(ablation, layout.ablation_dir / "reports", mode)
    return ablation


def _train_swept_student(config: ExperimentConfig, layout: RunLayout,
                         data: DatasetPaths, snapshot: Checkpoint,
                         target: DatasetManifest,
                         sweep_dir: Path) -> tuple[int, float | None,
                                                   float | None]:
    """
    Pseudo-label with ``config.pseudo``, train a student on the joint set
    and score it on target_val and source_val.
    Returns:
        tuple: Kept label count, target mAP@50 and source mAP@50.
    """
    with audit.consumer("pseudolabel"):
        pseudo = generate_pseudo_labels(
            snapshot.detector, target, config.pseudo, sweep_dir,
            snapshot.params_hash, PSEUDO_SPLIT)
    with audit.consumer(Role.STUDENT.value):
        labeled = load_manifest(_labeled_for_teacher(config, layout, data),
                                include_annotations=True)
        build_student_dataset(labeled, pseudo,
                              sweep_dir / f"{JOINT_SPLIT}.json")
    student = train(config.train_config(Role.STUDENT),
                    sweep_dir / f"{JOINT_SPLIT}.json", sweep_dir / "ckpts",
                    validation=data.target_val,
                    eval_config=config.evaluation)
    mode = ApMode(config.evaluation.report_mode)
    scores = [evaluate(student.detector, manifest, config.evaluation,
                       modes=(mode,)).map_for(mode)
              for manifest in (data.target_val, data.source_val)]
    return len(pseudo.annotations), scores[0], scores[1]


def _sweep_row(pseudo: PseudoLabelConfig, **fields) -> SweepRow:
    soft = pseudo.label_mode == LabelMode.SOFT
    return SweepRow(label_mode=pseudo.label_mode, alpha=pseudo.alpha,
                    temperature=pseudo.temperature if soft else None,
                    **fields)


def run_threshold_sweep(config: ExperimentConfig, layout: RunLayout,
                        data: DatasetPaths, teacher: StageOutput,
                        train_students: bool = False) -> list[SweepRow]:
    """
    Kept pseudo-label counts over ``config.threshold_sweep`` from a single
    teacher inference pass; with ``train_students`` one student per
    threshold is trained and scored on target_val and source_val.
    Students are written under ``<flags>/sweep/tau-<tau>`` and the table
    under ``<flags>/sweep/reports``.
    """
    snapshot = load_checkpoint(teacher.final_checkpoint)
    with audit.consumer("pseudolabel"):
        target = load_manifest(data.target_train, include_annotations=False)
        counts = sweep_thresholds(snapshot.detector, target, config.pseudo,
                                  config.threshold_sweep)
    rows = [_sweep_row(config.pseudo, tau=tau, kept=kept)
            for tau, kept in counts.items()]
    if train_students:
        for row in rows:
            swept = config.model_copy(update={
                "pseudo": config.pseudo.model_copy(update={"tau": row.tau})})
            _, row.student_map50, row.student_source_map50 = (
                _train_swept_student(
                    swept, layout, data, snapshot, target,
                    layout.flags_dir / "sweep" / f"tau-{row.tau}"))
    write_rows(rows, SweepRow, layout.flags_dir / "sweep" / "reports",
               "threshold-sweep")
    return rows


def run_temperature_sweep(config: ExperimentConfig, layout: RunLayout,
                          data: DatasetPaths, teacher: StageOutput,
                          temperatures: list[float] | None = None
                          ) -> list[SweepRow]:
    """
    Train one student per soft-label temperature at alpha = 1/2, next to
    a hard-label reference student at the same threshold.
    Args:
        config (ExperimentConfig): Needs a pseudo section; its tau is kept.
        layout (RunLayout): Students go under ``<flags>/temperature``.
        data (DatasetPaths): Generated datasets.
        teacher (StageOutput): Labels target_train once per row.
        temperatures (list[float] | None): Defaults to
            ``config.temperature_sweep``.
    Returns:
        list[SweepRow]: The hard row first, then one row per temperature.
    """
    temperatures = list(temperatures or config.temperature_sweep)
    if any(value <= 0.0 for value in temperatures):
        raise ConfigurationError(
            f"temperatures must be > 0, got {temperatures}")
    snapshot = load_checkpoint(teacher.final_checkpoint)
    with audit.consumer("pseudolabel"):
        target = load_manifest(data.target_train, include_annotations=False)

    settings = [("hard", config.pseudo.model_copy(update={
        "label_mode": LabelMode.HARD, "alpha": 1.0}))]
    settings.extend((f"T-{value}", config.pseudo.model_copy(update={
        "label_mode": LabelMode.SOFT, "temperature": value, "alpha": 0.5}))
        for value in temperatures)
    sweep_root = layout.flags_dir / "temperature"
    rows = []
    for name, pseudo in settings:
        swept = config.model_copy(update={"pseudo": pseudo})
        kept, target_map, source_map = _train_swept_student(
            swept, layout, data, snapshot, target, sweep_root / name)
        rows.append(_sweep_row(pseudo, tau=pseudo.tau, kept=kept,
                               student_map50=target_map,
                               student_source_map50=source_map))
        logger.info(f"Temperature sweep {name}: kept {kept}, "
                    f"target mAP@50 {target_map}")
    write_rows(rows, SweepRow, sweep_root / "reports", "temperature-sweep")
    return rows


COMPARED_MODES = (TranslatorMode.DETERMINISTIC, TranslatorMode.MULTIMODAL)
COMPARISON_DIR = "translator-comparison"


async def run_translator_comparison(config: ExperimentConfig,
                                    scenarios: list[str] | None = None,
                                    train_teachers: bool = False
                                    ) -> list[TranslatorRow]:
    """
    Deterministic against multimodal translation on each scenario preset:
    feature Fréchet distance to target_train before and after translation,
    measured with the preset's baseline. With ``train_teachers`` a
    supervised teacher is trained per translation and scored on
    target_val and source_val.
    Translations go under ``<scenario>/translators/<mode>`` and the table
    under ``<output root>/translator-comparison/reports``.
    Raises:
        ConfigurationError: If a scenario name is not a preset.
    """
    names = list(scenarios or SCENARIO_PRESETS)
    unknown = [name for name in names if name not in SCENARIO_PRESETS]
    if unknown:
        raise ConfigurationError(
            f"unknown scenarios {unknown}; "
            f"choose from {sorted(SCENARIO_PRESETS)}")
    mode = ApMode(config.evaluation.report_mode)
    rows = []
    for name in names:
        preset = config.model_copy(update={
            "scenario": SCENARIO_PRESETS[name], "flags": Flags(img=True)})
        layout = RunLayout.for_config(preset)
        data = await ensure_data(preset, layout)
        baseline = ensure_role(preset, layout, data, Role.BASELINE)
        source_gap = _frechet(baseline.detector, data.source_train,
                              data.target_train)
        for translator_mode in COMPARED_MODES:
            compared = preset.model_copy(update={
                "translator": preset.translator.model_copy(
                    update={"mode": translator_mode})})
            mode_dir = layout.root / "translators" / translator_mode.value
            translated = await _translate_into(compared, data,
                                               mode_dir / "data")
            with audit.consumer("metrics"):
                images = len(load_manifest(
                    translated, include_annotations=False).images)
            row = TranslatorRow(
                scenario=name, mode=translator_mode, images=images,
                frechet_source_target=source_gap,
                frechet_translated_target=_frechet(
                    baseline.detector, translated, data.target_train))
            if train_teachers:
                teacher = train(compared.train_config(Role.TEACHER),
                                translated, mode_dir / "ckpts",
                                validation=data.target_val,
                                eval_config=compared.evaluation)
                row.target_map50, row.source_map50 = (
                    evaluate(teacher.detector, manifest, compared.evaluation,
                             modes=(mode,)).map_for(mode)
                    for manifest in (data.target_val, data.source_val))
            logger.info(f"{name} {translator_mode.value}: Fréchet "
                        f"{row.frechet_source_target:.4f} -> "
                        f"{row.frechet_translated_target:.4f}")
            rows.append(row)
    write_rows(rows, TranslatorRow,
               _output_root(config) / COMPARISON_DIR / "reports",
               "translator-comparison")
    return rows
