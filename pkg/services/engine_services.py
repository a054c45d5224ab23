import json
import shutil
from pathlib import Path

import numpy as np
import torch
from loguru import logger
from pydantic import BaseModel, ConfigDict
from tqdm import tqdm

from core.audit import audit
from core.config import get_settings
from core.exceptions import DataError, RoleDatasetMismatchError
from schemas.detector_model import (HistoryEntry, LabelMode, LossReport,
                                    LossWeights, Role, TrainConfig,
                                    TrainingHistory)
from schemas.experiment_model import EvalConfig
from schemas.report_model import ApMode
from schemas.scene_model import DatasetManifest, Domain, Provenance, Sample
from services.alignment_services import (DomainClassifier,
                                         build_domain_classifier,
                                         build_optimizer, forbid_alignment,
                                         teacher_step)
from services.metrics_services import evaluate
from services.model_services import (Detector, SoftLabelParams,
                                     build_detector, detection_loss, forward,
                                     load_checkpoint, momentum_buffers,
                                     params_hash, restore_momentum,
                                     save_checkpoint)
from utilis.manifest_helper import load_manifest, load_samples, write_json

LABELED_STREAM = 0
UNLABELED_STREAM = 1
HISTORY_FILE = "history.json"
TRAIN_LOG_FILE = "train_log.jsonl"
BEST_CHECKPOINT = "ckpt_best.json"


class TrainingResult(BaseModel):
    detector: Detector
    history: TrainingHistory
    final_checkpoint: Path
    best_checkpoint: Path | None = None
    selected_checkpoint: Path
    params_hash: str
    domain_classifier: DomainClassifier | None = None

    model_config = ConfigDict(arbitrary_types_allowed=True)


def checkpoint_path(run_dir: Path, iteration: int) -> Path:
    return run_dir / f"ckpt_{iteration}.json"


def data_order(seed: int, stream: int, epoch: int, size: int) -> np.ndarray:
    """Visiting order of one epoch, a pure function of its arguments."""
    return np.random.default_rng([seed, stream, epoch]).permutation(size)


def sample_index(seed: int, stream: int, iteration: int, size: int) -> int:
    """Dataset index consumed at a 1-based iteration."""
    epoch, position = divmod(iteration - 1, size)
    return int(data_order(seed, stream, epoch, size)[position])


def _peek_domains(path: Path) -> set[Domain]:
    return load_manifest(path, include_annotations=False).domains()


def check_role_datasets(config: TrainConfig, labeled: Path,
                        unlabeled: Path | None) -> None:
    """
    Validate the manifests a role is trained on. Only image records are
    read.
    Raises:
        RoleDatasetMismatchError: If the datasets do not fit the role.
    """
    role = config.role
    domains = _peek_domains(labeled)
    if not domains:
        raise RoleDatasetMismatchError(f"{role.value} labeled manifest "
                                       f"{labeled} is empty")
    allowed = {
        Role.BASELINE: {Domain.SOURCE},
        Role.ORACLE: {Domain.TARGET},
        Role.TEACHER: {Domain.SOURCE, Domain.TRANSLATED},
        Role.STUDENT: {Domain.SOURCE, Domain.TRANSLATED, Domain.TARGET},
    }[role]
    if not domains <= allowed:
        raise RoleDatasetMismatchError(
            f"{role.value} cannot train on "
            f"{sorted(d.value for d in domains)} images")

    wants_unlabeled = role == Role.TEACHER and config.grl is not None
    if wants_unlabeled and unlabeled is None:
        raise RoleDatasetMismatchError(
            "aligned teacher training needs an unlabeled target manifest")
    if not wants_unlabeled and unlabeled is not None:
        raise RoleDatasetMismatchError(
            f"{role.value} training takes no unlabeled manifest")
    if unlabeled is not None and _peek_domains(unlabeled) != {Domain.TARGET}:
        raise RoleDatasetMismatchError(
            f"unlabeled manifest {unlabeled} must hold target images only")


def _check_student_labels(manifest: DatasetManifest) -> None:
    target_ids = {record.id for record in manifest.images
                  if record.domain == Domain.TARGET}
    for annotation in manifest.annotations:
        if (annotation.image_id in target_ids
                and annotation.provenance != Provenance.PSEUDO):
            raise RoleDatasetMismatchError(
                "student target images may only carry pseudo labels")


def supervised_step(detector: Detector, sample: Sample,
                    optimizer: torch.optim.Optimizer,
                    weights: LossWeights | None = None,
                    soft: SoftLabelParams | None = None) -> LossReport:
    """
    One optimization step on a single labeled sample.
    Raises:
        DataError: If the sample has no annotations.
    """
    if sample.annotations is None:
        raise DataError("labeled sample has no annotations")
    weights = weights or detector.config.loss_weights
    optimizer.zero_grad(set_to_none=True)
    _, pred = forward(detector, sample.image)
    components = detection_loss(pred, sample.annotations, soft)
    components.total(weights).backward()
    optimizer.step()
    return LossReport(
        det_objectness=float(components.objectness),
        det_class=float(components.classification),
        det_box=float(components.box),
    )


def _soft_params(config: TrainConfig) -> SoftLabelParams | None:
    pseudo = config.pseudo
    if pseudo is None or pseudo.label_mode != LabelMode.SOFT:
        return None
    return SoftLabelParams(temperature=pseudo.temperature, alpha=pseudo.alpha)


def _named_parameters(detector: Detector,
                      classifier: DomainClassifier | None) -> dict:
    named = {f"detector.{name}": p
             for name, p in detector.named_parameters()}
    if classifier is not None:
        named.update({f"domain_classifier.{name}": p
                      for name, p in classifier.named_parameters()})
    return named


def _load_history(run_dir: Path, up_to: int) -> list[HistoryEntry]:
    path = run_dir / HISTORY_FILE
    if not path.exists():
        return []
    history = TrainingHistory.model_validate_json(path.read_text())
    return [entry for entry in history.entries if entry.iteration <= up_to]


def _log_line(entry: HistoryEntry) -> str:
    return json.dumps({
        "iteration": entry.iteration,
        "lr": entry.lr,
        "det_objectness": entry.losses.det_objectness,
        "det_class": entry.losses.det_class,
        "det_box": entry.losses.det_box,
        "domain": entry.losses.domain,
        "lambda": entry.lambda_,
    }, sort_keys=True)


def train(config: TrainConfig, labeled: Path, run_dir: Path,
          unlabeled: Path | None = None, validation: Path | None = None,
          eval_config: EvalConfig | None = None,
          resume_from: Path | None = None) -> TrainingResult:
    """
    Train one role with SGD, a step learning-rate schedule and periodic
    validation.
    Args:
        config (TrainConfig): Role, schedule and role sections.
        labeled (Path): Labeled manifest (source, target, translated or
            joint, depending on the role).
        run_dir (Path): Receives checkpoints, the JSON-lines log and
            ``history.json``.
        unlabeled (Path | None): Target manifest of aligned teacher runs;
            its annotations are never loaded.
        validation (Path | None): Labeled manifest scored every
            ``eval_every`` iterations under the evaluator consumer.
        eval_config (EvalConfig | None): Validation settings.
        resume_from (Path | None): Checkpoint to continue from.
    Returns:
        TrainingResult: Selected detector, history and checkpoint paths.
    Raises:
        RoleDatasetMismatchError: Before any step, if the manifests do not
            fit the role.
        DataError: If a labeled sample has no annotations.
    """
    check_role_datasets(config, labeled, unlabeled)
    settings = get_settings()
    if settings.torch_threads:
        torch.set_num_threads(settings.torch_threads)
    torch.use_deterministic_algorithms(True)
    run_dir.mkdir(parents=True, exist_ok=True)

    with audit.consumer(config.role.value):
        labeled_manifest = load_manifest(labeled, include_annotations=True)
        if config.role == Role.STUDENT:
            _check_student_labels(labeled_manifest)
        labeled_samples = load_samples(labeled_manifest)
        unlabeled_samples = []
        if unlabeled is not None:
            unlabeled_samples = load_samples(
                load_manifest(unlabeled, include_annotations=False))

    detector = build_detector(config.detector, config.seed)
    classifier = (build_domain_classifier(config.detector, config.grl,
                                          config.seed)
                  if config.grl is not None else None)
    start = 0
    momentum = {}
    if resume_from is not None:
        checkpoint = load_checkpoint(resume_from, config.detector)
        detector = checkpoint.detector
        if classifier is not None and checkpoint.domain_classifier_state:
            classifier.load_state_dict(checkpoint.domain_classifier_state)
        start = checkpoint.iteration
        momentum = checkpoint.momentum
        logger.info(f"Resuming {config.role.value} from iteration {start}")

    named = _named_parameters(detector, classifier)
    optimizer = build_optimizer(
        [detector] + ([classifier] if classifier is not None else []),
        config)
    restore_momentum(optimizer, named, momentum)

    entries = _load_history(run_dir, start) if start else []
    log_path = run_dir / TRAIN_LOG_FILE
    log_path.write_text("".join(_log_line(e) + "\n" for e in entries))
    best_map = max((e.val_map50 for e in entries
                    if e.val_map50 is not None), default=None)
    best_checkpoint = (run_dir / BEST_CHECKPOINT
                       if best_map is not None
                       and (run_dir / BEST_CHECKPOINT).exists() else None)

    soft = _soft_params(config)
    weights = config.detector.loss_weights
    total = config.total_iters
    with open(log_path, "a") as log_file:
        for iteration in tqdm(range(start + 1, total + 1),
                              desc=config.role.value, disable=None):
            lr = config.lr_at(iteration)
            for group in optimizer.param_groups:
                group["lr"] = lr
            sample = labeled_samples[sample_index(
                config.seed, LABELED_STREAM, iteration, len(labeled_samples))]
            lambda_ = None
            if classifier is not None:
                target = unlabeled_samples[sample_index(
                    config.seed, UNLABELED_STREAM, iteration,
                    len(unlabeled_samples))]
                lambda_ = config.grl.lambda_at(iteration)
                losses = teacher_step(detector, classifier, sample, target,
                                      config.grl, optimizer, iteration,
                                      weights)
            elif config.role == Role.STUDENT:
                with forbid_alignment():
                    losses = supervised_step(detector, sample, optimizer,
                                             weights, soft)
            else:
                losses = supervised_step(detector, sample, optimizer,
                                         weights)

            entry = HistoryEntry(iteration=iteration, lr=lr, losses=losses,
                                 lambda_=lambda_)
            if validation is not None and iteration % config.eval_every == 0:
                report = evaluate(detector, validation, eval_config,
                                  modes=(ApMode.ALLPOINT,))
                entry.val_map50 = report.map_for(ApMode.ALLPOINT)
                logger.info(f"{config.role.value} iteration {iteration}: "
                            f"val mAP@50 {entry.val_map50}")
            entries.append(entry)
            log_file.write(_log_line(entry) + "\n")

            if iteration % config.eval_every == 0 or iteration == total:
                path = checkpoint_path(run_dir, iteration)
                save_checkpoint(
                    path, detector, iteration, classifier,
                    momentum_buffers(optimizer, named),
                    extra={"role": config.role.value})
                write_json(run_dir / HISTORY_FILE,
                           TrainingHistory(role=config.role, entries=entries))
                if entry.val_map50 is not None and (
                        best_map is None or entry.val_map50 > best_map):
                    best_map = entry.val_map50
                    best_checkpoint = run_dir / BEST_CHECKPOINT
                    shutil.copyfile(path, best_checkpoint)

    final_checkpoint = checkpoint_path(run_dir, total)
    if total == 0 or not final_checkpoint.exists():
        save_checkpoint(final_checkpoint, detector, total, classifier,
                        momentum_buffers(optimizer, named),
                        extra={"role": config.role.value})
    history = TrainingHistory(role=config.role, entries=entries)
    write_json(run_dir / HISTORY_FILE, history)

    selected = final_checkpoint
    if config.selection == "best" and best_checkpoint is not None:
        selected = best_checkpoint
        detector = load_checkpoint(best_checkpoint).detector
    digest = params_hash(detector)
    logger.info(f"{config.role.value} training done at iteration {total}, "
                f"params {digest[:12]}")
    return TrainingResult(
        detector=detector,
        history=history,
        final_checkpoint=final_checkpoint,
        best_checkpoint=best_checkpoint,
        selected_checkpoint=selected,
        params_hash=digest,
        domain_classifier=classifier,
    )
