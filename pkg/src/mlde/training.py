"""End-to-end trainer for one binary ensemble model, plus the seven-task bank.

Each training example is a four-level ROI pyramid; level k feeds branch k.
The four positive-class branch probabilities are fused by the learnable
convex-combination layer and the loss is binary cross-entropy on the fused
probability, so gradients reach the fusion weights and every unfrozen branch
group in the same backward pass. Fine-tuning is staged: all four branches
follow the same freeze schedule while the fusion weights stay trainable
throughout.

Determinism contract: with a fixed seed, deterministic mode (single-threaded)
and the same inputs, two runs produce bitwise-identical checkpoints on the
same floating-point environment.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import imaging
from .backbone import (
    BackboneSpec,
    apply_stage,
    build_architecture,
    build_backbone,
    freeze_schedule,
    trainable_parameters,
)
from .dataset import (
    BinaryTaskView,
    DatasetManifest,
    DiagnosisClass,
    class_index,
    class_taxonomy,
    derive_binary_task,
)
from .errors import ConfigError, DataError, TrainingError
from .fusion import NUM_BRANCHES, FusionLayer
from .imaging import ROI_SIZE

log = logging.getLogger(__name__)

PROB_CLAMP_EPS = 1e-7
LOSS_NAME = "binary cross-entropy over 2-way softmax"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.03
    momentum: float = 0.9
    grad_clip_norm: float = 5.0
    batch_size: int = 16
    epochs_per_stage: tuple[int, ...] = (1, 1, 2, 10)
    seed: int = 0
    backbone: str = "tiny_test"
    scales: tuple[float, ...] = imaging.DEFAULT_SCALES
    norm_mean: tuple[float, float, float] = imaging.IMAGENET_MEAN
    norm_std: tuple[float, float, float] = imaging.IMAGENET_STD
    deterministic: bool = True
    branch_pretrain_epochs: int = 0
    xavier_distribution: str = "uniform"
    weights_path: str = ""
    weights_sha256: str = ""
    pyramid_cache_mb: int = 1024
    workers: int = 1
    loss: str = LOSS_NAME

    def violations(self) -> list[str]:
        problems = []
        if self.learning_rate < 0:
            problems.append(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            problems.append(f"momentum must be in [0, 1), got {self.momentum}")
        if self.grad_clip_norm < 0:
            problems.append(f"grad_clip_norm must be >= 0 (0 disables), "
                            f"got {self.grad_clip_norm}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.epochs_per_stage or any(e < 1 for e in self.epochs_per_stage):
            problems.append(f"epochs_per_stage must be positive integers, got {self.epochs_per_stage}")
        try:
            imaging.validate_scales(self.scales)
        except DataError as exc:
            problems.append(str(exc))
        if any(s <= 0 for s in self.norm_std):
            problems.append(f"norm_std components must be positive, got {self.norm_std}")
        try:
            BackboneSpec.for_kind(self.backbone, self.weights_path or None,
                                   self.weights_sha256 or None)
        except Exception as exc:
            problems.append(str(exc))
        if self.branch_pretrain_epochs < 0:
            problems.append("branch_pretrain_epochs must be >= 0")
        if self.xavier_distribution not in ("uniform", "normal"):
            problems.append(f"unknown xavier_distribution {self.xavier_distribution!r}")
        if self.workers < 1:
            problems.append(f"workers must be >= 1, got {self.workers}")
        if self.loss != LOSS_NAME:
            problems.append(f"loss is fixed to {LOSS_NAME!r}")
        return problems

    def validate(self) -> "TrainConfig":
        problems = self.violations()
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        kwargs = dict(data)
        for key in ("epochs_per_stage", "scales", "norm_mean", "norm_std"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


def config_hash(config: TrainConfig) -> str:
    canonical = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class MldeModel(torch.nn.Module):
    """Four branch networks plus the fusion layer, trained as one module."""

    def __init__(self, branches: Sequence[torch.nn.Module], target_code: str,
                 config: TrainConfig):
        super().__init__()
        if len(branches) != NUM_BRANCHES:
            raise TrainingError(f"expected {NUM_BRANCHES} branches, got {len(branches)}")
        self.branches = torch.nn.ModuleList(branches)
        self.fusion = FusionLayer()
        self.target_code = target_code
        self.config = config

    @property
    def group_names(self) -> tuple[str, ...]:
        return self.branches[0].group_names

    def branch_probabilities(self, pyramids: torch.Tensor) -> torch.Tensor:
        """pyramids: (B, 4, 3, H, W) -> positive-class probabilities (B, 4)."""
        probs = []
        for k, branch in enumerate(self.branches):
            logits = branch(pyramids[:, k])
            probs.append(torch.softmax(logits, dim=1)[:, 1])
        return torch.stack(probs, dim=1)

    def forward(self, pyramids: torch.Tensor):
        probs = self.branch_probabilities(pyramids)
        fused = self.fusion(probs)
        return fused, probs

    def normalized_weights(self) -> np.ndarray:
        return self.fusion.parameters_snapshot().normalized_weights()


def derive_seeds(seed: int, n: int) -> list[int]:
    """Deterministic child seeds for branch inits and data ordering."""
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


def build_model(target: DiagnosisClass, config: TrainConfig,
                initialize: bool = True) -> MldeModel:
    """Assemble the four-branch ensemble for one target class.

    With initialize=False only the architecture is built (parameters are
    about to be overwritten, e.g. by a checkpoint load), so no pretrained
    weight file is needed.
    """
    config.validate()
    spec = BackboneSpec.for_kind(config.backbone, config.weights_path or None,
                                 config.weights_sha256 or None)
    if initialize:
        branch_seeds = derive_seeds(config.seed, NUM_BRANCHES + 1)[:NUM_BRANCHES]
        branches = [build_backbone(spec, s, config.xavier_distribution)
                    for s in branch_seeds]
    else:
        branches = [build_architecture(spec) for _ in range(NUM_BRANCHES)]
    return MldeModel(branches, target.code, config)


def bce_loss(fused: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy with probabilities clamped away from {0, 1}."""
    p = fused.clamp(PROB_CLAMP_EPS, 1.0 - PROB_CLAMP_EPS)
    return -(labels * torch.log(p) + (1.0 - labels) * torch.log(1.0 - p)).mean()


class PyramidLoader:
    """Decodes images and produces normalized (4, 3, 224, 224) inputs.

    Pure per-image work, so results are cached up to a byte budget and may be
    computed by parallel workers with order restored by the caller.
    """

    def __init__(self, root: Path, scales, norm_mean, norm_std, cache_mb: int = 1024):
        self.root = Path(root)
        self.scales = imaging.validate_scales(scales)
        self.norm_mean = tuple(norm_mean)
        self.norm_std = tuple(norm_std)
        self._cache: dict[str, np.ndarray] = {}
        self._cache_budget = int(cache_mb) * (1 << 20)
        self._cache_bytes = 0

    def array(self, image_id: str, rel_path: str) -> np.ndarray:
        cached = self._cache.get(image_id)
        if cached is not None:
            return cached
        try:
            img = imaging.decode_image(self.root / rel_path)
            pyramid = imaging.extract_roi_pyramid(img, self.scales)
            levels = [
                imaging.normalize_channels(lvl, self.norm_mean, self.norm_std)
                .transpose(2, 0, 1)
                for lvl in pyramid.levels
            ]
        except DataError as exc:
            raise DataError(f"image {image_id!r}: {exc}") from exc
        arr = np.ascontiguousarray(np.stack(levels, axis=0), dtype=np.float32)
        if self._cache_bytes + arr.nbytes <= self._cache_budget:
            self._cache[image_id] = arr
            self._cache_bytes += arr.nbytes
        return arr

    def batch(self, entries, workers: int = 1) -> torch.Tensor:
        if workers > 1 and len(entries) > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=workers) as pool:
                arrays = list(pool.map(lambda e: self.array(e.image_id, e.path), entries))
        else:
            arrays = [self.array(e.image_id, e.path) for e in entries]
        return torch.from_numpy(np.stack(arrays, axis=0))


@dataclass
class TrainedModel:
    """A trained ensemble plus everything needed to reproduce or inspect it."""

    model: MldeModel
    target: DiagnosisClass
    config: TrainConfig
    history: dict = field(default_factory=dict)

    def normalized_weights(self) -> np.ndarray:
        return self.model.normalized_weights()


def step(model: MldeModel, batch, optimizer: torch.optim.Optimizer,
         grad_clip_norm: float = 0.0, context: str = "") -> float:
    """One optimization step on one batch; returns the batch loss.

    Exactly the parameters held by the optimizer change; a non-finite loss
    aborts with a diagnostic. Clamped cross-entropy gradients can reach 1e7
    on confidently-wrong samples, so the step clips the total gradient norm
    when grad_clip_norm > 0.
    """
    pyramids, labels = batch
    if pyramids.shape[0] == 0:
        raise TrainingError("empty batch")
    optimizer.zero_grad()
    fused, _ = model(pyramids)
    loss = bce_loss(fused, labels)
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss.item()!r} {context}".strip())
    loss.backward()
    if grad_clip_norm > 0:
        params = [p for group in optimizer.param_groups for p in group["params"]]
        torch.nn.utils.clip_grad_norm_(params, grad_clip_norm)
    optimizer.step()
    return float(loss.detach())


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _make_optimizer(params, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum)


def _apply_stage_all(model: MldeModel, stage) -> None:
    for branch in model.branches:
        apply_stage(branch, stage)


def _score_entries(model: MldeModel, loader: PyramidLoader, entries,
                   batch_size: int, workers: int = 1) -> np.ndarray:
    """Fused probabilities for a sequence of task entries (no gradients)."""
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(entries), batch_size):
            chunk = entries[start:start + batch_size]
            fused, _ = model(loader.batch(chunk, workers=workers))
            out.append(fused.numpy())
    return np.concatenate(out) if out else np.zeros(0, dtype=np.float32)


def _pretrain_branches(model: MldeModel, loader: PyramidLoader, entries,
                       labels: np.ndarray, config: TrainConfig,
                       rng: np.random.Generator) -> list[float]:
    """Optional ablation mode: fit each branch alone before joint training."""
    losses = []
    full = freeze_schedule(len(model.group_names), model.group_names)[-1]
    for k, branch in enumerate(model.branches):
        apply_stage(branch, full)
        optimizer = _make_optimizer(branch.parameters(), config)
        for epoch in range(config.branch_pretrain_epochs):
            epoch_losses = []
            for idx in _epoch_batches(len(entries), config.batch_size, rng):
                chunk = [entries[i] for i in idx]
                y = torch.from_numpy(labels[idx])
                optimizer.zero_grad()
                logits = branch(loader.batch(chunk, workers=config.workers)[:, k])
                p = torch.softmax(logits, dim=1)[:, 1]
                loss = bce_loss(p, y)
                if not torch.isfinite(loss):
                    raise TrainingError(
                        f"non-finite loss in branch {k} pretraining epoch {epoch}")
                loss.backward()
                if config.grad_clip_norm > 0:
                    torch.nn.utils.clip_grad_norm_(
                        list(branch.parameters()), config.grad_clip_norm)
                optimizer.step()
                epoch_losses.append(float(loss.detach()))
            losses.append(float(np.mean(epoch_losses)))
    return losses


def train_task(task: BinaryTaskView, config: TrainConfig,
               val_task: Optional[BinaryTaskView] = None,
               loader: Optional[PyramidLoader] = None) -> TrainedModel:
    """Train one binary ensemble on a one-vs-rest task view.

    Degenerate tasks (no positives or no negatives) log a warning and return
    the freshly initialized model untrained, so the seven-model bank stays
    complete. A shared PyramidLoader may be passed in so the seven tasks of a
    bank reuse each other's decoded pyramids.
    """
    config.validate()
    if config.deterministic:
        torch.set_num_threads(1)

    model = build_model(task.target, config)
    history: dict = {
        "loss": [],
        "val_auc": [] if val_task is not None else None,
        "stage_of_epoch": [],
        "pretrain_loss": [],
        "degenerate": task.is_degenerate,
        "final_weights": None,
    }
    trained = TrainedModel(model=model, target=task.target, config=config,
                           history=history)
    if task.is_degenerate:
        log.warning(
            "task %s is degenerate (%d positives / %d negatives); returning "
            "untrained model", task.target.code, task.n_positive, task.n_negative,
        )
        history["final_weights"] = model.normalized_weights().tolist()
        return trained

    data_seed = derive_seeds(config.seed, NUM_BRANCHES + 1)[NUM_BRANCHES]
    rng = np.random.default_rng(data_seed)
    if loader is None:
        loader = PyramidLoader(task.root(), config.scales, config.norm_mean,
                               config.norm_std, config.pyramid_cache_mb)
    entries = list(task.entries)
    labels = np.array([e.binary_label for e in entries], dtype=np.float32)
    workers = 1 if config.deterministic else config.workers

    val_loader = None
    if val_task is not None:
        val_loader = (loader if val_task.root() == loader.root
                      else PyramidLoader(val_task.root(), config.scales,
                                         config.norm_mean, config.norm_std,
                                         config.pyramid_cache_mb))

    if config.branch_pretrain_epochs > 0:
        history["pretrain_loss"] = _pretrain_branches(
            model, loader, entries, labels, config, rng)

    stages = freeze_schedule(len(config.epochs_per_stage), model.group_names)
    for stage, n_epochs in zip(stages, config.epochs_per_stage):
        _apply_stage_all(model, stage)
        params = [model.fusion.alpha]
        for branch in model.branches:
            params.extend(trainable_parameters(branch, stage))
        optimizer = _make_optimizer(params, config)
        for epoch in range(n_epochs):
            _apply_stage_all(model, stage)  # restore train/eval split after validation
            epoch_losses = []
            for i, idx in enumerate(
                    _epoch_batches(len(entries), config.batch_size, rng)):
                chunk = [entries[j] for j in idx]
                batch = (loader.batch(chunk, workers=workers),
                         torch.from_numpy(labels[idx]))
                context = f"(task {task.target.code}, stage {stage.stage_index}, " \
                          f"epoch {epoch}, step {i})"
                epoch_losses.append(
                    step(model, batch, optimizer, config.grad_clip_norm, context))
            history["loss"].append(float(np.mean(epoch_losses)))
            history["stage_of_epoch"].append(stage.stage_index)
            if val_task is not None and not val_task.is_degenerate:
                from .evaluation import auc  # local import to avoid a cycle

                scores = _score_entries(model, val_loader, list(val_task.entries),
                                        config.batch_size, workers)
                val_labels = np.array([e.binary_label for e in val_task.entries])
                history["val_auc"].append(float(auc(scores, val_labels)))

    history["final_weights"] = model.normalized_weights().tolist()
    log.info("task %s trained: final loss %.4f, weights %s",
             task.target.code, history["loss"][-1],
             np.round(history["final_weights"], 3).tolist())
    return trained


@dataclass
class TaskBankResult:
    checkpoints: dict[str, str]
    degenerate: list[str]
    failures: dict[str, str]


def run_task_bank(manifest: DatasetManifest, config: TrainConfig,
                  out_dir: Path, val_manifest: Optional[DatasetManifest] = None
                  ) -> TaskBankResult:
    """Train one model per diagnosis class with per-task seeds seed + index.

    Per-task failures are recorded and the remaining tasks still run; the
    caller decides whether any failure is fatal.
    """
    from .checkpoint import save_checkpoint  # local import to avoid a cycle

    config.validate()
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    # one pyramid cache for the whole bank: all seven tasks read the same images
    loader = PyramidLoader(manifest.root(), config.scales, config.norm_mean,
                           config.norm_std, config.pyramid_cache_mb)
    result = TaskBankResult(checkpoints={}, degenerate=[], failures={})
    for target in class_taxonomy():
        task_config = replace(config, seed=config.seed + class_index(target))
        try:
            task = derive_binary_task(manifest, target)
            val_task = (derive_binary_task(val_manifest, target)
                        if val_manifest is not None else None)
            trained = train_task(task, task_config, val_task, loader=loader)
            path = ckpt_dir / f"{target.code}.ckpt"
            save_checkpoint(trained, path)
            result.checkpoints[target.code] = str(path)
            if trained.history.get("degenerate"):
                result.degenerate.append(target.code)
        except Exception as exc:  # keep the bank running; summarize at the end
            log.error("task %s failed: %s", target.code, exc)
            result.failures[target.code] = str(exc)
    return result
