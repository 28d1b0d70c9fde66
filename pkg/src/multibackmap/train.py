"""Per-step optimization: dataset splits, Adam, plateau LR schedule, early
stopping with best-checkpoint restore, gradient accumulation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .coarsen import CGMapping, apply_mapping_array
from .core import Ensemble
from .cvae import CvaeModel, batch_loss
from .gnncore import ParamStore
from .tensor import DiffTensor

log = logging.getLogger(__name__)

VAL_KEY_OFFSET = 1_000_003
HISTORY_COLUMNS = ("epoch", "lr", "train_loss", "val_loss", "recon", "msd", "bond", "kl")


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, component: str):
        self.epoch, self.component = epoch, component
        super().__init__(f"non-finite loss in {component} at epoch {epoch}")


@dataclass(frozen=True)
class TrainConfig:
    train_fraction: float = 0.8
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    epochs: int = 100
    batch_size: int = 2
    accumulation_steps: int = 1
    learning_rate: float = 1e-3
    scheduler_factor: float = 0.5
    patience: int = 10
    scheduler_patience: int = 5
    seed: int = 0
    clip_norm: float = 10.0

    def __post_init__(self):
        fr = (self.train_fraction, self.val_fraction, self.test_fraction)
        if min(fr) <= 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be positive and sum to 1, got {fr}")
        for name in ("epochs", "batch_size", "accumulation_steps", "patience", "scheduler_patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.scheduler_factor < 1:
            raise ValueError("scheduler_factor must lie in (0, 1)")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")

    @classmethod
    def from_dict(cls, raw: Mapping) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown training option(s) {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        return asdict(self)

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


def split_sizes(n: int, cfg: TrainConfig) -> tuple[int, int, int]:
    n_val = max(1, int(round(n * cfg.val_fraction)))
    n_test = max(1, int(round(n * cfg.test_fraction)))
    return n - n_val - n_test, n_val, n_test


def split_indices(n: int, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if n < 10:
        raise ValueError(f"need at least 10 frames to split, got {n}")
    n_train, n_val, _ = split_sizes(n, cfg)
    perm = np.random.default_rng(cfg.seed).permutation(n)
    parts = perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :]
    return tuple(np.sort(p) for p in parts)


def split_dataset(ensemble: Ensemble, cfg: TrainConfig) -> tuple[Ensemble, Ensemble, Ensemble]:
    """Seeded shuffle into train/val/test; frames keep their original order within each split."""
    return tuple(ensemble.subset(idx) for idx in split_indices(len(ensemble), cfg))


# ------------------------------------------------------------------ optimizer


class Adam:
    def __init__(self, params: Mapping[str, DiffTensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params, self.lr, self.eps = params, lr, eps
        self.b1, self.b2 = betas
        self.t = 0
        self.m = {k: np.zeros_like(p.values) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.values) for k, p in params.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1, c2 = 1.0 - self.b1**self.t, 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p.values = p.values - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def collect_grads(params: Mapping[str, DiffTensor]) -> dict[str, np.ndarray]:
    return {k: (np.zeros_like(p.values) if p.grad is None else p.grad) for k, p in params.items()}


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for k in grads:
            grads[k] = grads[k] * scale
    return total


# -------------------------------------------------------------------- history


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    components: dict = field(default_factory=dict)


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def initial_val(self) -> float:
        return self.records[0].val_loss

    @property
    def best_val(self) -> float:
        return min(r.val_loss for r in self.records)

    def val_losses(self) -> list[float]:
        return [r.val_loss for r in self.records]

    def lrs(self) -> list[float]:
        return [r.lr for r in self.records]


def write_history(history: History, path: str | Path) -> None:
    """Tab-separated table, one row per epoch; epoch 0 is the untrained model."""
    from .io import atomic_write_text

    lines = ["\t".join(HISTORY_COLUMNS)]
    for r in history.records:
        c = r.components
        row = [r.epoch, r.lr, r.train_loss, r.val_loss] + [c.get(k, float("nan")) for k in HISTORY_COLUMNS[4:]]
        lines.append("\t".join(str(v) if isinstance(v, int) else repr(float(v)) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_history(path: str | Path) -> list[dict]:
    rows = Path(path).read_text().splitlines()
    head = rows[0].split("\t")
    return [dict(zip(head, (float(x) for x in r.split("\t")))) for r in rows[1:]]


# ----------------------------------------------------------------------- loop

LossFn = Callable[[np.ndarray], tuple[DiffTensor, dict]]


def _check_finite(components: Mapping[str, float], epoch: int) -> None:
    for name in ("recon", "msd", "bond", "kl", "loss"):
        if name in components and not np.isfinite(components[name]):
            raise DivergenceError(epoch, name)


def optimize(
    params: ParamStore,
    train_loss: LossFn,
    val_loss: Callable[[], tuple[float, dict]],
    n_train: int,
    cfg: TrainConfig,
    on_update: Callable[[int, ParamStore], None] | None = None,
) -> History:
    """Generic mini-batch loop over ``n_train`` indexed samples.

    ``train_loss(indices)`` returns the mean loss of a micro-batch as a scalar
    tensor plus float components. Gradients of ``accumulation_steps``
    consecutive micro-batches are averaged before each Adam update.
    """
    opt = Adam(params, cfg.learning_rate)
    history = History()
    v0, comps0 = val_loss()
    _check_finite({**comps0, "loss": v0}, 0)
    history.records.append(EpochRecord(0, opt.lr, float("nan"), v0, comps0))
    best_val, best_arrays, since_best = v0, params.arrays(), 0
    sched_best, sched_wait = v0, 0
    n_updates = 0
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n_train)
        batches = [order[i : i + cfg.batch_size] for i in range(0, n_train, cfg.batch_size)]
        params.zero_grad()
        total, pending = 0.0, 0
        for b, idx in enumerate(batches):
            loss, comps = train_loss(idx)
            _check_finite({**comps, "loss": float(loss.values)}, epoch)
            T.backward(loss * (1.0 / cfg.accumulation_steps))
            total += float(loss.values) * len(idx)
            pending += 1
            if pending == cfg.accumulation_steps or b == len(batches) - 1:
                grads = collect_grads(params)
                if pending != cfg.accumulation_steps:
                    # short tail group: rescale to a plain average over its micro-batches
                    grads = {k: g * (cfg.accumulation_steps / pending) for k, g in grads.items()}
                clip_by_global_norm(grads, cfg.clip_norm)
                opt.step(grads)
                params.zero_grad()
                pending = 0
                n_updates += 1
                if on_update is not None:
                    on_update(n_updates, params)
        v, comps = val_loss()
        _check_finite({**comps, "loss": v}, epoch)
        history.records.append(EpochRecord(epoch, opt.lr, total / n_train, v, comps))
        log.info("epoch %d lr %.3g train %.5g val %.5g %s", epoch, opt.lr, total / n_train, v,
                 " ".join(f"{k}={x:.4g}" for k, x in comps.items()))
        if v < best_val:
            best_val, best_arrays, since_best = v, params.arrays(), 0
            history.best_epoch = epoch
        else:
            since_best += 1
        if v < sched_best:
            sched_best, sched_wait = v, 0
        else:
            sched_wait += 1
            if sched_wait >= cfg.scheduler_patience:
                opt.lr *= cfg.scheduler_factor
                sched_wait = 0
        if since_best >= cfg.patience:
            history.stopped_early = True
            break
    params.load_arrays(best_arrays)
    return history


@dataclass
class StepData:
    """Fine frames with their mapped coarse frames, stacked as arrays."""

    fine: np.ndarray
    coarse: np.ndarray

    @classmethod
    def from_ensemble(cls, ensemble: Ensemble, mapping: CGMapping) -> "StepData":
        fine = ensemble.coords()
        if fine.shape[1] != mapping.n_fine:
            raise ValueError(f"level mismatch: frames have {fine.shape[1]} particles, mapping expects {mapping.n_fine}")
        return cls(fine, np.stack([apply_mapping_array(x, mapping) for x in fine]))

    def __len__(self) -> int:
        return len(self.fine)


def mean_step_loss(model: CvaeModel, data: StepData, seed: int, key_offset: int = 0, chunk: int = 32) -> tuple[float, dict]:
    """Frame-averaged step loss over ``data`` with fixed noise keys."""
    n = len(data)
    sums: dict[str, float] = {}
    for s in range(0, n, chunk):
        idx = np.arange(s, min(n, s + chunk))
        parts = batch_loss(model, data.fine[idx], data.coarse[idx], list(idx + key_offset), seed)
        for k, v in parts.components().items():
            sums[k] = sums.get(k, 0.0) + v * len(idx)
    comps = {k: v / n for k, v in sums.items()}
    return comps["loss"], comps


def fit_step_model(
    train: Ensemble,
    val: Ensemble,
    mapping: CGMapping,
    model: CvaeModel,
    cfg: TrainConfig,
    on_update: Callable[[int, ParamStore], None] | None = None,
) -> tuple[CvaeModel, History]:
    """Train ``model`` in place on (fine, mapped coarse) pairs; returns it with its history."""
    if mapping.n_fine != model.n_fine or mapping.n_coarse != model.n_coarse:
        raise ValueError("level mismatch: mapping does not match the model")
    tr, va = StepData.from_ensemble(train, mapping), StepData.from_ensemble(val, mapping)
    if len(tr) == 0 or len(va) == 0:
        raise ValueError("empty training or validation set")

    def train_loss(idx):
        parts = batch_loss(model, tr.fine[idx], tr.coarse[idx], list(idx), cfg.seed)
        return parts.loss, parts.components()

    def val_loss():
        return mean_step_loss(model, va, cfg.seed, VAL_KEY_OFFSET)

    history = optimize(model.params, train_loss, val_loss, len(tr), cfg, on_update)
    return model, history
