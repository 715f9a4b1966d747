"""MSE objective, AdamW, and the epoch loop with best-validation retention."""
from __future__ import annotations

import csv
import logging
import math
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .data import SignalPair, pairs_to_arrays
from .exceptions import ConfigError, DataError, NumericFault, ShapeError
from .layers import Module
from .metrics import MetricReport, aggregate, score_sample
from .tensor import Tape, Tensor, backward, no_grad

__all__ = [
    "TrainConfig",
    "OptimState",
    "EpochRecord",
    "FitResult",
    "mse_loss",
    "adamw_step",
    "fit",
    "evaluate",
    "write_history",
    "scheduled_lr",
    "HISTORY_COLUMNS",
]

log = logging.getLogger(__name__)

LR_SCHEDULES = ("constant", "cosine")
HISTORY_COLUMNS = ("epoch", "train_mse", "val_rrmse_t", "val_rrmse_s", "val_cc", "val_snr_imp")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 15
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    clip_grad: Optional[float] = None
    lr_schedule: str = "constant"

    def __post_init__(self):
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        for name in ("lr", "eps", "epochs", "batch_size"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"TrainConfig.{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise ConfigError(f"TrainConfig.weight_decay must be >= 0, got {self.weight_decay}")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"TrainConfig.{name} must lie in [0, 1), got {getattr(self, name)}")
        if self.clip_grad is not None and not self.clip_grad > 0:
            raise ConfigError(f"TrainConfig.clip_grad must be positive or None, got {self.clip_grad}")
        if int(self.epochs) != self.epochs or int(self.batch_size) != self.batch_size:
            raise ConfigError("epochs and batch_size must be integers")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptimState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def mse_loss(yhat: Tensor, y) -> Tensor:
    """Mean of squared differences over every element."""
    target = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=yhat.dtype))
    if target.shape != yhat.shape:
        raise ShapeError(f"mse_loss: prediction {yhat.shape} vs target {target.shape}")
    diff = yhat - target
    return (diff * diff).mean()


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimState,
    cfg: TrainConfig,
    lr: Optional[float] = None,
) -> None:
    """One decoupled-weight-decay Adam update, applied in place to ``params``.

    ``lr`` overrides ``cfg.lr`` for this step (used by schedules).
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericFault(f"non-finite gradient for parameter {name!r} at step {state.step + 1}")
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    lr = cfg.lr if lr is None else lr
    wd, eps = cfg.weight_decay, cfg.eps
    for name, theta in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m, v = state.m[name], state.v[name]
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        theta[...] = theta - lr * m_hat / (np.sqrt(v_hat) + eps) - lr * wd * theta


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

Dataset = Union[Sequence[SignalPair], Tuple[np.ndarray, np.ndarray, np.ndarray]]


def _arrays(ds: Dataset, what: str) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if isinstance(ds, tuple) and len(ds) == 3 and isinstance(ds[0], np.ndarray):
        noisy, clean, snr = ds
    else:
        if not len(ds):
            raise DataError(f"{what} set is empty")
        noisy, clean, snr = pairs_to_arrays(list(ds))
    noisy = np.asarray(noisy, dtype=np.float64)
    clean = np.asarray(clean, dtype=np.float64)
    if len(noisy) == 0:
        raise DataError(f"{what} set is empty")
    if noisy.shape != clean.shape or noisy.ndim != 2:
        raise DataError(f"{what} set: noisy {noisy.shape} and clean {clean.shape} must be equal n x T")
    return noisy, clean, np.asarray(snr, dtype=np.float64)


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    val_rrmse_t: float = math.nan
    val_rrmse_s: float = math.nan
    val_cc: float = math.nan
    val_snr_imp: float = math.nan
    seconds: float = 0.0

    def row(self) -> dict:
        return {c: getattr(self, c) for c in HISTORY_COLUMNS}


@dataclass
class FitResult:
    history: List[EpochRecord]
    best_epoch: int
    best_state: "OrderedDict[str, np.ndarray]"
    optim_state: OptimState
    initial_train_mse: float

    @property
    def train_losses(self) -> List[float]:
        return [r.train_mse for r in self.history]


def _clip(grads: Dict[str, np.ndarray], max_norm: float) -> None:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale


def scheduled_lr(cfg: TrainConfig, step: int, total: int) -> float:
    """Learning rate for 0-based ``step`` of ``total``.

    "cosine" ramps up linearly over the first 5% of steps, then anneals to 0.
    """
    if cfg.lr_schedule == "cosine":
        warm = max(1, int(0.05 * total))
        if step < warm:
            return cfg.lr * (step + 1) / warm
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * (step - warm) / max(1, total - warm)))
    return cfg.lr


def _batch_loss(model: Module, x: np.ndarray, y: np.ndarray) -> float:
    dt = model.config.np_dtype
    yhat, _ = model(x[:, None, :].astype(dt))
    return float(np.mean((yhat.data[:, 0, :].astype(np.float64) - y) ** 2))


def fit(
    model: Module,
    train: Dataset,
    val: Optional[Dataset] = None,
    cfg: Optional[TrainConfig] = None,
    callback: Optional[Callable[[EpochRecord], None]] = None,
    restore_best: bool = True,
) -> FitResult:
    """Mini-batch AdamW on MSE.

    The selection criterion is validation RRMSE_t when a validation set is
    given, training MSE otherwise. With ``restore_best`` the model ends up
    holding the selected parameters.
    """
    cfg = cfg or TrainConfig()
    noisy, clean, _ = _arrays(train, "training")
    val_arrays = _arrays(val, "validation") if val is not None and len(val) else None
    dt = model.config.np_dtype
    rng = np.random.default_rng(cfg.seed)
    named = list(model.named_parameters())
    params = OrderedDict((n, p.data) for n, p in named)
    state = OptimState()
    n = len(noisy)

    with no_grad(), np.errstate(over="ignore", invalid="ignore"):
        sq = [_batch_loss(model, noisy[i : i + 64], clean[i : i + 64]) * len(noisy[i : i + 64]) for i in range(0, n, 64)]
    initial = sum(sq) / n

    bs = int(cfg.batch_size)
    total_steps = int(cfg.epochs) * ((n + bs - 1) // bs)
    history: List[EpochRecord] = []
    best_score, best_epoch, best_state = math.inf, 0, model.state_dict()
    for epoch in range(1, int(cfg.epochs) + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for b, start in enumerate(range(0, n, int(cfg.batch_size))):
            idx = order[start : start + int(cfg.batch_size)]
            xb = noisy[idx][:, None, :].astype(dt)
            yb = clean[idx][:, None, :].astype(dt)
            model.zero_grad()
            try:
                with Tape() as tape:
                    yhat, _ = model(xb)
                    loss = mse_loss(yhat, yb)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise NumericFault("loss is not finite")
                backward(tape, loss)
            except NumericFault as exc:
                raise NumericFault(f"training aborted at epoch {epoch}, batch {b}: {exc}") from exc
            grads = OrderedDict(
                (name, p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in named
            )
            if cfg.clip_grad is not None:
                _clip(grads, cfg.clip_grad)
            adamw_step(params, grads, state, cfg, lr=scheduled_lr(cfg, state.step, total_steps))
            total += value * len(idx)
            seen += len(idx)
        rec = EpochRecord(epoch=epoch, train_mse=total / seen)
        if val_arrays is not None:
            report = evaluate(model, val_arrays)
            rec.val_rrmse_t = report.overall["rrmse_t"]
            rec.val_rrmse_s = report.overall["rrmse_s"]
            rec.val_cc = report.overall["cc"]
            rec.val_snr_imp = report.overall["snr_imp"]
            score = rec.val_rrmse_t
        else:
            score = rec.train_mse
        rec.seconds = time.perf_counter() - t0
        history.append(rec)
        if score < best_score:
            best_score, best_epoch, best_state = score, epoch, model.state_dict()
        log.info(
            "epoch %d train_mse=%.6g val_rrmse_t=%.6g (%.1fs)", epoch, rec.train_mse, rec.val_rrmse_t, rec.seconds
        )
        if callback is not None:
            callback(rec)
    model.zero_grad()
    if restore_best:
        model.load_state_dict(best_state)
    return FitResult(
        history=history,
        best_epoch=best_epoch,
        best_state=best_state,
        optim_state=state,
        initial_train_mse=initial,
    )


def evaluate(
    model: Module,
    dataset: Dataset,
    batch_size: int = 64,
    sample_ids: Optional[Sequence[int]] = None,
) -> MetricReport:
    """Denoise every segment and aggregate the four metrics per SNR level."""
    noisy, clean, snr = _arrays(dataset, "evaluation")
    denoised = model.predict(noisy, batch_size=batch_size)
    fs = model.config.band_spec.sample_rate_hz
    ids = range(len(noisy)) if sample_ids is None else sample_ids
    samples = [
        score_sample(i, snr[j], clean[j], noisy[j], denoised[j], fs=fs) for j, i in enumerate(ids)
    ]
    return aggregate(samples)


def write_history(history: Sequence[EpochRecord], fh) -> None:
    writer = csv.DictWriter(fh, fieldnames=list(HISTORY_COLUMNS), lineterminator="\n")
    writer.writeheader()
    for rec in history:
        writer.writerow(rec.row())
