"""Optimization loop for the surrogate model.

Relative mean-absolute-error objective, Adam with bias correction and a
complex-parameter second moment, plateau-driven learning-rate halving,
quarter-turn rotation augmentation, transfer learning from a checkpoint,
and metric-report evaluation. Every run is a pure function of its seed:
sample order, initialization, and splits all come from keyed streams.
"""
from __future__ import annotations

import json
import math
import time
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from ._rng import stream
from .dataset import Dataset, split_indices
from .metrics import GOF_BAND, GOF_VOICES, MetricReport, record_metrics
from .model import (
    ModelConfig,
    NormalizationSpec,
    forward,
    init_weights,
    normalize_geology,
    output_norm_factor,
    vs_at_source,
    weight_shapes,
)
from .rotation import rotate_sample_90
from .sources import normalize_source

AUGMENTATIONS = ("none", "rotations4")


class TrainingError(RuntimeError):
    """Aborted optimization (non-finite loss or invalid setup)."""


@dataclass
class TrainConfig:
    """Optimization hyperparameters."""

    lr: float = 4e-4
    plateau_patience: int = 10
    plateau_factor: float = 0.5
    min_rel_improvement: float = 1e-4
    epochs: int = 200
    batch_size: int = 4
    seed: int = 0
    augmentation: str = "none"
    split: tuple = (0.8, 0.2, 0.0)   # train/val/test fractions
    clip_norm: float = 1.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError(
                f"plateau factor must lie in (0, 1), got {self.plateau_factor}")
        if self.plateau_patience < 1:
            raise ValueError("plateau patience must be at least 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("bad epochs/batch size")
        if self.augmentation not in AUGMENTATIONS:
            raise ValueError(
                f"unknown augmentation {self.augmentation!r}; "
                f"expected one of {AUGMENTATIONS}")
        self.split = tuple(float(f) for f in self.split)
        if len(self.split) != 3:
            raise ValueError("split must be (train, val, test) fractions")


@dataclass
class TrainHistory:
    """Per-epoch record of one optimization run."""

    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.train_loss)

    def to_entries(self, prefix="history") -> dict:
        # wall times stay out: serialized artifacts must depend only on
        # the seed, never on machine timing
        return {
            f"{prefix}/train_loss": np.asarray(self.train_loss, dtype=np.float64),
            f"{prefix}/val_loss": np.asarray(self.val_loss, dtype=np.float64),
            f"{prefix}/lr": np.asarray(self.lr, dtype=np.float64),
        }

    @classmethod
    def from_entries(cls, entries, prefix="history") -> "TrainHistory":
        train_loss = list(np.asarray(entries[f"{prefix}/train_loss"]))
        return cls(
            train_loss=train_loss,
            val_loss=list(np.asarray(entries[f"{prefix}/val_loss"])),
            lr=list(np.asarray(entries[f"{prefix}/lr"])),
            wall_time=[0.0] * len(train_loss))


@dataclass
class TrainResult:
    """Best-validation weights plus everything needed to reuse them."""

    weights: dict
    norm: NormalizationSpec
    history: TrainHistory
    splits: dict
    best_epoch: int
    best_val: float


def relative_mae_loss(pred, ref) -> ad.Tensor:
    """Mean over samples of sum|pred - ref| / sum|ref|.

    The per-sample denominators are constants (no gradient flows through
    them). Samples whose reference is identically zero are excluded with
    a warning; gradients at exact ties use the zero subgradient.
    """
    pred = ad.as_tensor(pred)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    if ref.ndim == 4:  # single sample: treat as a batch of one
        pred = ad.reshape(pred, (1,) + ref.shape)
        ref = ref[None]
    denom = np.abs(ref).sum(axis=tuple(range(1, ref.ndim)))
    keep = denom > 0.0
    if not keep.any():
        raise ValueError("every reference sample is identically zero")
    if not keep.all():
        warnings.warn(
            f"excluded {int((~keep).sum())} all-zero reference samples "
            "from the loss", stacklevel=2)
    scale = np.where(keep, 1.0 / (np.where(keep, denom, 1.0) * keep.sum()), 0.0)
    per_sample = ad.sum_axes(ad.absolute(ad.sub(pred, ad.Tensor(ref))),
                             tuple(range(1, ref.ndim)))
    return ad.sum_all(ad.mul(per_sample, ad.Tensor(scale)))


def adam_init(params: dict) -> dict:
    """Fresh optimizer state for a named parameter dict."""
    return {
        "step": 0,
        "m": {k: np.zeros_like(p.data) for k, p in params.items()},
        "v": {k: np.zeros(p.data.shape) for k, p in params.items()},
    }


def adam_step(params: dict, grads: dict, state: dict, lr: float,
              beta1=0.9, beta2=0.999, eps=1e-8) -> dict:
    """One bias-corrected Adam update, in place on the parameter data.

    Complex parameters use the squared modulus for the second moment, so
    their effective step is phase-preserving.
    """
    state["step"] += 1
    t = state["step"]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != p.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name} {p.data.shape}")
        m = state["m"][name]
        v = state["v"][name]
        m *= beta1
        m += (1.0 - beta1) * g
        if np.iscomplexobj(g):
            gsq = g.real * g.real + g.imag * g.imag
        else:
            gsq = g * g
        v *= beta2
        v += (1.0 - beta2) * gsq
        p.data -= (lr / c1) * m / (np.sqrt(v / c2) + eps)
    return state


def clip_gradients(grads: dict, max_norm: float = 1.0):
    """Scale the whole gradient dict so its global norm is at most
    max_norm. Returns (grads, pre-clip norm); the sum runs in sorted
    name order for bit-stable results."""
    total = 0.0
    for name in sorted(grads):
        g = grads[name]
        if np.iscomplexobj(g):
            total += float(np.sum(g.real * g.real + g.imag * g.imag))
        else:
            total += float(np.sum(g * g))
    norm = math.sqrt(total)
    if norm > max_norm > 0.0:
        factor = max_norm / norm
        grads = {k: g * factor for k, g in grads.items()}
    return grads, norm


def plateau_lr(val_losses, initial_lr: float, patience: int = 10,
               factor: float = 0.5, min_rel: float = 1e-4) -> float:
    """Learning rate implied by a validation-loss history.

    The rate is multiplied by `factor` each time the loss goes `patience`
    consecutive epochs without improving on the best seen by more than
    `min_rel` relative; the stall counter then resets.
    """
    lr = float(initial_lr)
    best = math.inf
    bad = 0
    for v in val_losses:
        if v < best * (1.0 - min_rel) or best == math.inf:
            best = float(v)
            bad = 0
        else:
            bad += 1
            if bad >= patience:
                lr *= factor
                bad = 0
    return lr


def augment_rotations(ds: Dataset) -> Dataset:
    """Quadruple a dataset with its three quarter-turn rotations.

    The result keeps the originals first, then all samples rotated by one,
    two, and three turns. Augmenting an already-augmented dataset is
    rejected (the provenance carries the flag).
    """
    if ds.provenance.get("augmented"):
        raise ValueError("dataset is already rotation-augmented")
    parts = [ds]
    for k in (1, 2, 3):
        samples = []
        for i in range(len(ds)):
            wf = None if ds.wavefields is None else ds.wavefields[i]
            samples.append(rotate_sample_90(ds.geology(i), ds.source(i), wf, k))
        parts.append(Dataset.from_samples(
            samples, dx=ds.dx, dt=ds.dt, seed=ds.seed,
            provenance=ds.provenance))
    out = Dataset.concatenate(parts)
    out.provenance = {**ds.provenance, "augmented": True}
    return out


@contextmanager
def _inference(weights: dict):
    """Temporarily mark weights non-trainable so forwards build no graph."""
    saved = [(t, t.requires_grad) for t in weights.values()]
    for t, _ in saved:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, flag in saved:
            t.requires_grad = flag


def _check_compatible(model_cfg: ModelConfig, ds: Dataset,
                      need_wavefields=True) -> None:
    if need_wavefields and ds.wavefields is None:
        raise ValueError("dataset carries no reference wavefields")
    if abs(model_cfg.domain_length - ds.domain_length) > 1e-6:
        raise ValueError(
            f"model domain length {model_cfg.domain_length} != dataset "
            f"{ds.domain_length}")
    if ds.vs.shape[3] != model_cfg.resolution[2]:
        raise ValueError(
            f"geology depth {ds.vs.shape[3]} != model depth "
            f"{model_cfg.resolution[2]}")
    if need_wavefields and ds.wavefields.shape[3] != model_cfg.out_len:
        raise ValueError(
            f"wavefield length {ds.wavefields.shape[3]} != model out_len "
            f"{model_cfg.out_len}")


def _validate_weights(weights: dict, cfg: ModelConfig) -> None:
    expected = weight_shapes(cfg)
    if set(weights) != set(expected):
        raise ValueError("checkpoint/config mismatch: parameter names differ")
    for name, (shape, _) in expected.items():
        if tuple(weights[name].data.shape) != tuple(shape):
            raise ValueError(
                f"checkpoint/config mismatch: {name} has shape "
                f"{weights[name].data.shape}, config wants {shape}")


def _inputs(ds: Dataset, cfg: ModelConfig, norm: NormalizationSpec):
    """Normalized model inputs and per-sample output scales."""
    length = ds.domain_length
    a = normalize_geology(ds.vs, norm)
    sv = np.stack([normalize_source(ds.source(i), length, cfg.source_mode)
                   for i in range(len(ds))])
    c = np.array([
        output_norm_factor(vs_at_source(ds.vs[i], ds.positions[i], length),
                           ds.positions[i][2], length)
        for i in range(len(ds))])
    return a, sv, c


def _targets(ds: Dataset, c: np.ndarray) -> np.ndarray:
    return ds.wavefields / c[:, None, None, None, None]


def _batched_loss(weights, cfg, a, sv, targets, batch_size) -> float:
    total = 0.0
    n = a.shape[0]
    for start in range(0, n, batch_size):
        sl = slice(start, min(start + batch_size, n))
        pred = forward(a[sl], sv[sl], weights, cfg)
        loss = relative_mae_loss(pred, targets[sl])
        total += float(loss.data.real) * (sl.stop - sl.start)
    return total / n


def train(model_cfg: ModelConfig, ds: Dataset, cfg: TrainConfig,
          initial_weights: dict | None = None,
          norm: NormalizationSpec | None = None,
          log_stream=None) -> TrainResult:
    """Fit the model; returns the best-validation weights and history.

    `initial_weights` + `norm` resume from a checkpoint (transfer
    learning); otherwise weights come from the seed and normalization
    statistics from the training split. `log_stream` receives one JSON
    line per epoch.
    """
    _check_compatible(model_cfg, ds)
    splits = split_indices(len(ds), cfg.split, cfg.seed)
    if cfg.epochs > 0 and len(splits["val"]) == 0:
        raise ValueError("validation split is empty; adjust cfg.split")
    train_set = ds.subset(splits["train"])
    if cfg.augmentation == "rotations4":
        train_set = augment_rotations(train_set)
    if norm is None:
        norm = NormalizationSpec.from_training_set(train_set.vs,
                                                   ds.domain_length)
    if initial_weights is None:
        weights = init_weights(model_cfg, cfg.seed)
    else:
        weights = {k: ad.parameter(np.array(t.data), k)
                   for k, t in initial_weights.items()}
        _validate_weights(weights, model_cfg)

    a_tr, s_tr, c_tr = _inputs(train_set, model_cfg, norm)
    y_tr = _targets(train_set, c_tr)
    val_set = ds.subset(splits["val"])
    if len(val_set):
        a_val, s_val, c_val = _inputs(val_set, model_cfg, norm)
        y_val = _targets(val_set, c_val)
    else:  # only reachable with epochs == 0
        a_val = s_val = y_val = np.zeros(0)

    state = adam_init(weights)
    history = TrainHistory()
    best_val = math.inf
    best_epoch = -1
    best = {k: t.data.copy() for k, t in weights.items()}
    n_train = len(train_set)

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = plateau_lr(history.val_loss, cfg.lr, cfg.plateau_patience,
                        cfg.plateau_factor, cfg.min_rel_improvement)
        order = stream(cfg.seed, "order", epoch).permutation(n_train)
        epoch_sum = 0.0
        for start in range(0, n_train, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            try:
                pred = forward(a_tr[batch], s_tr[batch], weights, model_cfg)
                loss = relative_mae_loss(pred, y_tr[batch])
                value = float(loss.data.real)
                if not np.isfinite(value):
                    raise FloatingPointError("non-finite loss value")
                grads = ad.gradients(loss, weights)
            except FloatingPointError as exc:
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch samples "
                    f"{batch.tolist()}, lr {lr:.4g}: {exc}") from exc
            grads, _ = clip_gradients(grads, cfg.clip_norm)
            adam_step(weights, grads, state, lr)
            epoch_sum += value * len(batch)
        with _inference(weights):
            val = _batched_loss(weights, model_cfg, a_val, s_val, y_val,
                                cfg.batch_size)
        history.train_loss.append(epoch_sum / n_train)
        history.val_loss.append(val)
        history.lr.append(lr)
        history.wall_time.append(time.perf_counter() - t0)
        if val < best_val:
            best_val = val
            best_epoch = epoch
            best = {k: t.data.copy() for k, t in weights.items()}
        if log_stream is not None:
            log_stream.write(json.dumps({
                "epoch": epoch, "train_loss": history.train_loss[-1],
                "val_loss": val, "lr": lr,
                "time_s": round(history.wall_time[-1], 3)}) + "\n")
            log_stream.flush()

    out = {k: ad.parameter(v, k) for k, v in best.items()}
    return TrainResult(weights=out, norm=norm, history=history,
                       splits=splits, best_epoch=best_epoch,
                       best_val=best_val)


def fine_tune(checkpoint, ds: Dataset, cfg: TrainConfig,
              log_stream=None) -> TrainResult:
    """Continue training from a (weights, model_cfg, norm) checkpoint.

    All parameters stay trainable; the checkpoint's normalization is kept
    so inputs and outputs remain in the scale the weights were fit to.
    """
    weights, model_cfg, norm = checkpoint
    if norm is None:
        raise ValueError("checkpoint carries no normalization statistics")
    return train(model_cfg, ds, cfg, initial_weights=weights, norm=norm,
                 log_stream=log_stream)


def predict(weights: dict, model_cfg: ModelConfig, norm: NormalizationSpec,
            ds: Dataset, batch_size: int = 8,
            denormalize: bool = True) -> np.ndarray:
    """Model wavefields for every sample; (n, ns, ns, out_len, 3)."""
    _check_compatible(model_cfg, ds, need_wavefields=False)
    _validate_weights(weights, model_cfg)
    a, sv, c = _inputs(ds, model_cfg, norm)
    chunks = []
    with _inference(weights):
        for start in range(0, len(ds), batch_size):
            sl = slice(start, min(start + batch_size, len(ds)))
            chunks.append(forward(a[sl], sv[sl], weights, model_cfg).data.real)
    out = np.concatenate(chunks)
    if denormalize:
        out = out * c[:, None, None, None, None]
    return out


def evaluate(weights: dict, model_cfg: ModelConfig, norm: NormalizationSpec,
             ds: Dataset, indices=None, batch_size: int = 8,
             gof_band=GOF_BAND, voices=GOF_VOICES) -> MetricReport:
    """Metric report of the model against a dataset's reference
    wavefields, in normalized units (the error floor is calibrated for
    them)."""
    sub = ds if indices is None else ds.subset(indices)
    _check_compatible(model_cfg, sub)
    _validate_weights(weights, model_cfg)
    a, sv, c = _inputs(sub, model_cfg, norm)
    targets = _targets(sub, c)
    values = []
    with _inference(weights):
        for start in range(0, len(sub), batch_size):
            sl = slice(start, min(start + batch_size, len(sub)))
            pred = forward(a[sl], sv[sl], weights, model_cfg).data.real
            for b in range(pred.shape[0]):
                values.append(record_metrics(pred[b], targets[start + b],
                                             sub.dt, gof_band, voices))
    return MetricReport(values=np.stack(values))
