"""Losses, Adam, segmentation metrics, early stopping and the multi-run loop."""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Mapping, Sequence

import numpy as np

from . import arch, data
from .errors import ConfigError, ContractError, NumericError, ShapeError
from .tensor import GradTape, ParamStore, Tensor, record

DICE_EPS = 1e-5
IMPROVEMENT = 1e-6


# ---------------------------------------------------------------- losses


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= num_classes:
        raise ContractError(f"labels must lie in 0..{num_classes - 1}")
    out = np.zeros((labels.shape[0], num_classes) + labels.shape[1:], dtype=np.float32)
    np.put_along_axis(out, labels[:, None], 1.0, axis=1)
    return out


def soft_dice_loss(logits: Tensor, target) -> Tensor:
    """``1 - mean_{n,k} (2 sum p t + eps) / (sum p + sum t + eps)`` with ``p = softmax(logits)``."""
    x = logits.data
    if x.ndim != 4 or x.shape[1] < 2:
        raise ShapeError(f"soft_dice_loss: logits must be [N,K>=2,H,W], got {x.shape}")
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=x.dtype)
    if t.shape != x.shape:
        raise ShapeError(f"soft_dice_loss: target {t.shape} != logits {x.shape}")
    if not (np.all((t == 0) | (t == 1)) and np.all(t.sum(axis=1) == 1)):
        raise ContractError("soft_dice_loss: target must be one-hot along the class axis")
    p = _softmax(x)
    axes = (2, 3)
    inter = (p * t).sum(axis=axes)
    num = 2 * inter + DICE_EPS
    den = p.sum(axis=axes) + t.sum(axis=axes) + DICE_EPS
    nk = x.shape[0] * x.shape[1]
    out = np.asarray(1.0 - (num / den).mean(), dtype=x.dtype)

    def backward(g, needs):
        gp = -(g / nk) * (2 * t / den[..., None, None] - (num / den ** 2)[..., None, None])
        return (p * (gp - (p * gp).sum(axis=1, keepdims=True)),)

    return record(out, (logits,), "soft_dice", backward)


def cross_entropy_loss(logits: Tensor, target) -> Tensor:
    """Mean pixelwise ``-log softmax(logits)[target]`` (log-sum-exp stabilised)."""
    x = logits.data
    if x.ndim != 4:
        raise ShapeError(f"cross_entropy_loss: logits must be [N,K,H,W], got {x.shape}")
    idx = np.asarray(target.data if isinstance(target, Tensor) else target)
    if idx.shape != (x.shape[0],) + x.shape[2:]:
        raise ShapeError(f"cross_entropy_loss: target {idx.shape} does not match logits {x.shape}")
    idx = idx.astype(np.int64)
    K = x.shape[1]
    if idx.min(initial=0) < 0 or idx.max(initial=0) >= K:
        raise ContractError(f"cross_entropy_loss: target index outside 0..{K - 1}")
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    picked = np.take_along_axis(x, idx[:, None], axis=1)[:, 0]
    count = idx.size
    out = np.asarray((lse - picked).mean(), dtype=x.dtype)

    def backward(g, needs):
        d = _softmax(x)
        np.put_along_axis(d, idx[:, None], np.take_along_axis(d, idx[:, None], axis=1) - 1, axis=1)
        return (d * (g / count),)

    return record(out, (logits,), "cross_entropy", backward)


def combined_loss(logits: Tensor, labels) -> Tensor:
    """Soft Dice plus cross-entropy with unit weights; ``labels`` is ``[N,H,W]``."""
    labels = np.asarray(labels)
    return soft_dice_loss(logits, one_hot(labels, logits.shape[1])) + cross_entropy_loss(logits, labels)


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamStore, grads: Mapping[str, np.ndarray], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update of every parameter named in ``grads``."""
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        g = np.asarray(g, dtype=p.data.dtype)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)


# ---------------------------------------------------------------- metrics


def _check_masks(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def overlap_counts(pred, gt) -> tuple[int, int, int]:
    """``(|A and B|, |A|, |B|)`` for two binary masks."""
    a, b = _check_masks(pred, gt)
    return int((a & b).sum()), int(a.sum()), int(b.sum())


def dice_score(pred, gt, exact: bool = False):
    inter, na, nb = overlap_counts(pred, gt)
    if na + nb == 0:
        return Fraction(1) if exact else 1.0
    f = Fraction(2 * inter, na + nb)
    return f if exact else float(f)


def jaccard_score(pred, gt, exact: bool = False):
    inter, na, nb = overlap_counts(pred, gt)
    union = na + nb - inter
    if union == 0:
        return Fraction(1) if exact else 1.0
    f = Fraction(inter, union)
    return f if exact else float(f)


def image_scores(pred_labels: np.ndarray, gt_labels: np.ndarray, num_classes: int) -> tuple[float, float]:
    """Dice and Jaccard of one image, averaged over the foreground classes."""
    ds, js = [], []
    for k in range(1, num_classes):
        ds.append(dice_score(pred_labels == k, gt_labels == k))
        js.append(jaccard_score(pred_labels == k, gt_labels == k))
    return float(np.mean(ds)), float(np.mean(js))


# ---------------------------------------------------------------- early stopping


def early_stop(history: Sequence[float], patience: int) -> tuple[bool, int]:
    """``(stop, best_epoch)`` for a validation-Dice history (0-indexed epochs).

    An epoch is a new best only if it beats the current best by more than
    1e-6.  Training stops once ``patience`` epochs pass without a new best.
    """
    if not history:
        raise ContractError("early_stop: empty history")
    if patience < 1:
        raise ConfigError(f"patience must be >= 1, got {patience}")
    best = 0
    for i, v in enumerate(history):
        if v > history[best] + IMPROVEMENT:
            best = i
    return len(history) - 1 - best >= patience, best


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    runs: int = 5

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        for name in ("batch_size", "max_epochs", "patience", "runs"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        if self.patience >= self.max_epochs:
            raise ConfigError(f"patience ({self.patience}) must be < max_epochs ({self.max_epochs})")

    def to_dict(self) -> dict:
        return {"learning_rate": self.learning_rate, "batch_size": self.batch_size,
                "max_epochs": self.max_epochs, "patience": self.patience,
                "seed": self.seed, "runs": self.runs}


@dataclass(frozen=True)
class DataSpec:
    """Where samples come from and how they are partitioned.

    Exactly one of ``task`` (a synthetic generator producing ``n`` samples of
    ``height`` x ``width``) and ``manifest`` (a JSON manifest path) is set.
    """

    task: str | None = "stripe"
    manifest: str | None = None
    n: int = 300
    height: int = 64
    width: int = 64
    split: data.SplitSpec = field(default_factory=lambda: data.SplitSpec(2 / 3, 1 / 6, 1 / 6))
    seed: int = 0
    num_classes: int = 2

    def __post_init__(self):
        if (self.task is None) == (self.manifest is None):
            raise ConfigError("data needs exactly one of 'task' and 'manifest'")
        if self.task is not None and self.task not in data.TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {sorted(data.TASKS)}")
        if self.n < 3:
            raise ConfigError(f"n must be >= 3, got {self.n}")
        if isinstance(self.split, Mapping):
            object.__setattr__(self, "split", data.SplitSpec(**self.split))

    def to_dict(self) -> dict:
        return {"task": self.task, "manifest": self.manifest, "n": self.n, "height": self.height,
                "width": self.width, "split": self.split.to_dict(), "seed": self.seed,
                "num_classes": self.num_classes}

    def load(self) -> tuple[data.Dataset, data.Dataset, data.Dataset]:
        if self.task is not None:
            ds = data.generate(self.task, self.n, self.height, self.width, self.seed)
        else:
            ds = data.load_manifest(self.manifest, self.num_classes)
        return data.split(ds, self.split, self.seed)


# ---------------------------------------------------------------- reports


def _fmt(x: float) -> str:
    return f"{100 * x:.2f}"


@dataclass
class MetricReport:
    """Per-run test scores and their mean and sample standard deviation."""

    per_run: list[dict] = field(default_factory=list)

    def _stat(self, key: str) -> tuple[float, float]:
        vals = np.array([r[key] for r in self.per_run], dtype=np.float64)
        if vals.size == 0:
            return float("nan"), float("nan")
        sd = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
        return float(vals.mean()), sd

    @property
    def dice_mean(self) -> float:
        return self._stat("dice")[0]

    @property
    def dice_sd(self) -> float:
        return self._stat("dice")[1]

    @property
    def jaccard_mean(self) -> float:
        return self._stat("jaccard")[0]

    @property
    def jaccard_sd(self) -> float:
        return self._stat("jaccard")[1]

    def to_dict(self) -> dict:
        return {
            "runs": len(self.per_run),
            "per_run": [dict(r) for r in self.per_run],
            "dice": {"mean": self.dice_mean, "sd": self.dice_sd},
            "jaccard": {"mean": self.jaccard_mean, "sd": self.jaccard_sd},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricReport":
        return cls([dict(r) for r in d["per_run"]])

    def table_row(self, label: str) -> str:
        return (f"{label:<20} {_fmt(self.dice_mean)}±{_fmt(self.dice_sd)}"
                f"   {_fmt(self.jaccard_mean)}±{_fmt(self.jaccard_sd)}")

    def to_table(self, label: str = "model") -> str:
        """Scores in percent as ``mean±sd``."""
        return format_table({label: self})


def format_table(reports: Mapping[str, MetricReport]) -> str:
    head = f"{'model':<20} {'Dice (%)':<13}   {'Jaccard (%)'}"
    return "\n".join([head] + [r.table_row(k) for k, r in reports.items()]) + "\n"


# ---------------------------------------------------------------- training loop


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_dice: float
    val_jaccard: float


@dataclass
class RunResult:
    seed: int
    best_epoch: int
    history: list[EpochRecord]
    state: dict[str, np.ndarray]
    test_dice: float
    test_jaccard: float


def predict(net: arch.Network, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Argmax labels ``[N, H, W]`` in eval mode."""
    out = []
    for s in range(0, len(images), batch_size):
        logits = net.forward(Tensor(images[s:s + batch_size]), mode="eval").data
        out.append(logits.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[2:], dtype=np.int64)


def evaluate(net: arch.Network, ds: data.Dataset, batch_size: int = 16) -> tuple[float, float]:
    """Unweighted mean over images of the per-image Dice and Jaccard."""
    if len(ds) == 0:
        raise ContractError("evaluate: empty dataset")
    preds = predict(net, ds.images(), batch_size)
    scores = [image_scores(p, s.mask, ds.num_classes) for p, s in zip(preds, ds.samples)]
    d, j = zip(*scores)
    return float(np.mean(d)), float(np.mean(j))


def train_step(net: arch.Network, images: np.ndarray, labels: np.ndarray,
               state: AdamState, lr: float) -> float:
    with GradTape() as tape:
        logits = net.forward(Tensor(images), mode="train")
        loss = combined_loss(logits, labels)
    value = float(loss.data)
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value} at step {state.t + 1}")
    tape.backward(loss)
    grads = {name: tape.grad(t) for name, t in net.params.trainable_items()}
    adam_step(net.params, grads, state, lr)
    return value


def train_run(spec: arch.ArchitectureSpec, splits, config: TrainConfig, seed: int,
              on_epoch: Callable[[EpochRecord], None] | None = None) -> RunResult:
    """Fresh init, train with early stopping on validation Dice, score the best state on test."""
    train_ds, val_ds, test_ds = splits
    if len(train_ds) == 0 or len(val_ds) == 0 or len(test_ds) == 0:
        raise ConfigError("train, validation and test partitions must all be non-empty")
    net = arch.build(spec, seed=seed)
    rng = np.random.default_rng(seed)
    images, labels = train_ds.images(), train_ds.masks()
    opt = AdamState()
    history: list[EpochRecord] = []
    best_state, best_epoch = net.params.state_dict(), 0
    for epoch in range(config.max_epochs):
        order = rng.permutation(len(train_ds))
        losses = []
        for s in range(0, len(order), config.batch_size):
            idx = order[s:s + config.batch_size]
            losses.append(train_step(net, images[idx], labels[idx], opt, config.learning_rate))
        vd, vj = evaluate(net, val_ds, config.batch_size)
        rec = EpochRecord(epoch, float(np.mean(losses)), vd, vj)
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        stop, best = early_stop([h.val_dice for h in history], config.patience)
        if best == epoch:
            best_state, best_epoch = net.params.state_dict(), epoch
        if stop:
            break
    net.params.load_state_dict(best_state)
    td, tj = evaluate(net, test_ds, config.batch_size)
    return RunResult(seed, best_epoch, history, best_state, td, tj)


def worker_limit() -> int:
    """Pool size cap from ``SDNET_THREADS`` (default 1: runs execute in-process)."""
    raw = os.environ.get("SDNET_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"SDNET_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"SDNET_THREADS must be >= 1, got {n}")
    return n


def _run_job(job) -> RunResult:
    spec, data_spec, config, seed = job
    return train_run(spec, data_spec.load(), config, seed)


def run_experiment(spec: arch.ArchitectureSpec, data_spec: DataSpec, config: TrainConfig,
                   workers: int | None = None) -> tuple[MetricReport, list[RunResult]]:
    """``config.runs`` independent runs with seeds ``seed .. seed + runs - 1``."""
    seeds = [config.seed + i for i in range(config.runs)]
    workers = min(workers or worker_limit(), len(seeds))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_job, [(spec, data_spec, config, s) for s in seeds]))
    else:
        splits = data_spec.load()
        results = [train_run(spec, splits, config, s) for s in seeds]
    report = MetricReport([
        {"seed": r.seed, "best_epoch": r.best_epoch, "epochs": len(r.history),
         "dice": r.test_dice, "jaccard": r.test_jaccard}
        for r in results
    ])
    return report, results
