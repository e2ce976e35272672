"""Losses, Adam with decoupled weight decay, and the train / evaluate loops."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import metrics
from .data import LANDMARK_NAMES, SEG_CLASSES, random_flip
from .errors import ConfigError, DimensionError, NumericError
from .module import Module
from .tensor import Tensor, backward, exp, log_softmax, mean, no_grad, softmax
from .tensor import sum as tsum

DICE_SMOOTH = 1e-5
HEATMAP_SIGMA = 2.0


# ---------------------------------------------------------------- losses


def _one_hot(target: np.ndarray, num_classes: int, axis: int, dtype) -> np.ndarray:
    target = np.asarray(target)
    if target.min() < 0 or target.max() >= num_classes:
        raise DimensionError(f"labels must lie in [0, {num_classes})")
    classes = np.arange(num_classes).reshape((num_classes,) + (1,) * (target.ndim - axis))
    return (np.expand_dims(target, axis) == classes).astype(dtype)


def dice_ce_loss(logits: Tensor, target, smooth: float = DICE_SMOOTH) -> Tensor:
    """``(soft_dice_loss + cross_entropy) / 2`` for ``logits [B, K, D, H, W]``.

    Soft Dice is computed per class over the whole batch and averaged over
    classes; cross-entropy is the mean over voxels.
    """
    target = np.asarray(target)
    if logits.ndim != target.ndim + 1 or logits.shape[:1] + logits.shape[2:] != target.shape:
        raise DimensionError(f"logits {logits.shape} do not match target {target.shape}")
    K = logits.shape[1]
    onehot = _one_hot(target, K, 1, logits.dtype)
    logp = log_softmax(logits, axis=1)
    ce = -tsum(logp * onehot) * (1.0 / target.size)
    prob = exp(logp)
    axes = (0,) + tuple(range(2, logits.ndim))
    inter = tsum(prob * onehot, axis=axes)
    denom = tsum(prob, axis=axes) + onehot.sum(axis=axes)
    dice = (inter * 2.0 + smooth) / (denom + smooth)
    dice_loss = 1.0 - mean(dice)
    return (dice_loss + ce) * 0.5


def gaussian_heatmaps(coords_vox, shape, sigma: float = HEATMAP_SIGMA, dtype=np.float32) -> np.ndarray:
    """One Gaussian blob (peak 1) per landmark: ``[K, D, H, W]``."""
    coords = np.asarray(coords_vox, dtype=np.float64).reshape(-1, 3)
    axes = [np.arange(s, dtype=np.float64) for s in shape]
    out = np.empty((len(coords),) + tuple(shape), dtype=dtype)
    for k, c in enumerate(coords):
        # separable: exp(-|x-c|^2 / 2s^2) = prod over axes
        g = [np.exp(-((a - ci) ** 2) / (2 * sigma**2)) for a, ci in zip(axes, c)]
        out[k] = g[0][:, None, None] * g[1][None, :, None] * g[2][None, None, :]
    return out


def heatmap_mse_loss(pred: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} does not match target {target.shape}")
    diff = pred - target
    return mean(diff * diff)


def ce_cls_loss(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy for ``logits [B, K]`` and integer ``labels [B]``."""
    labels = np.asarray(labels).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.size:
        raise DimensionError(f"logits {logits.shape} do not match {labels.size} labels")
    onehot = _one_hot(labels, logits.shape[1], 1, logits.dtype)
    return -tsum(log_softmax(logits, axis=1) * onehot) * (1.0 / labels.size)


# ---------------------------------------------------------------- optimizer


@dataclass
class TrainConfig:
    lr: float = 0.002
    batch_size: int = 2
    epochs: int = 100
    weight_decay: float = 0.001
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augment: bool = False

    def validate(self) -> "TrainConfig":
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ConfigError("invalid Adam hyperparameters")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], 0)


def adam_step(params, grads, state: AdamState, cfg: TrainConfig) -> None:
    """One in-place Adam update with decoupled weight decay.

    The decay ``p *= 1 - lr * wd`` is applied first and on its own, so a zero
    gradient shrinks parameters by exactly that factor. Every gradient is
    checked before anything is modified.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("params, grads and optimizer state differ in length")
    for p, g in zip(params, grads):
        if g is not None and g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient; optimizer step aborted")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    decay = 1.0 - cfg.lr * cfg.weight_decay
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if cfg.weight_decay:
            p.data *= p.data.dtype.type(decay)
        if g is None:
            g = np.zeros_like(p.data)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p.data -= (cfg.lr * step).astype(p.data.dtype, copy=False)


class Adam:
    def __init__(self, params, cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.state = AdamState.zeros_like(self.params)

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state, self.cfg)


# ---------------------------------------------------------------- batching


def _task_of(model: Module) -> str:
    return model.cfg.task


def stack_images(samples, dtype) -> np.ndarray:
    return np.stack([s.image for s in samples]).astype(dtype, copy=False)


def batch_targets(task: str, samples, dtype=np.float32):
    if task == "segmentation":
        return np.stack([s.label for s in samples]).astype(np.int64)
    if task == "classification":
        return np.array([s.label for s in samples], dtype=np.int64)
    return np.stack([gaussian_heatmaps(s.landmark_voxels(), s.shape, dtype=dtype) for s in samples])


def task_loss(task: str, output: Tensor, targets) -> Tensor:
    if task == "segmentation":
        return dice_ce_loss(output, targets)
    if task == "classification":
        return ce_cls_loss(output, targets)
    return heatmap_mse_loss(output, targets)


# ---------------------------------------------------------------- loops


@dataclass
class TrainLog:
    metric_names: list
    rows: list = field(default_factory=list)

    @property
    def header(self) -> list[str]:
        return ["epoch", "step", "loss"] + list(self.metric_names)

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.rows]

    def csv_line(self, row: dict) -> str:
        return ",".join(_fmt(row.get(k, float("nan"))) for k in self.header) + "\n"

    def to_csv(self) -> str:
        return ",".join(self.header) + "\n" + "".join(self.csv_line(r) for r in self.rows)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


HEADLINE_METRIC = {"segmentation": "dice_mean", "classification": "auc", "landmark": "mre_mean"}


def train(model: Module, dataset, cfg: TrainConfig, val=None, log_path=None, progress=None) -> TrainLog:
    """Minibatch Adam over ``dataset`` (a list of :class:`VolumeSample`).

    Each epoch visits a fresh permutation drawn from ``cfg.seed``, giving
    ``ceil(n / batch_size)`` optimizer steps. One log row per epoch holds the
    mean training loss and, when ``val`` is given, the validation headline
    metric. With ``log_path`` the CSV is written as training goes.
    """
    cfg.validate()
    dataset = list(dataset)
    if not dataset:
        raise ConfigError("training dataset is empty")
    task = _task_of(model)
    if any(s.task != task for s in dataset):
        raise ConfigError(f"dataset samples do not match the model task {task!r}")
    dtype = model.parameters()[0].dtype
    params = model.parameters()
    opt = Adam(params, cfg)
    rng = np.random.default_rng(cfg.seed)
    metric_names = [f"val_{HEADLINE_METRIC[task]}"] if val else []
    log = TrainLog(metric_names)
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        fh.write(",".join(log.header) + "\n")
    n = len(dataset)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    step = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            order = rng.permutation(n)
            total = 0.0
            for b in range(steps_per_epoch):
                batch = [dataset[i] for i in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
                if cfg.augment and task == "segmentation":
                    batch = [random_flip(s, rng) for s in batch]
                x = Tensor(stack_images(batch, dtype))
                loss = task_loss(task, model(x), batch_targets(task, batch, dtype))
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericError(f"non-finite loss at epoch {epoch}, step {step + 1}")
                model.zero_grad()
                backward(loss, params)
                opt.step()
                total += value * len(batch)
                step += 1
            row = {"epoch": epoch, "step": step, "loss": total / n}
            if val:
                row[metric_names[0]] = evaluate(model, val)[HEADLINE_METRIC[task]]
            log.rows.append(row)
            if fh is not None:
                fh.write(log.csv_line(row))
                fh.flush()
            if progress is not None:
                progress(row)
    finally:
        if fh is not None:
            fh.close()
    model.eval()
    return log


def predict(model: Module, samples, batch_size: int = 2) -> np.ndarray:
    """Raw network outputs for ``samples`` in eval mode, stacked along axis 0."""
    model.eval()
    dtype = model.parameters()[0].dtype
    outs = []
    with no_grad():
        for i in range(0, len(samples), batch_size):
            outs.append(model(Tensor(stack_images(samples[i : i + batch_size], dtype))).data)
    return np.concatenate(outs)


def evaluate(model: Module, dataset, batch_size: int = 2) -> metrics.MetricReport:
    dataset = list(dataset)
    if not dataset:
        raise ConfigError("evaluation dataset is empty")
    task = _task_of(model)
    out = predict(model, dataset, batch_size)
    if task == "segmentation":
        pred = out.argmax(axis=1)
        gt = np.stack([s.label for s in dataset])
        return metrics.seg_report(pred, gt, SEG_CLASSES - 1, dataset[0].spacing)
    if task == "classification":
        with no_grad():
            prob = softmax(Tensor(out), axis=1).data[:, 1]
        return metrics.cls_metrics(prob, np.array([s.label for s in dataset]))
    errors = np.stack([metrics.mre(h, s.label, s.spacing)[0] for h, s in zip(out, dataset)])
    return metrics.landmark_report(errors, list(LANDMARK_NAMES[: errors.shape[1]]))


def write_log_csv(path, log: TrainLog) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(log.to_csv())

