"""Loss, optimizer, schedule, metrics and the training loop."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field, asdict
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor
from .errors import ConfigurationError, DivergenceError, EmptyInputError
from .lidar_io import PointCloud
from .model import GRCNet, ModelConfig
from .rng import STREAM_TRAIN, make_rng

log = logging.getLogger(__name__)


# -------------------------------------------------------------------- loss

def cross_entropy(logits: DiffTensor, labels, ignore_label=255) -> DiffTensor:
    labels = np.asarray(labels, dtype=np.int64)
    n, C = logits.shape
    valid = labels != ignore_label
    if labels.shape != (n,):
        raise ConfigurationError(f"{labels.shape[0]} labels for {n} points")
    if ((labels[valid] < 0) | (labels[valid] >= C)).any():
        raise ConfigurationError(f"labels must lie in [0, {C}) or equal the ignore id {ignore_label}")
    count = int(valid.sum())
    if count == 0:
        raise EmptyInputError("no labelled points to train on")
    onehot = np.zeros((n, C))
    onehot[np.flatnonzero(valid), labels[valid]] = 1.0
    return -ad.sum(ad.log_softmax_lastaxis(logits) * onehot) / count


def total_loss(logits, labels, cic, beta, ignore_label=255):
    """Cross-entropy plus ``beta`` times the complementarity loss; returns (total, ce)."""
    ce = cross_entropy(logits, labels, ignore_label)
    if cic is None or beta == 0:
        return ce, ce
    return ce + beta * ad.constant(cic), ce


# --------------------------------------------------------------- optimizer

def sgd_update(param, grad, velocity, lr, momentum=0.9, weight_decay=1e-4):
    """One coupled-weight-decay momentum step on plain arrays: returns (param, velocity)."""
    velocity = momentum * velocity + (grad + weight_decay * param)
    return param - lr * velocity, velocity


@dataclass
class TrainState:
    params: dict
    momentum_buffers: dict
    step: int = 0
    rng: np.random.Generator | None = None
    schedule: dict = field(default_factory=dict)

    @classmethod
    def create(cls, params: dict, seed=0, **schedule):
        return cls(params, {k: np.zeros_like(p.data) for k, p in params.items()}, 0,
                   make_rng(seed, STREAM_TRAIN), dict(schedule))


def sgd_momentum_step(state: TrainState, lr, momentum=0.9, weight_decay=1e-4) -> TrainState:
    """v <- momentum * v + (grad + wd * p);  p <- p - lr * v.  Gradients are cleared."""
    for name, p in state.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient in parameter {name!r}")
        p.data, state.momentum_buffers[name] = sgd_update(
            p.data, g, state.momentum_buffers[name], lr, momentum, weight_decay)
        p.grad = None
    state.step += 1
    return state


def onecycle_lr(step, total_steps, max_lr, pct_up=0.3, div=25.0, final_div=1e4):
    """Cosine warm-up from max_lr/div to max_lr, then cosine decay to max_lr/final_div."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    start, end = max_lr / div, max_lr / final_div
    up = pct_up * total_steps
    if step <= up:
        frac = step / up if up > 0 else 1.0
        return start + (max_lr - start) * (1 - math.cos(math.pi * frac)) / 2
    down = (total_steps - 1) - up
    frac = (step - up) / down if down > 0 else 1.0
    return end + (max_lr - end) * (1 + math.cos(math.pi * frac)) / 2


def grad_norm(params: dict) -> float:
    return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params.values() if p.grad is not None))


# ----------------------------------------------------------------- metrics

def confusion_matrix(pred, true, n_classes, ignore_label=255) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError(f"prediction {pred.shape} and label {true.shape} lengths differ")
    keep = (true != ignore_label) & (true >= 0) & (true < n_classes)
    p = np.clip(pred[keep], 0, n_classes - 1)
    return np.bincount(true[keep] * n_classes + p, minlength=n_classes ** 2).reshape(n_classes, n_classes)


def iou_from_confusion(conf: np.ndarray):
    """Per-class IoU (nan for classes absent from both prediction and truth) and their mean."""
    tp = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - tp
    if conf.sum() == 0:
        raise EmptyInputError("no labelled points to score")
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    return iou, float(np.nanmean(iou))


def miou(pred, true, n_classes, ignore_label=255):
    return iou_from_confusion(confusion_matrix(pred, true, n_classes, ignore_label))


def accuracy(pred, true, ignore_label=255) -> float:
    true = np.asarray(true)
    keep = true != ignore_label
    return float(np.mean(np.asarray(pred)[keep] == true[keep]))


# ------------------------------------------------------------ augmentation

def augment(cloud: PointCloud, rng: np.random.Generator, max_drop=0.1) -> PointCloud:
    """Random z-rotation, xy flips, uniform scale in [0.95, 1.05] and point drop."""
    theta = rng.uniform(0, 2 * np.pi)
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    flip = np.where(rng.random(2) < 0.5, -1.0, 1.0)
    scale = rng.uniform(0.95, 1.05)
    keep = rng.random(len(cloud)) >= rng.uniform(0.0, max_drop)
    if not keep.any():
        keep[0] = True
    pts = cloud.points[keep].copy()
    xyz = pts[:, :3] @ rot.T
    xyz[:, 0] *= flip[0]
    xyz[:, 1] *= flip[1]
    pts[:, :3] = xyz * scale
    labels = None if cloud.labels is None else cloud.labels[keep]
    return PointCloud(pts, labels)


# ------------------------------------------------------------ checkpoints

def _rng_state_json(rng):
    def conv(v):
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        if isinstance(v, np.ndarray):
            return [int(x) for x in v]
        if isinstance(v, np.integer):
            return int(v)
        return v
    return conv(rng.bit_generator.state)


def _rng_from_json(doc):
    rng = np.random.Generator(np.random.Philox())
    st = dict(doc)
    inner = {k: np.array(v, dtype=np.uint64) for k, v in st["state"].items()}
    st["state"] = inner
    st["buffer"] = np.array(st["buffer"], dtype=np.uint64)
    rng.bit_generator.state = st
    return rng


def _atomic_write_text(path, text):
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), prefix=".tmp-")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def save_checkpoint(path, model: GRCNet, state: TrainState | None = None, extra=None):
    """``path`` (GRCW tensors) plus ``path + '.json'`` (config, step, PRNG state)."""
    tensors = dict(model.state_dict())
    meta = {"version": 1, "model_config": model.cfg.to_dict(), "step": 0}
    if state is not None:
        tensors.update({f"momentum.{k}": v for k, v in state.momentum_buffers.items()})
        meta["step"] = state.step
        meta["schedule"] = state.schedule
        if state.rng is not None:
            meta["rng_state"] = _rng_state_json(state.rng)
    if extra:
        meta.update(extra)
    ad.save_tensors(path, tensors)
    _atomic_write_text(str(path) + ".json", json.dumps(meta, indent=2, sort_keys=True))


def load_checkpoint(path):
    """Rebuild ``(model, state, meta)`` from :func:`save_checkpoint` output."""
    with open(str(path) + ".json") as fh:
        meta = json.load(fh)
    tensors = ad.load_tensors(path)
    cfg = ModelConfig.from_dict(meta["model_config"])
    model = GRCNet(cfg)
    model.load_state_dict(tensors)
    params = model.parameters()
    mom = {k: tensors.get(f"momentum.{k}", np.zeros_like(p.data)) for k, p in params.items()}
    rng = _rng_from_json(meta["rng_state"]) if "rng_state" in meta else None
    state = TrainState(params, mom, int(meta.get("step", 0)), rng, meta.get("schedule", {}))
    return model, state, meta


# ---------------------------------------------------------------- training

@dataclass
class TrainSettings:
    steps: int = 300
    max_lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    pct_up: float = 0.3
    div: float = 25.0
    final_div: float = 1e4
    augment: bool = True
    max_drop: float = 0.1
    accum_steps: int = 1
    epoch_size: int | None = None
    checkpoint_dir: str | None = None


LOG_FIELDS = ("step", "loss", "ce", "cic", "lr", "grad_norm")


def train_loop(cfg: ModelConfig, dataset: Sequence | Callable, settings: TrainSettings | None = None,
               seed=0, model: GRCNet | None = None, on_step=None):
    """Train on ``dataset`` (a sequence of labelled clouds, or ``f(i) -> cloud``).

    Returns ``(model, state, log_rows)``.  Scene order, augmentation and
    reparameterization noise all derive from ``seed``.  Checkpoints are
    written at epoch ends when ``settings.checkpoint_dir`` is set; a
    non-finite loss raises :class:`DivergenceError` carrying the last good one.
    """
    settings = settings or TrainSettings()
    if settings.steps < 1 or settings.accum_steps < 1:
        raise ConfigurationError("steps and accum_steps must be positive")
    if callable(dataset):
        get, size = dataset, settings.epoch_size
        if size is None:
            raise ConfigurationError("a generator dataset needs settings.epoch_size")
    else:
        get, size = dataset.__getitem__, len(dataset)
        if size == 0:
            raise EmptyInputError("empty training set")
    model = model or GRCNet(cfg, seed)
    params = model.parameters()
    state = TrainState.create(params, seed, total_steps=settings.steps, max_lr=settings.max_lr)
    rng = state.rng
    rows, order, last_ckpt = [], [], None
    for step in range(settings.steps):
        lr = onecycle_lr(step, settings.steps, settings.max_lr, settings.pct_up,
                         settings.div, settings.final_div)
        loss_sum = ce_sum = cic_sum = 0.0
        for _ in range(settings.accum_steps):
            if not order:
                order = list(rng.permutation(size))
            cloud = get(int(order.pop()))
            if settings.augment:
                cloud = augment(cloud, rng, settings.max_drop)
            res = model.forward(cloud, train=True, rng=rng)
            loss, ce = total_loss(res.logits, cloud.labels, res.cic, cfg.beta, cfg.ignore_label)
            if settings.accum_steps > 1:
                loss = loss / settings.accum_steps
            if not np.isfinite(loss.data).all():
                raise DivergenceError(f"non-finite loss at step {step}", checkpoint=last_ckpt)
            ad.backward(loss)
            loss_sum += float(loss.data)
            ce_sum += float(ce.data) / settings.accum_steps
            cic_sum += (float(res.cic.data) if res.cic is not None else 0.0) / settings.accum_steps
        gnorm = grad_norm(params)
        try:
            sgd_momentum_step(state, lr, settings.momentum, settings.weight_decay)
        except DivergenceError as exc:
            raise DivergenceError(str(exc), checkpoint=last_ckpt) from None
        row = {"step": step, "loss": loss_sum, "ce": ce_sum, "cic": cic_sum, "lr": lr, "grad_norm": gnorm}
        rows.append(row)
        if on_step is not None:
            on_step(row)
        epoch_end = not order or step == settings.steps - 1
        if settings.checkpoint_dir and epoch_end:
            last_ckpt = os.path.join(settings.checkpoint_dir, "model.grcw")
            save_checkpoint(last_ckpt, model, state, {"settings": asdict(settings), "seed": seed})
    return model, state, rows


def write_metrics_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.10g}" if isinstance(r[k], float) else r[k]) for k in LOG_FIELDS})


# -------------------------------------------------------------- evaluation

def evaluate(model: GRCNet, clouds: Sequence[PointCloud]):
    """Confusion matrix, per-class IoU, mIoU and point accuracy over ``clouds``."""
    C = model.cfg.n_classes
    conf = np.zeros((C, C), dtype=np.int64)
    for cloud in clouds:
        conf += confusion_matrix(model.predict(cloud), cloud.labels, C, model.cfg.ignore_label)
    iou, m = iou_from_confusion(conf)
    acc = float(np.trace(conf) / conf.sum())
    return {"confusion": conf, "iou": iou, "miou": m, "accuracy": acc}
