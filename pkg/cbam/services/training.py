# cbam/services/training.py
"""
SGD with classical momentum, weight decay and a step learning-rate schedule.

    lr(epoch) = lr0 · drop_factor ^ ⌊epoch / drop_every⌋
    g ← ∇L + weight_decay · w ;  v ← momentum · v + g ;  w ← w − lr · v

Runs are single-threaded and seeded: the same seed gives bit-identical parameters.
"""
import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from django.conf import settings

from cbam.exceptions import ConfigError, DivergenceDetected, ShapeMismatch
from cbam.services.data import Dataset
from cbam.services.tensor import GradTape, Tensor, backward, cross_entropy, no_grad
from cbam.services.zoo import TinyNetSpec, net_forward


def effective_seed(seed: int) -> int:
    """The CBAM_SEED environment override when set, else seed."""
    raw = settings.CBAM_SEED
    if raw in (None, ""):
        return seed
    try:
        value = int(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"CBAM_SEED must be an integer, got {raw!r}") from None
    if value < 0:
        raise ConfigError(f"CBAM_SEED must be non-negative, got {value}")
    return value


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr0: float = 0.1
    lr_drop_every: int = 10
    lr_drop_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0005
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "lr_drop_every"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if not 0.0 < self.lr_drop_factor < 1.0:
            raise ConfigError(f"lr_drop_factor must lie in (0, 1), got {self.lr_drop_factor}")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("momentum and weight_decay must be non-negative")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")

    @classmethod
    def from_dict(cls, data: Optional[dict] = None) -> "TrainConfig":
        merged = dict(settings.CBAM_TRAIN_DEFAULTS)
        data = data or {}
        unknown = set(data) - set(merged)
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        merged.update(data)
        merged["seed"] = effective_seed(merged["seed"])
        return cls(**merged)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr0 * cfg.lr_drop_factor ** (epoch // cfg.lr_drop_every)


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float,
             momentum: float = 0.0, weight_decay: float = 0.0) -> tuple:
    """One functional update; returns (new params, new velocity)."""
    new_params, new_velocity = {}, {}
    for name, w in params.items():
        g = grads[name].data + weight_decay * w.data
        v = velocity[name].data * momentum + g if name in velocity else g
        new_velocity[name] = Tensor._wrap(v)
        new_params[name] = Tensor._wrap(w.data - lr * v)
    return new_params, new_velocity


# --- Metrics ----------------------------------------------------------------
def _check_batch(logits, labels) -> np.ndarray:
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] != len(labels):
        raise ShapeMismatch(f"{len(labels)} labels for logits of shape {z.shape}")
    if z.shape[0] == 0:
        raise ShapeMismatch("error rates need at least one sample")
    return z


def top1_error(logits, labels) -> float:
    """Percent of rows whose argmax (lowest index on ties) differs from the label."""
    z = _check_batch(logits, labels)
    hits = int((z.argmax(axis=1) == np.asarray(labels)).sum())
    return 100.0 * (1.0 - hits / len(labels))


def topk_error(logits, labels, k: int = 5) -> float:
    """Percent of rows whose label is not among the k highest logits (ties favour low indices)."""
    z = _check_batch(logits, labels)
    if k >= z.shape[1]:
        return 0.0
    order = np.argsort(-z, axis=1, kind="stable")[:, :k]
    hits = int((order == np.asarray(labels)[:, None]).any(axis=1).sum())
    return 100.0 * (1.0 - hits / len(labels))


@dataclass(frozen=True)
class Evaluation:
    loss: float
    top1: float
    top5: float


def predict(spec: TinyNetSpec, params: dict, data: Dataset, batch_size: int = 128) -> np.ndarray:
    chunks = []
    with no_grad():
        for start in range(0, len(data), batch_size):
            images, _ = data.batch(range(start, min(start + batch_size, len(data))))
            chunks.append(net_forward(images, spec, params).data)
    return np.concatenate(chunks, axis=0)


def evaluate(spec: TinyNetSpec, params: dict, data: Dataset, batch_size: int = 128) -> Evaluation:
    logits = predict(spec, params, data, batch_size)
    loss = cross_entropy(Tensor._wrap(logits), data.labels).item()
    return Evaluation(loss=loss, top1=top1_error(logits, data.labels), top5=topk_error(logits, data.labels, 5))


# --- Training loop ----------------------------------------------------------
@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    val_top1_err: Optional[float] = None
    val_top5_err: Optional[float] = None


@dataclass
class TrainResult:
    params: dict
    initial_loss: float
    history: list = field(default_factory=list)

    @property
    def final_train_loss(self) -> float:
        return self.history[-1].train_loss if self.history else self.initial_loss


def loss_and_grads(spec: TinyNetSpec, params: dict, images: Tensor, labels) -> tuple:
    with GradTape() as tape:
        watched = {name: tape.watch(t) for name, t in params.items()}
        loss = cross_entropy(net_forward(images, spec, watched), labels)
    grads = backward(tape, loss)
    return loss.item(), {name: grads[t.node_id] for name, t in watched.items()}


def train(spec: TinyNetSpec, params: dict, data: Dataset, cfg: TrainConfig,
          val: Optional[Dataset] = None,
          on_epoch: Optional[Callable[[EpochMetrics], None]] = None) -> TrainResult:
    """
    Minibatch SGD over data for cfg.epochs epochs. The shuffle order comes from cfg.seed.
    Raises DivergenceDetected as soon as a batch loss is not finite.
    """
    if data.image_shape[0] != spec.in_channels:
        raise ShapeMismatch(f"data has {data.image_shape[0]} channels, network expects {spec.in_channels}")
    if data.num_classes > spec.num_classes:
        raise ShapeMismatch(f"data has {data.num_classes} classes, network outputs {spec.num_classes}")

    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(params=params, initial_loss=evaluate(spec, params, data).loss)
    velocity = {}
    for epoch in range(cfg.epochs):
        lr = lr_at(cfg, epoch)
        order = rng.permutation(len(data))
        losses = []
        for start in range(0, len(data), cfg.batch_size):
            images, labels = data.batch(order[start:start + cfg.batch_size])
            loss, grads = loss_and_grads(spec, result.params, images, labels)
            if not np.isfinite(loss):
                raise DivergenceDetected(f"loss became {loss} at epoch {epoch}, batch starting {start}")
            losses.append(loss)
            result.params, velocity = sgd_step(
                result.params, grads, velocity, lr, cfg.momentum, cfg.weight_decay)
        metrics = EpochMetrics(epoch=epoch, lr=lr, train_loss=float(np.mean(losses)))
        if val is not None:
            scores = evaluate(spec, result.params, val)
            metrics = EpochMetrics(epoch, lr, metrics.train_loss, scores.top1, scores.top5)
        result.history.append(metrics)
        if on_epoch is not None:
            on_epoch(metrics)
    return result
