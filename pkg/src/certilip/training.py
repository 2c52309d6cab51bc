"""Margin-loss training with Adam and a triangular learning-rate schedule."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, LabelError, NonFiniteLossError
from .layers import CPLayer, Network

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 256
    epochs: int = 200
    lr: float = 1e-3
    margin: float = 0.7
    seed: int = 0
    schedule: str = "triangular"
    augment_crop: bool = False
    augment_flip: bool = False
    crop_padding: int = 2

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not self.lr >= 0:
            raise ConfigError("learning rate must be >= 0")
        if self.margin < 0:
            raise ConfigError("margin must be >= 0")
        if self.schedule not in ("triangular", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class OptimizerState:
    """Adam moments keyed like :meth:`Network.named_params`; no weight decay."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_network(cls, net: Network) -> "OptimizerState":
        state = cls()
        for key, value in net.named_params():
            state.m[key] = np.zeros_like(value)
            state.v[key] = np.zeros_like(value)
        return state


def adam_step(net: Network, state: OptimizerState, grads: dict, lr: float):
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for key, value in net.named_params():
        g = grads[key].astype(value.dtype, copy=False)
        m = state.m[key] = b1 * state.m[key] + (1 - b1) * g
        v = state.v[key] = b2 * state.v[key] + (1 - b2) * g * g
        update = (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(value.dtype, copy=False)
        net.set_param(key, value - update)


def lr_at(step: int, total: int, peak: float, schedule: str = "triangular") -> float:
    """Learning rate for update ``step`` (1-based) out of ``total``.

    Triangular: linear from 0 up to ``peak`` at half the steps, back to 0 at the end.
    """
    if schedule == "constant" or total <= 0:
        return peak
    return peak * max(0.0, 1.0 - abs(2.0 * step / total - 1.0))


def _labels_ok(labels, k):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    return labels


def runner_up(logits, labels):
    """Index of the best competing logit; ties go to the smallest index."""
    masked = np.array(logits, dtype=np.float64, copy=True)
    masked[np.arange(len(labels)), labels] = -np.inf
    return np.argmax(masked, axis=1)


def margins(logits, labels):
    """Signed gap f_y - max_{j != y} f_j per sample (not clamped)."""
    logits = np.atleast_2d(logits)
    labels = _labels_ok(np.atleast_1d(labels), logits.shape[1])
    rows = np.arange(len(labels))
    return logits[rows, labels] - logits[rows, runner_up(logits, labels)]


def margin_loss_and_grad(logits, labels, m: float):
    """Mean multi-class hinge ``max(0, m - margin)`` and its (sub)gradient in the logits."""
    logits = np.atleast_2d(logits)
    labels = _labels_ok(np.atleast_1d(labels), logits.shape[1])
    n = len(labels)
    rows = np.arange(n)
    comp = runner_up(logits, labels)
    per = m - (logits[rows, labels] - logits[rows, comp])
    active = per > 0
    grad = np.zeros_like(logits)
    grad[rows[active], labels[active]] -= 1.0 / n
    grad[rows[active], comp[active]] += 1.0 / n
    return float(np.mean(np.maximum(per, 0.0))), grad


def margin_loss(logits, label, m: float = 0.7) -> float:
    return margin_loss_and_grad(logits, label, m)[0]


def _augment(x, config: TrainConfig, rng):
    if x.ndim != 4:
        return x
    if config.augment_crop:
        p = config.crop_padding
        padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        h, w = x.shape[2:]
        out = np.empty_like(x)
        offs = rng.integers(0, 2 * p + 1, size=(len(x), 2))
        for i, (di, dj) in enumerate(offs):
            out[i] = padded[i, :, di:di + h, dj:dj + w]
        x = out
    if config.augment_flip:
        flip = rng.random(len(x)) < 0.5
        x = np.where(flip[:, None, None, None], x[..., ::-1], x)
    return x


def max_sigma(net: Network) -> float:
    return max((layer.spectral.sigma for layer in net.cpl_layers), default=0.0)


def train_epoch(net: Network, data, config: TrainConfig, optimizer_state: OptimizerState,
                epoch: int = 0, total_steps: int | None = None) -> dict:
    """One pass of shuffled mini-batches; returns mean loss, accuracy and diagnostics."""
    x, y = data
    n = len(x)
    y = _labels_ok(y, net.num_classes)
    steps_per_epoch = -(-n // config.batch_size)
    total = total_steps if total_steps is not None else steps_per_epoch * max(config.epochs, 1)
    rng = np.random.default_rng((config.seed, epoch))
    order = rng.permutation(n)
    loss_sum = 0.0
    correct = 0
    grad_norms = []
    lr = 0.0
    for b in range(steps_per_epoch):
        idx = order[b * config.batch_size:(b + 1) * config.batch_size]
        xb = _augment(x[idx], config, rng)
        yb = y[idx]
        logits = net.forward(xb, mode="train")
        loss, glogits = margin_loss_and_grad(logits, yb, config.margin)
        if not np.isfinite(loss):
            raise NonFiniteLossError(
                f"non-finite loss at epoch {epoch} batch {b}",
                {"sigmas": [layer.spectral.sigma for layer in net.cpl_layers],
                 "grad_norms": grad_norms[-5:]})
        net.zero_grad()
        net.backward(glogits.astype(logits.dtype))
        grads = net.grads()
        gnorm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
        grad_norms.append(gnorm)
        lr = lr_at(optimizer_state.step + 1, total, config.lr, config.schedule)
        adam_step(net, optimizer_state, grads, lr)
        net.unfreeze()
        loss_sum += loss * len(idx)
        correct += int(np.sum(np.argmax(logits, axis=1) == yb))
    return {
        "epoch": epoch + 1,
        "loss": loss_sum / n,
        "accuracy": correct / n,
        "lr": lr,
        "max_sigma": max_sigma(net),
        "grad_norm_max": max(grad_norms, default=0.0),
        "grad_norms": grad_norms,
    }


def train(net: Network, train_set, config: TrainConfig, optimizer_state: OptimizerState | None = None,
          on_epoch=None):
    """Run ``config.epochs`` epochs. ``on_epoch(metrics)`` is called after each one.

    Returns (history, optimizer_state). Metric rows carry ``wall_time`` separately
    from the reproducible columns.
    """
    state = optimizer_state or OptimizerState.for_network(net)
    steps_per_epoch = -(-len(train_set[0]) // config.batch_size)
    total = steps_per_epoch * config.epochs
    history = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        metrics = train_epoch(net, train_set, config, state, epoch, total)
        metrics["wall_time"] = time.perf_counter() - t0
        log.info("epoch %d loss %.4f acc %.4f max sigma %.4f", metrics["epoch"], metrics["loss"],
                 metrics["accuracy"], metrics["max_sigma"])
        history.append(metrics)
        if on_epoch is not None:
            on_epoch(metrics)
    return history, state


def relaxed_mode(net: Network, h_fixed) -> Network:
    """Fix every CPL step to ``h_fixed`` (scalar or one value per CPL layer).

    The result is no longer certifiably 1-Lipschitz.
    """
    layers = net.cpl_layers
    values = list(h_fixed) if np.ndim(h_fixed) else [h_fixed] * len(layers)
    if len(values) != len(layers):
        raise ValueError(f"got {len(values)} step values for {len(layers)} CPL layers")
    for layer, h in zip(layers, values):
        if not h > 0:
            raise ValueError("h_fixed must be positive")
        layer.step_override = float(h)
    return net


def is_cpl(layer) -> bool:
    return isinstance(layer, CPLayer)
