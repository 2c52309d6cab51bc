"""Margin certificates, PGD l2 attacks and empirical Lipschitz estimates."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, UnknownLipschitzError
from .layers import Network
from .training import margins, runner_up

log = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)


def _batched(net: Network, x):
    x = np.asarray(x)
    return x[None] if x.shape == net.input_shape else x


def predict(net: Network, x, batch_size: int = 1024):
    x = _batched(net, x)
    out = [net.forward(x[i:i + batch_size], mode="infer") for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, net.num_classes))


@dataclass
class CertificationReport:
    predicted: np.ndarray
    labels: np.ndarray
    margin: np.ndarray
    radius: np.ndarray
    lipschitz: float
    eps: list = field(default_factory=list)
    certified_accuracy: list = field(default_factory=list)
    layer_certificates: list = field(default_factory=list)

    @property
    def clean_accuracy(self) -> float:
        return float(np.mean(self.predicted == self.labels)) if len(self.labels) else 0.0

    def certified_at(self, eps: float) -> np.ndarray:
        """Boolean mask of samples certified at budget ``eps`` (strict inequality)."""
        correct = self.predicted == self.labels
        return correct & (self.margin > SQRT2 * self.lipschitz * eps)

    def summary(self) -> dict:
        return {
            "clean_accuracy": self.clean_accuracy,
            "lipschitz_bound": self.lipschitz,
            "certified": [{"eps": float(e), "accuracy": float(a)}
                          for e, a in zip(self.eps, self.certified_accuracy)],
        }

    def rows(self):
        for i in range(len(self.labels)):
            yield {"index": i, "predicted": int(self.predicted[i]), "label": int(self.labels[i]),
                   "margin": float(self.margin[i]), "radius": float(self.radius[i])}


def report_from_logits(logits, labels, eps_list, lipschitz: float = 1.0, layer_certificates=()):
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels)
    predicted = np.argmax(logits, axis=1)
    margin = np.maximum(margins(logits, labels), 0.0)
    margin[predicted != labels] = 0.0
    radius = margin / (SQRT2 * lipschitz)
    report = CertificationReport(predicted, labels, margin, radius, float(lipschitz),
                                 layer_certificates=list(layer_certificates))
    for eps in eps_list:
        if eps < 0:
            raise ConfigError("eps must be >= 0")
        report.eps.append(float(eps))
        report.certified_accuracy.append(float(np.mean(report.certified_at(eps))) if len(labels) else 0.0)
    return report


def certify(net: Network, x, y, eps_list, power_iters: int = 100) -> CertificationReport:
    """Certify each sample: correct and margin > sqrt(2) * L * eps."""
    if net.relaxed:
        raise UnknownLipschitzError("network uses fixed CPL steps; its Lipschitz constant is unknown")
    net.freeze(power_iters)
    certs = [float(layer.lipschitz_certificate()) for layer in net.layers]
    return report_from_logits(predict(net, x), y, eps_list, net.lipschitz_bound(), certs)


@dataclass
class AttackConfig:
    """PGD settings; ``eps`` may be a scalar or one budget per sample."""

    eps: float | np.ndarray
    iterations: int = 10
    step_size: float | None = None
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        if not np.all(np.asarray(self.eps) >= 0):
            raise ConfigError("attack eps must be >= 0")
        if self.iterations < 1:
            raise ConfigError("attack needs at least one iteration")

    @property
    def step(self):
        return self.step_size if self.step_size is not None else 2.0 * np.asarray(self.eps) / self.iterations


def _flat_norm(v):
    return np.sqrt(np.sum(np.square(v.reshape(len(v), -1), dtype=np.float64), axis=1))


def _expand(v, like):
    return v.reshape((-1,) + (1,) * (like.ndim - 1))


def _project(x_adv, x, eps):
    """Pull each row of ``x_adv`` back into the ball of radius ``eps`` (per row) around ``x``."""
    delta = x_adv - x
    norm = _flat_norm(delta)
    scale = np.where(norm > eps, eps / np.maximum(norm, 1e-300), 1.0)
    return x + delta * _expand(scale, delta).astype(delta.dtype)


def margin_input_grad(net: Network, x, y):
    """Logits and gradient of (best competitor - true logit) w.r.t. the input."""
    logits = net.forward(x, mode="infer")
    comp = runner_up(logits, y)
    g = np.zeros_like(logits)
    rows = np.arange(len(y))
    g[rows, comp] = 1.0
    g[rows, y] = -1.0
    return logits, net.backward(g, accumulate=False)


def pgd_attack(net: Network, x, y, config: AttackConfig, return_max_deviation: bool = False):
    """Normalized-gradient ascent on the negative margin inside the l2 ball.

    Returns ``(x_adv, success)``; with ``return_max_deviation`` also the largest
    distance from ``x`` seen over all iterates.
    """
    x = _batched(net, x)
    y = np.atleast_1d(np.asarray(y))
    eps = np.broadcast_to(np.asarray(config.eps, dtype=np.float64), (len(x),))
    step = np.broadcast_to(np.asarray(config.step, dtype=np.float64), (len(x),))
    x_adv = x.copy()
    if config.random_start and np.any(eps > 0):
        rng = np.random.default_rng(config.seed)
        d = rng.standard_normal(x.shape)
        d /= _expand(_flat_norm(d), d)
        r = rng.random(len(x)) ** (1.0 / d[0].size)
        x_adv = (x + d * _expand(r * eps, d)).astype(x.dtype)
    max_dev = float(np.max(_flat_norm(x_adv - x), initial=0.0))
    if np.any(eps > 0):
        for _ in range(config.iterations):
            _, grad = margin_input_grad(net, x_adv, y)
            gnorm = _flat_norm(grad)
            moving = gnorm > 0  # zero gradient: stationary point, skip
            direction = grad / _expand(np.where(moving, gnorm, 1.0), grad)
            x_adv = x_adv + (direction * _expand(step * moving, grad)).astype(x.dtype)
            x_adv = _project(x_adv, x, eps)
            max_dev = max(max_dev, float(np.max(_flat_norm(x_adv - x), initial=0.0)))
    success = np.argmax(net.forward(x_adv, mode="infer"), axis=1) != y
    if return_max_deviation:
        return x_adv, success, max_dev
    return x_adv, success


def attack_accuracy(net: Network, x, y, eps_list, iterations: int = 10, batch_size: int = 512,
                    random_start: bool = False, seed: int = 0):
    """Robust accuracy under PGD for each budget."""
    x = _batched(net, x)
    y = np.asarray(y)
    out = []
    for eps in eps_list:
        cfg = AttackConfig(float(eps), iterations, random_start=random_start, seed=seed)
        ok = 0
        for i in range(0, len(x), batch_size):
            _, success = pgd_attack(net, x[i:i + batch_size], y[i:i + batch_size], cfg)
            ok += int(np.sum(~success))
        out.append({"eps": float(eps), "accuracy": ok / len(x) if len(x) else 0.0})
    return out


def _pair_ratio(net, a, b):
    fa = net.forward(a, mode="infer")
    fb = net.forward(b, mode="infer")
    num = _flat_norm(np.asarray(fa, dtype=np.float64) - fb)
    den = _flat_norm(np.asarray(a, dtype=np.float64) - b)
    return num / np.maximum(den, 1e-300)


def _ratio_grads(net, a, b):
    fa = net.forward(a, mode="infer")
    fb = net.forward(b, mode="infer")
    df = np.asarray(fa, dtype=np.float64) - fb
    dx = np.asarray(a, dtype=np.float64) - b
    nf = _flat_norm(df)
    nx = np.maximum(_flat_norm(dx), 1e-300)
    u = df / _expand(np.maximum(nf, 1e-300), df)
    net.forward(a, mode="infer")
    ja = net.backward(u.astype(fa.dtype), accumulate=False)
    net.forward(b, mode="infer")
    jb = net.backward(u.astype(fb.dtype), accumulate=False)
    radial = dx * _expand(nf / nx ** 3, dx)
    ga = ja / _expand(nx, ja) - radial
    gb = -jb / _expand(nx, jb) + radial
    return ga, gb


def empirical_lipschitz(net: Network, sampler, pairs: int = 256, ascent_steps: int = 50,
                        refine: int = 16, seed: int = 0, scale: float = 1.0) -> float:
    """Lower bound on the l2 Lipschitz constant from sampled and ascent-refined pairs.

    ``sampler`` is an array of points to draw from or a callable ``(n, rng) -> points``.
    """
    if pairs < 1:
        raise ConfigError("pairs must be >= 1")
    rng = np.random.default_rng(seed)
    if callable(sampler):
        a = np.asarray(sampler(pairs, rng))
    else:
        pool = _batched(net, sampler)
        a = pool[rng.integers(0, len(pool), size=pairs)]
    a = a.astype(np.float64)
    near = rng.random(pairs) < 0.5
    step = np.where(near, 1e-3, 1.0) * scale
    b = a + rng.standard_normal(a.shape) * _expand(step, a)
    ratios = _pair_ratio(net, a, b)
    best = float(np.max(ratios))
    if ascent_steps <= 0 or refine <= 0:
        return best
    top = np.argsort(ratios)[::-1][:refine]
    a, b = a[top].copy(), b[top].copy()
    r = ratios[top]
    lr = 0.1 * _flat_norm(a - b)
    for _ in range(ascent_steps):
        ga, gb = _ratio_grads(net, a, b)
        g = np.concatenate([ga.reshape(len(a), -1), gb.reshape(len(b), -1)], axis=1)
        gn = np.linalg.norm(g, axis=1)
        gn[gn == 0] = np.inf
        na = a + ga * _expand(lr / gn, a)
        nb = b + gb * _expand(lr / gn, b)
        ok = _flat_norm(na - nb) > 0
        nr = np.where(ok, _pair_ratio(net, na, nb), -np.inf)
        better = nr > r
        a[better], b[better], r[better] = na[better], nb[better], nr[better]
        lr = np.where(better, lr * 1.5, lr * 0.5)
    return max(best, float(np.max(r)))


def jacobian_norm_estimate(net: Network, x, iters: int = 50, seed: int = 0) -> float:
    """Largest input-Jacobian spectral norm over samples, by per-sample power iteration."""
    x = _batched(net, x)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(x.shape).astype(x.dtype)
    v /= _expand(_flat_norm(v), v).astype(x.dtype)
    est = np.zeros(len(x))
    for _ in range(iters):
        net.forward(x, mode="infer")
        w = net.jvp(v)
        est = _flat_norm(w)
        net.forward(x, mode="infer")
        v = net.backward(w, accumulate=False)
        n = _flat_norm(v)
        n[n == 0] = 1.0
        v = v / _expand(n, v).astype(v.dtype)
    return float(np.max(est, initial=0.0))
