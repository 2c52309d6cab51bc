"""1-Lipschitz layers and their composition.

Every layer follows the same small protocol:

* ``forward(x, train)`` on a batch ``(N, *in_shape)``; caches what backward needs
* ``backward(g)`` returns the input gradient and accumulates into ``grads``
* ``jvp(dx)`` pushes a tangent through the linearization at the cached point
* ``params`` / ``grads`` are ordered dicts of arrays
* ``lipschitz_certificate()`` is an upper bound on the layer's Lipschitz constant
"""

from __future__ import annotations

import logging
import math

import numpy as np

from .errors import DegenerateLayerError, NumericalFailureError, ShapeError
from .spectral import DEFAULT_INFERENCE_ITERS, SpectralState, power_converge, power_step
from .tensor import Conv2dOperator, DenseOperator, LinearOperator, check_finite

log = logging.getLogger(__name__)

ACTIVATIONS = {
    # value, derivative; derivative of relu at 0 is 0 by convention
    "relu": (lambda a: np.maximum(a, 0), lambda a: (a > 0).astype(a.dtype)),
    "tanh": (np.tanh, lambda a: 1 - np.tanh(a) ** 2),
}


class Layer:
    kind = "layer"
    in_shape: tuple
    out_shape: tuple

    def __init__(self):
        self.grads = {}
        self._cache = None

    @property
    def params(self) -> dict:
        return {}

    def set_param(self, name, value):
        raise KeyError(name)

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def _accumulate(self, name, g):
        if name in self.grads:
            self.grads[name] = self.grads[name] + g
        else:
            self.grads[name] = g

    def lipschitz_certificate(self) -> float:
        return 1.0

    def spec(self) -> dict:
        raise NotImplementedError

    def metadata(self) -> dict:
        return {}

    def _check_input(self, x):
        if x.shape[1:] != tuple(self.in_shape):
            raise ShapeError(f"{self.kind}: input shape {x.shape[1:]} does not match {tuple(self.in_shape)}")


class CPLayer(Layer):
    """Convex potential layer ``z = x - h W^T act(W x + b)`` with ``h = 2 / sigma^2``."""

    kind = "cpl"

    def __init__(self, op: LinearOperator, bias: np.ndarray | None = None, activation: str = "relu",
                 step_override: float | None = None, seed: int = 0):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}; choose from {sorted(ACTIVATIONS)}")
        self.op = op
        nbias = op.out_shape[0]
        self.bias = np.zeros(nbias, dtype=op.weight.dtype) if bias is None else np.asarray(bias)
        self.activation = activation
        self.step_override = step_override
        self.spectral = SpectralState.fresh(op.in_shape, seed, op.weight.dtype)
        self.frozen_sigma = None
        self.inference_iters = DEFAULT_INFERENCE_ITERS
        self.in_shape = tuple(op.in_shape)
        self.out_shape = tuple(op.in_shape)

    @property
    def params(self):
        return {"weight": self.op.weight, "bias": self.bias}

    def set_param(self, name, value):
        if name == "weight":
            self.op.weight = value
        elif name == "bias":
            self.bias = value
        else:
            raise KeyError(name)

    def _bias_view(self):
        # conv biases broadcast over spatial positions
        return self.bias.reshape((-1,) + (1,) * (len(self.op.out_shape) - 1))

    def freeze(self, iters: int | None = None, seed: int | None = None):
        iters = iters or self.inference_iters
        sigma, _ = power_converge(self.op, iters, self.spectral.seed if seed is None else seed)
        self.frozen_sigma = sigma
        return sigma

    def unfreeze(self):
        self.frozen_sigma = None

    def step_size(self, train: bool) -> float:
        if self.step_override is not None:
            return float(self.step_override)
        sigma = self.spectral.sigma if train else self.frozen_sigma
        if sigma is None:
            sigma = self.freeze()
        if sigma <= 0.0:
            if train:
                return 0.0
            raise DegenerateLayerError("CPL has zero spectral norm estimate; cannot form 2/sigma^2 at inference")
        return 2.0 / sigma ** 2

    def forward(self, x, train=False):
        self._check_input(x)
        if train:
            power_step(self.op, self.spectral)
            if log.isEnabledFor(logging.DEBUG) and self.spectral.sigma > 0:
                rayleigh = float(np.linalg.norm(self.op.apply(self.spectral.u)))
                log.debug("cpl step estimate %.6g vs |Wu| %.6g", self.spectral.sigma, rayleigh)
        h = self.step_size(train)
        act, dact = ACTIVATIONS[self.activation]
        pre = self.op.apply(x) + self._bias_view()
        s = act(pre)
        z = x - h * self.op.apply_adjoint(s)
        self._cache = (x, pre, s, dact(pre), h)
        return z

    def backward(self, g):
        x, pre, s, d, h = self._cache
        wg = self.op.apply(g)
        delta = -h * wg * d
        gx = g + self.op.apply_adjoint(delta)
        gw = -h * self.op.param_grad(g, s) + self.op.param_grad(x, delta)
        gb = delta.sum(axis=tuple(i for i in range(delta.ndim) if i != 1))
        self._accumulate("weight", gw)
        self._accumulate("bias", gb)
        return gx

    def jvp(self, dx):
        _, _, _, d, h = self._cache
        return dx - h * self.op.apply_adjoint(d * self.op.apply(dx))

    def lipschitz_certificate(self):
        if self.step_override is not None:
            return math.inf
        return 1.0

    def spec(self):
        d = {"type": "cpl_dense" if self.op.kind == "dense" else "cpl_conv", "activation": self.activation}
        if self.op.kind == "dense":
            d["features"] = self.op.out_shape[0]
        else:
            d.update(channels=self.op.kernel.shape[0], kernel=self.op.kernel.shape[2], stride=self.op.stride)
        return d

    def metadata(self):
        return {
            "u": self.spectral.u.ravel().tolist(),
            "sigma": self.spectral.sigma,
            "iteration_count": self.spectral.iteration_count,
            "seed": self.spectral.seed,
            "step_override": self.step_override,
        }


class SkewLayer(Layer):
    """Orthogonal map generated by the skew part ``A = (W - W^T) / 2`` of a free operator.

    ``scheme="cayley"`` realizes ``(I - A/2)^{-1} (I + A/2)`` (dense only);
    ``scheme="exponential"`` realizes the truncated series of ``exp(A/2)`` by
    repeated operator application, so convolutions are never materialized.
    """

    kind = "skew"

    def __init__(self, op: LinearOperator, scheme: str = "cayley", taylor_terms: int = 12):
        super().__init__()
        if tuple(op.in_shape) != tuple(op.out_shape):
            raise ShapeError(f"skew layer needs a square operator, got {op.in_shape} -> {op.out_shape}")
        if scheme not in ("cayley", "exponential"):
            raise ValueError(f"unknown skew scheme {scheme!r}")
        if scheme == "cayley" and op.kind != "dense":
            raise ValueError("the cayley scheme is implemented for dense operators only")
        if scheme == "exponential" and taylor_terms < 1:
            raise ValueError("taylor_terms must be >= 1")
        self.op = op
        self.scheme = scheme
        self.taylor_terms = int(taylor_terms)
        self.in_shape = self.out_shape = tuple(op.in_shape)

    @property
    def params(self):
        return {"weight": self.op.weight}

    def set_param(self, name, value):
        if name != "weight":
            raise KeyError(name)
        self.op.weight = value

    def skew_matrix(self) -> np.ndarray:
        m = self.op.materialize()
        return (m - m.T) / 2

    def half_skew(self, x):
        """Apply A/2 without materializing."""
        return (self.op.apply(x) - self.op.apply_adjoint(x)) / 4

    def _coeffs(self):
        return [1.0 / math.factorial(k) for k in range(self.taylor_terms + 1)]

    def _cayley_factors(self):
        a = self.skew_matrix().astype(np.float64)
        eye = np.eye(a.shape[0])
        return eye - a / 2, eye + a / 2

    def _cayley(self, x):
        p, q = self._cayley_factors()
        flat = x.reshape(x.shape[0], -1).astype(np.float64)
        rhs = flat @ q.T
        y = np.linalg.solve(p, rhs.T).T
        resid = np.max(np.abs(y @ p.T - rhs)) if y.size else 0.0
        if resid > 1e-8 * max(1.0, np.max(np.abs(rhs), initial=0.0)):
            raise NumericalFailureError(f"cayley solve residual {resid:.3e} exceeds 1e-8")
        return y.reshape(x.shape).astype(x.dtype, copy=False)

    def _series(self, x, sign=1.0):
        out = x.copy()
        term = x
        for k in range(1, self.taylor_terms + 1):
            term = sign * self.half_skew(term) / k
            out = out + term
        return out

    def forward(self, x, train=False):
        self._check_input(x)
        y = self._cayley(x) if self.scheme == "cayley" else self._series(x)
        self._cache = (x, y)
        return y

    def backward(self, g):
        x, y = self._cache
        if self.scheme == "cayley":
            p, _ = self._cayley_factors()
            gf = g.reshape(g.shape[0], -1).astype(np.float64)
            w = np.linalg.solve(p.T, gf.T).T
            gx = (w @ p.T).reshape(g.shape).astype(g.dtype, copy=False)
            v = (x + y).reshape(x.shape[0], -1).astype(np.float64)
            gm = 0.25 * (self.op.param_grad(v, w) - self.op.param_grad(w, v))
            self._accumulate("weight", gm.astype(self.op.weight.dtype))
            return gx
        n = self.taylor_terms
        c = self._coeffs()
        # a_m = B^m x, b_j = (B^T)^j g with B = A/2 skew, so B^T = -B
        a = [x]
        for _ in range(n - 1):
            a.append(self.half_skew(a[-1]))
        b = [g]
        for _ in range(n - 1):
            b.append(-self.half_skew(b[-1]))
        gw = np.zeros_like(self.op.weight)
        for j in range(n):
            r = sum(c[j + m + 1] * a[m] for m in range(n - j))
            gw = gw + 0.25 * (self.op.param_grad(r, b[j]) - self.op.param_grad(b[j], r))
        self._accumulate("weight", gw)
        return self._series(g, sign=-1.0)

    def jvp(self, dx):
        return self._cayley(dx) if self.scheme == "cayley" else self._series(dx)

    def spec(self):
        d = {"type": "skew_dense" if self.op.kind == "dense" else "skew_conv", "scheme": self.scheme,
             "taylor_terms": self.taylor_terms}
        if self.op.kind == "conv2d":
            d["kernel"] = self.op.kernel.shape[2]
        return d


class DimOp(Layer):
    """Dimension change: channel zero-padding, truncation, or windowed l2 pooling."""

    kind = "dim"

    def __init__(self, kind: str, source_shape, target=None, window: int = 2):
        super().__init__()
        self.op_kind = kind
        self.in_shape = tuple(int(s) for s in source_shape)
        self.window = int(window)
        if kind == "zero_pad_channels":
            if target < self.in_shape[0]:
                raise ShapeError(f"zero_pad target {target} smaller than source channels {self.in_shape[0]}")
            self.target = int(target)
            self.out_shape = (self.target,) + self.in_shape[1:]
        elif kind == "truncate":
            total = int(np.prod(self.in_shape))
            if target > total:
                raise ShapeError(f"truncate target {target} larger than source size {total}")
            self.target = int(target)
            self.out_shape = (self.target,)
        elif kind == "l2_pool":
            if len(self.in_shape) != 3:
                raise ShapeError(f"l2_pool needs (C, H, W) input, got {self.in_shape}")
            c, h, w = self.in_shape
            if h % self.window or w % self.window:
                raise ShapeError(f"l2_pool window {self.window} does not divide spatial size {(h, w)}")
            self.target = None
            self.out_shape = (c, h // self.window, w // self.window)
        else:
            raise ValueError(f"unknown dimension op {kind!r}")

    def _blocks(self, x):
        n, c, h, w = x.shape
        k = self.window
        return x.reshape(n, c, h // k, k, w // k, k)

    def forward(self, x, train=False):
        self._check_input(x)
        n = x.shape[0]
        if self.op_kind == "zero_pad_channels":
            pad = [(0, 0), (0, self.target - self.in_shape[0])] + [(0, 0)] * (x.ndim - 2)
            y = np.pad(x, pad)
        elif self.op_kind == "truncate":
            y = x.reshape(n, -1)[:, : self.target]
        else:
            norms = np.sqrt(np.sum(self._blocks(x) ** 2, axis=(3, 5)))
            self._cache = (x, norms)
            return norms
        self._cache = (x,)
        return y

    def _linear_back(self, g):
        n = g.shape[0]
        if self.op_kind == "zero_pad_channels":
            return g[:, : self.in_shape[0]]
        full = np.zeros((n, int(np.prod(self.in_shape))), dtype=g.dtype)
        full[:, : self.target] = g
        return full.reshape((n,) + self.in_shape)

    def backward(self, g):
        if self.op_kind != "l2_pool":
            return self._linear_back(g)
        x, norms = self._cache
        safe = np.where(norms > 0, norms, 1)
        scale = np.where(norms > 0, g / safe, 0)
        gx = self._blocks(x) * scale[:, :, :, None, :, None]
        return gx.reshape(x.shape)

    def jvp(self, dx):
        if self.op_kind != "l2_pool":
            x = self._cache[0]
            out = self.forward(dx)
            self._cache = (x,)
            return out
        x, norms = self._cache
        safe = np.where(norms > 0, norms, 1)
        dot = np.sum(self._blocks(x) * self._blocks(dx), axis=(3, 5))
        return np.where(norms > 0, dot / safe, 0)

    def spec(self):
        if self.op_kind == "zero_pad_channels":
            return {"type": "zero_pad", "size": self.target}
        if self.op_kind == "truncate":
            return {"type": "truncate", "size": self.target}
        return {"type": "l2_pool", "window": self.window}


class LinearLayer(Layer):
    """Final affine layer; with ``normalize`` its rows are scaled to unit norm (LLN)."""

    kind = "linear"

    def __init__(self, op: DenseOperator, bias=None, normalize: bool = False):
        super().__init__()
        self.op = op
        self.bias = np.zeros(op.out_shape[0], dtype=op.weight.dtype) if bias is None else np.asarray(bias)
        self.normalize = normalize
        self.in_shape = tuple(op.in_shape)
        self.out_shape = tuple(op.out_shape)
        self.frozen_bound = None

    @property
    def params(self):
        return {"weight": self.op.weight, "bias": self.bias}

    def set_param(self, name, value):
        if name == "weight":
            self.op.weight = value
        elif name == "bias":
            self.bias = value
        else:
            raise KeyError(name)
        self.frozen_bound = None

    def effective_matrix(self):
        w = self.op.weight
        if not self.normalize:
            return w
        return w / np.linalg.norm(w, axis=1, keepdims=True)

    def forward(self, x, train=False):
        self._check_input(x)
        self._cache = (x,)
        return x @ self.effective_matrix().T + self.bias

    def backward(self, g):
        (x,) = self._cache
        weff = self.effective_matrix()
        gweff = g.T @ x
        if self.normalize:
            norms = np.linalg.norm(self.op.weight, axis=1, keepdims=True)
            radial = np.sum(gweff * weff, axis=1, keepdims=True)
            gw = (gweff - radial * weff) / norms
        else:
            gw = gweff
        self._accumulate("weight", gw)
        self._accumulate("bias", g.sum(axis=0))
        return g @ weff

    def jvp(self, dx):
        return dx @ self.effective_matrix().T

    def freeze(self, iters=None, seed=0):
        sigma, _ = power_converge(DenseOperator(self.effective_matrix()), iters or DEFAULT_INFERENCE_ITERS, seed)
        self.frozen_bound = sigma
        return sigma

    def unfreeze(self):
        self.frozen_bound = None

    def lipschitz_certificate(self):
        if self.frozen_bound is None:
            self.freeze()
        return float(self.frozen_bound)

    def spec(self):
        return {"type": "linear", "out": self.out_shape[0]}


class Network:
    """Sequential composition of layers mapping ``input_shape`` to ``num_classes`` logits."""

    def __init__(self, layers, input_shape, num_classes: int, last_layer_normalization: bool = False,
                 arch: dict | None = None, seed: int = 0):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.num_classes = int(num_classes)
        self.last_layer_normalization = last_layer_normalization
        self.arch = arch
        self.seed = seed
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            if tuple(layer.in_shape) != shape:
                raise ShapeError(f"layer {i} ({layer.kind}) expects {tuple(layer.in_shape)}, receives {shape}")
            shape = tuple(layer.out_shape)
        if shape != (self.num_classes,):
            raise ShapeError(f"network output shape {shape} does not match {self.num_classes} classes")
        if last_layer_normalization:
            if not self.layers or not isinstance(self.layers[-1], LinearLayer):
                raise ShapeError("last-layer normalization needs a final linear layer")
            self.layers[-1].normalize = True

    @property
    def cpl_layers(self):
        return [layer for layer in self.layers if isinstance(layer, CPLayer)]

    @property
    def relaxed(self) -> bool:
        return any(layer.step_override is not None for layer in self.cpl_layers)

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for name, value in layer.params.items():
                yield (i, name), value

    def param_count(self) -> int:
        return sum(v.size for _, v in self.named_params())

    def set_param(self, key, value):
        self.layers[key[0]].set_param(key[1], value)

    def grads(self):
        return {(i, name): layer.grads.get(name, np.zeros_like(v))
                for i, layer in enumerate(self.layers) for name, v in layer.params.items()}

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def freeze(self, iters: int | None = None):
        for layer in self.layers:
            if isinstance(layer, (CPLayer, LinearLayer)):
                layer.freeze(iters)

    def unfreeze(self):
        for layer in self.layers:
            if isinstance(layer, (CPLayer, LinearLayer)):
                layer.unfreeze()

    def forward(self, x, mode: str = "infer"):
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        x = np.asarray(x)
        single = x.shape == self.input_shape
        if single:
            x = x[None]
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"network input shape {x.shape[1:]} does not match {self.input_shape}")
        check_finite(x, "network input")
        train = mode == "train"
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x[0] if single else x

    __call__ = forward

    def backward(self, g, accumulate: bool = True):
        if not accumulate:
            saved = [dict(layer.grads) for layer in self.layers]
        for layer in reversed(self.layers):
            g = layer.backward(g)
        if not accumulate:
            for layer, s in zip(self.layers, saved):
                layer.grads = s
        return g

    def jvp(self, dx):
        for layer in self.layers:
            dx = layer.jvp(dx)
        return dx

    def lipschitz_bound(self) -> float:
        bound = 1.0
        for layer in self.layers:
            bound *= layer.lipschitz_certificate()
        return bound

    def astype(self, dtype) -> "Network":
        """Deep copy with parameters and spectral vectors cast to ``dtype``."""
        import copy

        clone = copy.deepcopy(self)
        for key, value in clone.named_params():
            clone.set_param(key, value.astype(dtype))
        for layer in clone.cpl_layers:
            layer.spectral.u = layer.spectral.u.astype(dtype)
        for layer in clone.layers:
            layer._cache = None
            layer.grads = {}
        return clone


def cpl_forward(layer: CPLayer, x, train: bool = False):
    x = np.asarray(x)
    single = x.shape == layer.in_shape
    z = layer.forward(x[None] if single else x, train=train)
    return z[0] if single else z


def cpl_backward(layer: CPLayer, x, upstream_grad, train: bool = False):
    """Input gradient and parameter gradients of ``<upstream, layer(x)>``."""
    x = np.asarray(x)
    single = x.shape == layer.in_shape
    xb = x[None] if single else x
    gb = np.asarray(upstream_grad)[None] if single else np.asarray(upstream_grad)
    layer.grads = {}
    state = layer.spectral.copy()
    layer.forward(xb, train=train)
    gx = layer.backward(gb)
    if train:
        layer.spectral = state
    grads = dict(layer.grads)
    return (gx[0] if single else gx), grads


def cayley_apply(layer: SkewLayer, x):
    if layer.scheme != "cayley":
        raise ValueError("layer scheme is not cayley")
    return _apply_single(layer, x)


def soc_apply(layer: SkewLayer, x):
    if layer.scheme != "exponential":
        raise ValueError("layer scheme is not exponential")
    return _apply_single(layer, x)


def dim_apply(op: DimOp, x):
    return _apply_single(op, x)


def _apply_single(layer, x):
    x = np.asarray(x)
    single = x.shape == tuple(layer.in_shape)
    y = layer.forward(x[None] if single else x)
    return y[0] if single else y


def network_forward(net: Network, x, mode: str = "infer"):
    return net.forward(x, mode=mode)


# -- construction -----------------------------------------------------------

def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _make_layer(spec: dict, shape: tuple, rng, dtype, seed: int, lln: bool, activation: str):
    t = spec["type"]
    if t == "cpl_dense":
        if len(shape) != 1:
            raise ShapeError(f"cpl_dense needs a flat input, got {shape}; insert a truncate layer first")
        k = int(spec["features"])
        op = DenseOperator(_uniform(rng, (k, shape[0]), shape[0], dtype))
        return CPLayer(op, activation=spec.get("activation", activation), seed=seed)
    if t == "cpl_conv":
        if len(shape) != 3:
            raise ShapeError(f"cpl_conv needs (C, H, W) input, got {shape}")
        c = int(spec.get("channels", shape[0]))
        k = int(spec.get("kernel", 3))
        kern = _uniform(rng, (c, shape[0], k, k), shape[0] * k * k, dtype)
        op = Conv2dOperator(kern, shape[1:], stride=int(spec.get("stride", 1)))
        return CPLayer(op, activation=spec.get("activation", activation), seed=seed)
    if t == "skew_dense":
        if len(shape) != 1:
            raise ShapeError(f"skew_dense needs a flat input, got {shape}")
        op = DenseOperator(_uniform(rng, (shape[0], shape[0]), shape[0], dtype))
        return SkewLayer(op, spec.get("scheme", "cayley"), int(spec.get("taylor_terms", 12)))
    if t == "skew_conv":
        if len(shape) != 3:
            raise ShapeError(f"skew_conv needs (C, H, W) input, got {shape}")
        k = int(spec.get("kernel", 3))
        kern = _uniform(rng, (shape[0], shape[0], k, k), shape[0] * k * k, dtype)
        return SkewLayer(Conv2dOperator(kern, shape[1:]), "exponential", int(spec.get("taylor_terms", 12)))
    if t == "zero_pad":
        return DimOp("zero_pad_channels", shape, int(spec["size"]))
    if t == "truncate":
        return DimOp("truncate", shape, int(spec.get("size", int(np.prod(shape)))))
    if t == "l2_pool":
        return DimOp("l2_pool", shape, window=int(spec.get("window", 2)))
    if t == "linear":
        if len(shape) != 1:
            raise ShapeError(f"linear needs a flat input, got {shape}")
        out = int(spec["out"])
        return LinearLayer(DenseOperator(_uniform(rng, (out, shape[0]), shape[0], dtype)), normalize=lln)
    raise ValueError(f"unknown layer type {t!r}")


def expand_template(arch: dict) -> list:
    """Expand Table-style knobs (conv count, channels, linear count, width) into a layer list."""
    input_shape = tuple(arch["input_shape"])
    k = int(arch["num_classes"])
    layers = []
    if len(input_shape) == 3:
        channels = int(arch.get("channels", input_shape[0]))
        if channels > input_shape[0]:
            layers.append({"type": "zero_pad", "size": channels})
        if arch.get("conv_layers", 0):
            layers.append({"type": "cpl_conv", "channels": channels, "kernel": int(arch.get("kernel", 3)),
                           "repeat": int(arch["conv_layers"])})
        for _ in range(int(arch.get("pools", 1))):
            layers.append({"type": "l2_pool", "window": 2})
        layers.append({"type": "truncate"})
    elif int(arch.get("width", input_shape[0])) > input_shape[0]:
        layers.append({"type": "zero_pad", "size": int(arch["width"])})
    if arch.get("linear_layers", 0):
        layers.append({"type": "cpl_dense", "features": int(arch["linear_features"]),
                       "repeat": int(arch["linear_layers"])})
    if arch.get("last_layer_normalization"):
        layers.append({"type": "linear", "out": k})
    else:
        layers.append({"type": "truncate", "size": k})
    return layers


def build_network(arch: dict, seed: int = 0, dtype=np.float32) -> Network:
    """Build a network from a declarative architecture.

    ``arch`` holds ``input_shape``, ``num_classes`` and either an explicit
    ``layers`` list (each entry a dict with ``type`` and an optional
    ``repeat``) or the template knobs understood by :func:`expand_template`.
    """
    input_shape = tuple(int(s) for s in arch["input_shape"])
    lln = bool(arch.get("last_layer_normalization", False))
    specs = arch.get("layers") or expand_template(arch)
    activation = arch.get("activation", "relu")
    rng = np.random.default_rng(seed)
    layers = []
    shape = input_shape
    for spec in specs:
        for _ in range(int(spec.get("repeat", 1))):
            layer = _make_layer(spec, shape, rng, dtype, seed=seed * 100_003 + len(layers), lln=lln,
                                activation=activation)
            layers.append(layer)
            shape = tuple(layer.out_shape)
    return Network(layers, input_shape, int(arch["num_classes"]), lln, arch=dict(arch), seed=seed)
