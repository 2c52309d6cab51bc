"""Linear operators with exact adjoints.

Tensors are plain row-major ``numpy.ndarray`` values. Every operator accepts
either a single sample shaped like ``in_shape`` or a batch shaped
``(N, *in_shape)`` and returns the matching single or batched output.
"""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteError, OracleScaleError, ShapeError

ORACLE_MAX_DIM = 4096


def check_finite(x: np.ndarray, where: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {where}")
    return x


def _batched(x: np.ndarray, shape: tuple, role: str, opname: str):
    x = np.asarray(x)
    if x.shape == tuple(shape):
        return x[None], True
    if x.shape[1:] == tuple(shape):
        return x, False
    raise ShapeError(
        f"{opname}: {role} shape {x.shape} does not match expected {tuple(shape)} "
        f"(or a batch of it)"
    )


class LinearOperator:
    """Base class. Subclasses implement the batched ``_forward`` / ``_adjoint``."""

    kind = "abstract"
    in_shape: tuple
    out_shape: tuple

    @property
    def in_dim(self) -> int:
        return int(np.prod(self.in_shape))

    @property
    def out_dim(self) -> int:
        return int(np.prod(self.out_shape))

    def apply(self, x: np.ndarray) -> np.ndarray:
        xb, single = _batched(x, self.in_shape, "input", self.kind)
        y = self._forward(xb)
        return y[0] if single else y

    def apply_adjoint(self, y: np.ndarray) -> np.ndarray:
        yb, single = _batched(y, self.out_shape, "output-space", self.kind + " adjoint")
        x = self._adjoint(yb)
        return x[0] if single else x

    def param_grad(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        """Gradient of ``sum_n <g_n, A x_n>`` with respect to the weight."""
        xb, _ = _batched(x, self.in_shape, "input", self.kind)
        gb, _ = _batched(g, self.out_shape, "output-space", self.kind)
        return self._param_grad(xb, gb)

    def materialize(self) -> np.ndarray:
        if self.in_dim > ORACLE_MAX_DIM:
            raise OracleScaleError(
                f"materialize refused: input dimension {self.in_dim} exceeds {ORACLE_MAX_DIM}"
            )
        basis = np.eye(self.in_dim, dtype=self.weight.dtype).reshape((self.in_dim,) + tuple(self.in_shape))
        cols = self._forward(basis).reshape(self.in_dim, self.out_dim)
        return np.ascontiguousarray(cols.T)

    @property
    def weight(self) -> np.ndarray:
        raise NotImplementedError

    @weight.setter
    def weight(self, value):
        raise NotImplementedError


class DenseOperator(LinearOperator):
    kind = "dense"

    def __init__(self, matrix: np.ndarray):
        matrix = np.asarray(matrix)
        if matrix.ndim != 2:
            raise ShapeError(f"dense operator needs a 2-D matrix, got shape {matrix.shape}")
        self.matrix = matrix

    @property
    def in_shape(self):
        return (self.matrix.shape[1],)

    @property
    def out_shape(self):
        return (self.matrix.shape[0],)

    @property
    def weight(self):
        return self.matrix

    @weight.setter
    def weight(self, value):
        self.matrix = value

    def _forward(self, x):
        return x @ self.matrix.T

    def _adjoint(self, y):
        return y @ self.matrix

    def _param_grad(self, x, g):
        return g.T @ x

    def materialize(self) -> np.ndarray:
        return self.matrix.copy()


class Conv2dOperator(LinearOperator):
    """2-D cross-correlation with zero padding, unit dilation, stride 1 or 2.

    ``kernel`` has shape ``(c_out, c_in, k_h, k_w)``; inputs are ``(c_in, H, W)``.
    """

    kind = "conv2d"

    def __init__(self, kernel: np.ndarray, in_hw: tuple, stride: int = 1, padding: int | None = None):
        kernel = np.asarray(kernel)
        if kernel.ndim != 4:
            raise ShapeError(f"conv2d kernel must be 4-D (c_out, c_in, k_h, k_w), got {kernel.shape}")
        if stride not in (1, 2):
            raise ShapeError(f"conv2d stride must be 1 or 2, got {stride}")
        kh, kw = kernel.shape[2:]
        if padding is None:
            padding = (kh - 1) // 2
        self.kernel = kernel
        self.stride = int(stride)
        self.padding = int(padding)
        self.in_hw = (int(in_hw[0]), int(in_hw[1]))
        h, w = self.in_hw
        self.out_hw = (
            (h + 2 * self.padding - kh) // self.stride + 1,
            (w + 2 * self.padding - kw) // self.stride + 1,
        )
        if min(self.out_hw) < 1:
            raise ShapeError(f"conv2d kernel {kernel.shape} too large for input {self.in_hw}")

    @property
    def in_shape(self):
        return (self.kernel.shape[1],) + self.in_hw

    @property
    def out_shape(self):
        return (self.kernel.shape[0],) + self.out_hw

    @property
    def weight(self):
        return self.kernel

    @weight.setter
    def weight(self, value):
        self.kernel = value

    def _window(self, p, q):
        s = self.stride
        ho, wo = self.out_hw
        return (slice(None), slice(None), slice(p, p + s * (ho - 1) + 1, s), slice(q, q + s * (wo - 1) + 1, s))

    def _pad(self, x):
        p = self.padding
        if p == 0:
            return x
        return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))

    def _forward(self, x):
        xp = self._pad(x)
        kh, kw = self.kernel.shape[2:]
        out = np.zeros((x.shape[0],) + self.out_shape, dtype=np.result_type(x, self.kernel))
        for p in range(kh):
            for q in range(kw):
                patch = xp[self._window(p, q)]
                out += np.tensordot(patch, self.kernel[:, :, p, q], axes=([1], [1])).transpose(0, 3, 1, 2)
        return out

    def _adjoint(self, y):
        n = y.shape[0]
        c = self.kernel.shape[1]
        h, w = self.in_hw
        p0 = self.padding
        kh, kw = self.kernel.shape[2:]
        # padded canvas large enough for every window start
        hp = max(h + 2 * p0, (self.out_hw[0] - 1) * self.stride + kh)
        wp = max(w + 2 * p0, (self.out_hw[1] - 1) * self.stride + kw)
        xp = np.zeros((n, c, hp, wp), dtype=np.result_type(y, self.kernel))
        for p in range(kh):
            for q in range(kw):
                xp[self._window(p, q)] += np.tensordot(y, self.kernel[:, :, p, q], axes=([1], [0])).transpose(0, 3, 1, 2)
        return xp[:, :, p0:p0 + h, p0:p0 + w]

    def _param_grad(self, x, g):
        xp = self._pad(x)
        kh, kw = self.kernel.shape[2:]
        grad = np.zeros(self.kernel.shape, dtype=np.result_type(x, g))
        for p in range(kh):
            for q in range(kw):
                grad[:, :, p, q] = np.tensordot(g, xp[self._window(p, q)], axes=([0, 2, 3], [0, 2, 3]))
        return grad


def apply(op: LinearOperator, x: np.ndarray) -> np.ndarray:
    return op.apply(x)


def apply_adjoint(op: LinearOperator, y: np.ndarray) -> np.ndarray:
    return op.apply_adjoint(y)


def materialize(op: LinearOperator) -> np.ndarray:
    return op.materialize()
