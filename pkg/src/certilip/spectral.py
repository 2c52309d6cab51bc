"""Power-iteration spectral norm estimation.

Two regimes share one step function: training performs a single step per
forward pass on a persistent vector, inference re-converges from a seeded
random start.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import OracleScaleError, ShapeError
from .tensor import ORACLE_MAX_DIM, LinearOperator

log = logging.getLogger(__name__)

DEFAULT_INFERENCE_ITERS = 100


def random_unit(shape, seed, dtype=np.float64) -> np.ndarray:
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(int(np.prod(shape))).reshape(shape)
    return (u / np.linalg.norm(u)).astype(dtype)


@dataclass
class SpectralState:
    u: np.ndarray
    sigma: float = 0.0
    iteration_count: int = 0
    seed: int = 0
    degenerate: bool = field(default=False, compare=False)

    @classmethod
    def fresh(cls, shape, seed: int = 0, dtype=np.float64) -> "SpectralState":
        return cls(u=random_unit(shape, seed, dtype), seed=seed)

    def copy(self) -> "SpectralState":
        return SpectralState(self.u.copy(), self.sigma, self.iteration_count, self.seed, self.degenerate)


def power_step(op: LinearOperator, state: SpectralState) -> SpectralState:
    """One v <- Wu/|Wu|, u <- W^T v/|W^T v| round, mutating ``state``.

    The estimate is sum(W u_new * v), as in the layer algorithm box; it is
    |W^T W u_old| / |W u_old|, which never exceeds the true norm.
    """
    if state.u.shape != tuple(op.in_shape):
        raise ShapeError(f"spectral state u has shape {state.u.shape}, operator input is {tuple(op.in_shape)}")
    state.degenerate = False
    wu = op.apply(state.u)
    nwu = np.linalg.norm(wu)
    if nwu == 0.0 or not np.isfinite(nwu):
        # reseed deterministically from (seed, count) so a zero layer stays trainable
        state.u = random_unit(op.in_shape, (state.seed, state.iteration_count + 1), state.u.dtype)
        state.sigma = 0.0
        state.iteration_count += 1
        state.degenerate = True
        return state
    v = wu / nwu
    wtv = op.apply_adjoint(v)
    nwtv = np.linalg.norm(wtv)
    if nwtv == 0.0:
        state.degenerate = True
        state.sigma = 0.0
        state.iteration_count += 1
        return state
    state.u = wtv / nwtv
    state.sigma = float(np.sum(op.apply(state.u) * v))
    state.iteration_count += 1
    return state


def power_converge(op: LinearOperator, iters: int = DEFAULT_INFERENCE_ITERS, seed: int = 0):
    """Run ``iters`` power steps from a seeded random unit start; returns (sigma, u)."""
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    dtype = np.result_type(op.weight.dtype, np.float32)
    state = SpectralState.fresh(op.in_shape, seed, dtype)
    for _ in range(iters):
        power_step(op, state)
    return state.sigma, state.u


def spectral_norm_oracle(matrix: np.ndarray, tol: float = 1e-12, restarts: int = 3,
                         max_iter: int = 200_000, seed: int = 12345) -> float:
    """Largest singular value of a dense matrix, by restarted power iteration on M^T M."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"oracle needs a 2-D matrix, got shape {m.shape}")
    if max(m.shape) > ORACLE_MAX_DIM:
        raise OracleScaleError(f"oracle refused: matrix shape {m.shape} exceeds {ORACLE_MAX_DIM}")
    if not np.any(m):
        return 0.0
    gram = m.T @ m
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(restarts):
        u = rng.standard_normal(m.shape[1])
        u /= np.linalg.norm(u)
        est = 0.0
        for _ in range(max_iter):
            w = gram @ u
            nw = np.linalg.norm(w)
            if nw == 0.0:
                break
            u_new = w / nw
            new = float(np.linalg.norm(m @ u_new))
            # the estimate alone stagnates early on a geometric tail; the vector must settle too
            done = abs(new - est) <= tol * new and np.linalg.norm(u_new - u) <= 1e-9
            u, est = u_new, new
            if done:
                break
        best = max(best, est)
    return best
