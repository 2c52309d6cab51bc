"""Continuous ResNet flows ``dx/dt = -grad f_t(x) + A_t x`` and their discretizations.

Flows are piecewise constant in time: a :class:`FlowSpec` is a list of
segments, each holding one convex potential and one skew matrix. Everything
here runs in float64.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .errors import ConvergenceError, IntegrationBlowupError, ShapeError


class NonContractiveSchemeWarning(UserWarning):
    """Explicit Euler on a skew field expands distances."""


def _softplus(a):
    return np.logaddexp(0.0, a)


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


# scalar convex functions: value, first and second derivative, sup of the second
PHI = {
    "softplus": (_softplus, _sigmoid, lambda a: _sigmoid(a) * (1 - _sigmoid(a)), 0.25),
    "logcosh": (lambda a: np.logaddexp(a, -a) - math.log(2.0), np.tanh, lambda a: 1 - np.tanh(a) ** 2, 1.0),
}


class Potential:
    """Convex scalar potential; ``curvature`` is (min, max) Hessian eigenvalue bounds or None."""

    name = "potential"
    smooth = True
    curvature: tuple | None = None

    def value(self, x):
        raise NotImplementedError

    def grad(self, x):
        raise NotImplementedError

    def hessian(self, x):
        raise NotImplementedError

    def prox(self, x, h=1.0, inner_tol=1e-10, max_iter=100_000):
        """argmin_u 1/2 |u - x|^2 + h f(u) by gradient descent on the strongly convex objective."""
        lip = self.curvature[1] if self.curvature else None
        if lip is None:
            raise ConvergenceError(f"{self.name}: no smoothness bound for the inner solver")
        lr = 1.0 / (1.0 + h * lip)
        u = np.array(x, dtype=np.float64)
        for _ in range(max_iter):
            g = u - x + h * self.grad(u)
            if np.max(np.linalg.norm(np.atleast_2d(g), axis=-1)) <= inner_tol:
                return u
            u = u - lr * g
        raise ConvergenceError(f"{self.name}: prox inner solve did not reach {inner_tol} in {max_iter} iterations")


class ZeroPotential(Potential):
    name = "zero"
    curvature = (0.0, 0.0)

    def value(self, x):
        return np.zeros(np.shape(x)[:-1])

    def grad(self, x):
        return np.zeros_like(x, dtype=np.float64)

    def hessian(self, x):
        return np.zeros((np.shape(x)[-1],) * 2)

    def prox(self, x, h=1.0, **_):
        return np.array(x, dtype=np.float64)


class Quadratic(Potential):
    """``mu/2 |x|^2``."""

    name = "quadratic"

    def __init__(self, mu: float):
        if mu < 0:
            raise ValueError("quadratic potential needs mu >= 0")
        self.mu = float(mu)
        self.curvature = (self.mu, self.mu)

    def value(self, x):
        return 0.5 * self.mu * np.sum(np.square(x), axis=-1)

    def grad(self, x):
        return self.mu * np.asarray(x, dtype=np.float64)

    def hessian(self, x):
        return self.mu * np.eye(np.shape(x)[-1])

    def prox(self, x, h=1.0, **_):
        return np.asarray(x, dtype=np.float64) / (1.0 + h * self.mu)


class QuadraticForm(Potential):
    """``x^T S x / 2`` with S symmetric positive semidefinite."""

    name = "quadratic_form"

    def __init__(self, s):
        s = np.asarray(s, dtype=np.float64)
        if s.ndim != 2 or s.shape[0] != s.shape[1] or not np.allclose(s, s.T, atol=1e-12):
            raise ValueError("quadratic form needs a symmetric square matrix")
        try:
            np.linalg.cholesky(s + 1e-12 * max(1.0, np.abs(s).max()) * np.eye(len(s)))
        except np.linalg.LinAlgError:
            raise ValueError("quadratic form matrix is not positive semidefinite") from None
        self.s = s
        eig = np.linalg.eigvalsh(s)
        self.curvature = (float(max(eig[0], 0.0)), float(eig[-1]))

    def value(self, x):
        return 0.5 * np.einsum("...i,ij,...j->...", x, self.s, x)

    def grad(self, x):
        return np.asarray(x, dtype=np.float64) @ self.s

    def hessian(self, x):
        return self.s.copy()

    def prox(self, x, h=1.0, **_):
        m = np.eye(len(self.s)) + h * self.s
        return np.linalg.solve(m, np.asarray(x, dtype=np.float64).T).T


class ICNNPotential(Potential):
    """One-layer input-convex potential ``sum_i phi(w_i^T x + b_i)``."""

    name = "icnn"

    def __init__(self, w, b, phi: str = "softplus"):
        self.w = np.asarray(w, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        if phi not in PHI:
            raise ValueError(f"unknown phi {phi!r}")
        self.phi = phi
        top = np.linalg.norm(self.w, 2)
        self.curvature = (0.0, PHI[phi][3] * top ** 2)

    def value(self, x):
        return np.sum(PHI[self.phi][0](x @ self.w.T + self.b), axis=-1)

    def grad(self, x):
        return PHI[self.phi][1](np.asarray(x) @ self.w.T + self.b) @ self.w

    def hessian(self, x):
        d2 = PHI[self.phi][2](self.w @ x + self.b)
        return self.w.T @ (d2[:, None] * self.w)


class HingePotential(Potential):
    """``c * max(0, w^T x + b)``: convex but not differentiable; exact prox."""

    name = "hinge"
    smooth = False
    curvature = None

    def __init__(self, w, b=0.0, c=1.0):
        self.w = np.asarray(w, dtype=np.float64)
        self.b = float(b)
        self.c = float(c)

    def value(self, x):
        return self.c * np.maximum(0.0, x @ self.w + self.b)

    def grad(self, x):
        active = (np.asarray(x) @ self.w + self.b) > 0
        return self.c * active[..., None] * self.w

    def hessian(self, x):
        return np.zeros((len(self.w),) * 2)

    def prox(self, x, h=1.0, **_):
        x = np.asarray(x, dtype=np.float64)
        s = x @ self.w + self.b
        ww = self.w @ self.w
        t = np.clip(s / ww, 0.0, h * self.c)
        return x - t[..., None] * self.w


@dataclass
class Segment:
    duration: float
    potential: Potential
    skew: np.ndarray | None = None


@dataclass
class FlowSpec:
    """Piecewise-constant flow; ``segments`` cover [0, T] in order."""

    segments: list
    dim: int

    def __post_init__(self):
        for seg in self.segments:
            if seg.duration <= 0:
                raise ValueError("segment durations must be positive")
            if seg.skew is not None:
                a = np.asarray(seg.skew, dtype=np.float64)
                if a.shape != (self.dim, self.dim):
                    raise ShapeError(f"skew matrix shape {a.shape} does not match dimension {self.dim}")
                if np.any(a + a.T != 0):
                    raise ValueError("A_t must be exactly skew-symmetric")
                seg.skew = a

    @classmethod
    def single(cls, potential, dim, skew=None, horizon=1.0):
        return cls([Segment(horizon, potential, skew)], dim)

    @property
    def horizon(self) -> float:
        return float(sum(s.duration for s in self.segments))

    def segment_at(self, t: float) -> Segment:
        acc = 0.0
        for seg in self.segments:
            acc += seg.duration
            if t < acc - 1e-12:
                return seg
        return self.segments[-1]

    def field(self, t, x):
        seg = self.segment_at(t)
        out = -seg.potential.grad(x)
        if seg.skew is not None:
            out = out + x @ seg.skew.T
        return out

    def jacobian_bounds(self, t):
        """(mu_t, lambda_t): bounds on the symmetric part of the field's Jacobian."""
        curv = self.segment_at(t).potential.curvature
        if curv is None:
            return None
        return -curv[1], -curv[0]

    def envelope_exponents(self, times):
        """Integrals of mu_s and lambda_s from 0 to each time (exact for piecewise constants)."""
        lo = np.zeros(len(times))
        hi = np.zeros(len(times))
        for i, t in enumerate(times):
            acc = 0.0
            for seg in self.segments:
                dt = min(seg.duration, max(t - acc, 0.0))
                curv = seg.potential.curvature
                if curv is None:
                    raise ValueError(f"potential {seg.potential.name} has no analytic envelope")
                lo[i] += -curv[1] * dt
                hi[i] += -curv[0] * dt
                acc += seg.duration
        return lo, hi


@dataclass
class FlowTrajectory:
    times: np.ndarray
    states: np.ndarray
    scheme: str
    step: float
    meta: dict = field(default_factory=dict)


def _check_step(spec: FlowSpec, step: float) -> int:
    if step <= 0:
        raise ValueError("step must be positive")
    total = 0
    for seg in spec.segments:
        n = seg.duration / step
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ValueError(f"step {step} does not divide segment duration {seg.duration}")
        total += int(round(n))
    return total


def integrate_continuous(spec: FlowSpec, x0, step: float, scheme: str = "rk4") -> FlowTrajectory:
    """Fixed-step classical Runge-Kutta integration of the flow on [0, T]."""
    if scheme != "rk4":
        raise ValueError(f"unsupported continuous scheme {scheme!r}")
    nsteps = _check_step(spec, step)
    x = np.array(x0, dtype=np.float64)
    times = np.empty(nsteps + 1)
    states = np.empty((nsteps + 1,) + x.shape)
    times[0], states[0] = 0.0, x
    t = 0.0
    for k in range(nsteps):
        seg_t = t + step / 2  # whole step lies in one segment
        f = lambda y: spec.field(seg_t, y)  # noqa: E731
        k1 = f(x)
        k2 = f(x + step / 2 * k1)
        k3 = f(x + step / 2 * k2)
        k4 = f(x + step * k3)
        x = x + step / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t = (k + 1) * step
        if not np.all(np.isfinite(x)):
            raise IntegrationBlowupError(f"non-finite state at t={t:.6g}", last_valid_time=times[k])
        times[k + 1], states[k + 1] = t, x
    times[-1] = spec.horizon
    return FlowTrajectory(times, states, scheme, step)


@dataclass
class EnvelopeReport:
    ok: bool
    worst_time: float
    worst_violation: float
    times: np.ndarray
    distances: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


def contraction_envelope_check(spec: FlowSpec, x0, z0, step: float, tol: float = 1e-6) -> EnvelopeReport:
    """Check exp(int mu) d0 <= d_t <= exp(int lambda) d0 along RK4 trajectories.

    ``tol`` is relative to the initial distance.
    """
    traj = integrate_continuous(spec, np.stack([np.asarray(x0, float), np.asarray(z0, float)]), step)
    d = np.linalg.norm(traj.states[:, 0] - traj.states[:, 1], axis=-1)
    lo_exp, hi_exp = spec.envelope_exponents(traj.times)
    lower = np.exp(lo_exp) * d[0]
    upper = np.exp(hi_exp) * d[0]
    violation = np.maximum(lower - d, d - upper) / max(d[0], 1e-300)
    worst = int(np.argmax(violation))
    return EnvelopeReport(bool(violation[worst] <= tol), float(traj.times[worst]), float(violation[worst]),
                          traj.times, d, lower, upper)


def explicit_step(potential: Potential, x, h: float, skew=None):
    """``x - h grad f(x)`` (plus ``h A x`` when ``skew`` is given, which is not contractive)."""
    if h < 0:
        raise ValueError("h must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    out = x - h * potential.grad(x)
    if skew is not None:
        skew = np.asarray(skew, dtype=np.float64)
        if np.any(skew):
            warnings.warn("explicit Euler on a skew field is not contractive", NonContractiveSchemeWarning,
                          stacklevel=2)
        out = out + h * x @ skew.T
    return out


def implicit_prox_step(potential: Potential, x, inner_tol: float = 1e-10, h: float = 1.0,
                       max_iter: int = 100_000):
    """Implicit Euler step ``u = x - h grad f(u)``, i.e. the proximal map of ``h f``."""
    return potential.prox(np.asarray(x, dtype=np.float64), h=h, inner_tol=inner_tol, max_iter=max_iter)


def cayley_matrix(a, h=1.0):
    eye = np.eye(len(a))
    return np.linalg.solve(eye - h * a / 2, eye + h * a / 2)


SCHEMES = ("explicit", "implicit_prox", "split_midpoint", "split_exact")

# all four are first order: the split schemes use one Lie splitting per step
SCHEME_ORDER = {name: 1.0 for name in SCHEMES}


def _scheme_step(scheme, seg: Segment, x, h):
    a = seg.skew
    if scheme == "explicit":
        return explicit_step(seg.potential, x, h, skew=a) if a is not None else explicit_step(seg.potential, x, h)
    if scheme == "implicit_prox":
        # implicit step for the potential, midpoint (Cayley) step for the skew part
        half = implicit_prox_step(seg.potential, x, h=h)
        return half if a is None else half @ cayley_matrix(a, h).T
    half = explicit_step(seg.potential, x, h)
    if a is None:
        return half
    if scheme == "split_midpoint":
        return half @ cayley_matrix(a, h).T
    if scheme == "split_exact":
        return half @ expm(h * a).T
    raise ValueError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")


def run_scheme(spec: FlowSpec, x0, scheme: str, step: float) -> FlowTrajectory:
    nsteps = _check_step(spec, step)
    x = np.array(x0, dtype=np.float64)
    states = [x]
    times = [0.0]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonContractiveSchemeWarning)
        for k in range(nsteps):
            seg = spec.segment_at(k * step + step / 2)
            x = _scheme_step(scheme, seg, x, step)
            states.append(x)
            times.append((k + 1) * step)
    return FlowTrajectory(np.array(times), np.array(states), scheme, step)


def scheme_compare(spec: FlowSpec, x0, z0, schemes=SCHEMES, step: float = 0.1) -> list:
    """Per-scheme, per-step distance ratios and squared-distance growth, as CSV-ready rows."""
    rows = []
    pair = np.stack([np.asarray(x0, float), np.asarray(z0, float)])
    for scheme in schemes:
        traj = run_scheme(spec, pair, scheme, step)
        d = np.linalg.norm(traj.states[:, 0] - traj.states[:, 1], axis=-1)
        for k in range(1, len(d)):
            rows.append({
                "scheme": scheme,
                "step_index": k,
                "t": float(traj.times[k]),
                "distance": float(d[k]),
                "ratio": float(d[k] / d[k - 1]) if d[k - 1] > 0 else float("nan"),
                "sq_growth": float(d[k] ** 2 - d[k - 1] ** 2),
                "norm_x": float(np.linalg.norm(traj.states[k, 0])),
            })
    return rows


def convergence_orders(spec: FlowSpec, x0, schemes=SCHEMES, steps=(0.1, 0.05, 0.025, 0.0125),
                       reference_step: float | None = None) -> dict:
    """Fitted log-log slope of endpoint error against step size, per scheme (RK4 reference)."""
    ref_step = reference_step or min(steps) / 16
    ref = integrate_continuous(spec, x0, ref_step).states[-1]
    out = {}
    for scheme in schemes:
        errs = [np.linalg.norm(run_scheme(spec, x0, scheme, h).states[-1] - ref) for h in steps]
        out[scheme] = float(np.polyfit(np.log(steps), np.log(errs), 1)[0])
    return out


def jacobian_fd(spec: FlowSpec, x, t: float = 0.0, eps: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of the flow field at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = eps
        cols.append((spec.field(t, x + e) - spec.field(t, x - e)) / (2 * eps))
    return np.stack(cols, axis=1)


def is_skew(j: np.ndarray, tol: float = 1e-6) -> bool:
    return bool(np.max(np.abs(j + j.T)) <= tol)
