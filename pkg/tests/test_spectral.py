import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from certilip.spectral import SpectralState, power_converge, power_step, spectral_norm_oracle
from certilip.tensor import Conv2dOperator, DenseOperator


def bisection_top_eigenvalue(gram, tol=1e-13):
    """Largest eigenvalue of a PSD matrix: smallest t with t*I - gram positive definite."""
    lo, hi = 0.0, float(np.sqrt(np.sum(gram ** 2))) + 1.0
    eye = np.eye(gram.shape[0])
    while hi - lo > tol * hi:
        mid = (lo + hi) / 2
        try:
            np.linalg.cholesky(mid * eye - gram)
            hi = mid
        except np.linalg.LinAlgError:
            lo = mid
    return hi


def gap(m):
    s = np.linalg.svd(m, compute_uv=False)
    return (s[0] - s[1]) / s[0]


def test_diag_converges_to_largest_entry():
    op = DenseOperator(np.diag([3.0, 1.0]))
    state = SpectralState(u=np.array([0.6, 0.8]))
    for _ in range(100):
        power_step(op, state)
    assert abs(state.sigma - 3.0) <= 1e-8
    assert abs(np.linalg.norm(state.u) - 1) <= 1e-6


def test_identity_one_step():
    state = SpectralState.fresh((5,), seed=3)
    power_step(DenseOperator(np.eye(5)), state)
    assert state.sigma == pytest.approx(1.0, abs=1e-15)
    assert state.iteration_count == 1


def test_random_dense_1000_steps_matches_oracle():
    rng = np.random.default_rng(11)
    m = rng.standard_normal((32, 32))
    state = SpectralState.fresh((32,), seed=0)
    op = DenseOperator(m)
    for _ in range(1000):
        power_step(op, state)
    assert abs(state.sigma - spectral_norm_oracle(m)) <= 1e-6


def test_degenerate_step_reinitializes():
    op = DenseOperator(np.zeros((3, 4)))
    state = SpectralState.fresh((4,), seed=1)
    before = state.u.copy()
    power_step(op, state)
    assert state.degenerate
    assert state.sigma == 0.0
    assert not np.array_equal(before, state.u)
    assert abs(np.linalg.norm(state.u) - 1) <= 1e-12


def test_degenerate_reinit_recovers_when_kernel_hit():
    # u in the kernel of W but W nonzero: the reseeded vector escapes it
    op = DenseOperator(np.array([[1.0, 0.0]]))
    state = SpectralState(u=np.array([0.0, 1.0]), seed=4)
    power_step(op, state)
    assert state.degenerate
    for _ in range(3):
        power_step(op, state)
    assert state.sigma == pytest.approx(1.0)


def test_converge_diag_541():
    sigma, u = power_converge(DenseOperator(np.diag([5.0, 4.0, 1.0])), 100, seed=0)
    assert abs(sigma - 5) <= 1e-6
    assert abs(np.linalg.norm(u) - 1) <= 1e-12


def test_converge_rank_one_in_one_iteration():
    w = np.array([1.0, -2.0, 0.5, 3.0])
    sigma, _ = power_converge(DenseOperator(np.outer(w, w)), 1, seed=2)
    assert sigma == pytest.approx(w @ w, rel=1e-12)


def test_converge_conv_matches_oracle():
    rng = np.random.default_rng(7)
    op = Conv2dOperator(rng.standard_normal((2, 2, 3, 3)), (8, 8))
    m = op.materialize()
    assert gap(m) > 0.05
    sigma, _ = power_converge(op, 100, seed=0)
    assert abs(sigma - spectral_norm_oracle(m)) <= 1e-4


def test_oracle_trivial_cases():
    assert spectral_norm_oracle(np.array([[0.0, 1.0], [0.0, 0.0]])) == pytest.approx(1.0, abs=1e-12)
    assert spectral_norm_oracle(2 * np.eye(8)) == pytest.approx(2.0, abs=1e-12)
    assert spectral_norm_oracle(np.zeros((3, 3))) == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_oracle_matches_bisection(seed):
    m = np.random.default_rng(seed).standard_normal((16, 16))
    expected = np.sqrt(bisection_top_eigenvalue(m.T @ m))
    assert spectral_norm_oracle(m) == pytest.approx(expected, rel=1e-8)


def test_vector_error_slope_is_twice_log_ratio():
    lam1, lam2 = 1.0, 0.8
    op = DenseOperator(np.diag([lam1, lam2]))
    state = SpectralState(u=np.array([1.0, 1.0]) / np.sqrt(2))
    errs = []
    for _ in range(30):
        power_step(op, state)
        errs.append(abs(state.u[1]))
    k = np.arange(1, 31)
    slope = np.polyfit(k, np.log(errs), 1)[0]
    assert slope == pytest.approx(2 * np.log(lam2 / lam1), rel=0.1)


def test_sigma_error_slope_is_four_log_ratio():
    lam1, lam2 = 1.0, 0.8
    op = DenseOperator(np.diag([lam1, lam2]))
    state = SpectralState(u=np.array([1.0, 1.0]) / np.sqrt(2))
    errs = []
    for _ in range(12):
        power_step(op, state)
        errs.append(lam1 - state.sigma)
    slope = np.polyfit(np.arange(1, 13), np.log(errs), 1)[0]
    assert slope == pytest.approx(4 * np.log(lam2 / lam1), rel=0.1)
    # and the looser 2k bound holds with C = first error
    assert all(e <= errs[0] * (lam2 / lam1) ** (2 * i) for i, e in enumerate(errs))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), rows=st.integers(2, 12), cols=st.integers(2, 12))
def test_rayleigh_estimates_monotone(seed, rows, cols):
    m = np.random.default_rng(seed).standard_normal((rows, cols))
    state = SpectralState.fresh((cols,), seed=seed)
    op = DenseOperator(m)
    prev = 0.0
    for _ in range(40):
        power_step(op, state)
        assert state.sigma >= prev - 1e-12 * max(1.0, prev)
        assert abs(np.linalg.norm(state.u) - 1) <= 1e-6
        prev = state.sigma


def test_converge_error_within_band_for_gapped_operators():
    rng = np.random.default_rng(21)
    checked = 0
    while checked < 10:
        m = rng.standard_normal((20, 12))
        if gap(m) < 0.05:
            continue
        sigma, _ = power_converge(DenseOperator(m), 100, seed=checked)
        ref = spectral_norm_oracle(m)
        assert -1e-12 * ref <= ref - sigma <= 1e-4 * ref
        checked += 1
