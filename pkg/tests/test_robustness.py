import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from certilip.errors import ConfigError, UnknownLipschitzError
from certilip.layers import DenseOperator, LinearLayer, Network, build_network
from certilip.robustness import (AttackConfig, attack_accuracy, certify, empirical_lipschitz,
                                 jacobian_norm_estimate, pgd_attack, report_from_logits)
from certilip.spectral import spectral_norm_oracle
from certilip.training import TrainConfig, relaxed_mode, train


def linear_net(matrix):
    matrix = np.asarray(matrix, dtype=np.float64)
    layer = LinearLayer(DenseOperator(matrix), bias=np.zeros(matrix.shape[0]))
    return Network([layer], (matrix.shape[1],), matrix.shape[0])


def cpl_arch(depth=4, lln=False):
    head = {"type": "linear", "out": 2} if lln else {"type": "truncate", "size": 2}
    return {"input_shape": [2], "num_classes": 2, "last_layer_normalization": lln,
            "layers": [{"type": "zero_pad", "size": 8},
                       {"type": "cpl_dense", "features": 16, "repeat": depth}, head]}


@pytest.fixture(scope="module")
def trained():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((300, 2)).astype(np.float32)
    y = (x[:, 0] * x[:, 1] > 0).astype(int)
    net = build_network(cpl_arch(), seed=3)
    train(net, (x, y), TrainConfig(epochs=30, batch_size=64, lr=1e-2))
    net.freeze()
    return net, x, y


def test_radius_from_margin():
    rep = report_from_logits(np.array([[2.0, 0.0]]), np.array([0]), [0.5])
    assert rep.radius[0] == pytest.approx(math.sqrt(2), abs=1e-12)


def test_misclassified_has_zero_radius():
    rep = report_from_logits(np.array([[0.0, 3.0]]), np.array([0]), [0.0, 0.1])
    assert rep.radius[0] == 0.0
    assert not rep.certified_at(1e-9)[0]


def test_boundary_margin_not_certified():
    eps = 0.25
    m = math.sqrt(2) * eps
    rep = report_from_logits(np.array([[m, 0.0]]), np.array([0]), [eps])
    assert rep.certified_accuracy == [0.0]


@given(st.lists(st.floats(0, 2), min_size=1, max_size=8))
@settings(max_examples=60, deadline=None)
def test_certified_sets_shrink_with_eps(eps_list):
    rng = np.random.default_rng(len(eps_list))
    rep = report_from_logits(rng.standard_normal((40, 3)), rng.integers(0, 3, 40), sorted(eps_list))
    assert all(a >= b for a, b in zip(rep.certified_accuracy, rep.certified_accuracy[1:]))
    lo, hi = min(eps_list), max(eps_list)
    assert np.all(rep.certified_at(lo) | ~rep.certified_at(hi))


def test_certify_refuses_relaxed():
    net = build_network(cpl_arch(), seed=0)
    relaxed_mode(net, 1.0)
    with pytest.raises(UnknownLipschitzError):
        certify(net, np.zeros((1, 2), np.float32), [0], [0.1])


def test_certify_uses_unit_bound_for_cpl(trained):
    net, x, y = trained
    rep = certify(net, x, y, [0.0, 0.1])
    assert rep.lipschitz == 1.0
    assert rep.certified_accuracy[1] <= rep.clean_accuracy


def test_attack_config_validation():
    with pytest.raises(ConfigError):
        AttackConfig(-0.1)
    with pytest.raises(ConfigError):
        AttackConfig(0.1, iterations=0)
    assert AttackConfig(0.5, 10).step == pytest.approx(0.1)


def test_zero_budget_keeps_input():
    net = linear_net([[1.0, 0.0], [0.0, 1.0]])
    x = np.array([[1.0, 0.5], [0.2, 0.9]])
    x_adv, success = pgd_attack(net, x, np.array([0, 0]), AttackConfig(0.0))
    np.testing.assert_array_equal(x_adv, x)
    np.testing.assert_array_equal(success, [False, True])


def test_linear_worst_case_matches_closed_form():
    rng = np.random.default_rng(5)
    w = rng.standard_normal((2, 4))
    net = linear_net(w)
    x = rng.standard_normal((6, 4))
    y = np.argmax(x @ w.T, axis=1)
    eps = 0.3
    x_adv, _ = pgd_attack(net, x, y, AttackConfig(eps, iterations=20))
    sign = np.where(y == 0, 1.0, -1.0)
    diff = w[0] - w[1]
    got = sign * ((x_adv @ w.T)[:, 0] - (x_adv @ w.T)[:, 1])
    expected = sign * (x @ diff) - eps * np.linalg.norm(diff)
    np.testing.assert_allclose(got, expected, atol=1e-3)


def test_iterates_stay_in_ball(trained):
    net, x, y = trained
    for eps in (0.05, 0.3, 1.0):
        cfg = AttackConfig(eps, iterations=10, random_start=True, seed=1)
        _, _, dev = pgd_attack(net, x, y, cfg, return_max_deviation=True)
        assert dev <= eps + 1e-6


def test_zero_gradient_skips_step():
    net = linear_net([[1.0, 0.0], [1.0, 0.0]])
    x = np.array([[0.3, 0.7]])
    x_adv, _ = pgd_attack(net, x, np.array([0]), AttackConfig(0.5))
    np.testing.assert_array_equal(x_adv, x)


def test_no_attack_success_inside_certified_radius(trained):
    net, x, y = trained
    for eps in (0.05, 0.1, 0.2):
        rep = certify(net, x, y, [eps])
        _, success = pgd_attack(net, x, y, AttackConfig(eps, iterations=10))
        assert not np.any(success & rep.certified_at(eps))


def test_attack_accuracy_bounded_by_clean(trained):
    net, x, y = trained
    rows = attack_accuracy(net, x, y, [0.0, 0.2])
    clean = certify(net, x, y, []).clean_accuracy
    assert rows[0]["accuracy"] == pytest.approx(clean)
    assert rows[1]["accuracy"] <= clean


def test_identity_network_lipschitz_is_one():
    net = Network([], (3,), 3)
    est = empirical_lipschitz(net, lambda n, rng: rng.standard_normal((n, 3)), pairs=32)
    assert abs(est - 1.0) < 1e-10


def test_linear_lipschitz_approaches_oracle():
    rng = np.random.default_rng(11)
    m = rng.standard_normal((5, 7))
    est = empirical_lipschitz(linear_net(m), lambda n, r: r.standard_normal((n, 7)), pairs=32,
                              ascent_steps=200)
    oracle = spectral_norm_oracle(m)
    assert est <= oracle * (1 + 1e-9)
    assert est >= 0.98 * oracle


def test_trained_cpl_lower_bound_below_one(trained):
    net, x, _ = trained
    est = empirical_lipschitz(net, x, pairs=128, ascent_steps=30)
    assert est <= net.lipschitz_bound() + 1e-4


def test_jacobian_estimate_linear():
    rng = np.random.default_rng(2)
    m = rng.standard_normal((3, 6))
    est = jacobian_norm_estimate(linear_net(m), rng.standard_normal((4, 6)), iters=200)
    assert est == pytest.approx(spectral_norm_oracle(m), rel=1e-8)


def test_jacobian_estimate_trained_cpl(trained):
    net, x, _ = trained
    assert jacobian_norm_estimate(net, x[:50]) <= 1 + 1e-4
