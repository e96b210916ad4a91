"""Constants chain, stability certificates, and perturbation margins."""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from spc_lab import (
    GainCertificate,
    NodeData,
    TreeError,
    build_tree_stagewise,
    check_detectability,
    check_stabilizability,
    check_stability_tree,
    compute_constants,
    perturbation_margin,
    psd_sqrt,
    verify_perturbed_stability,
)

from .helpers import nd_scalar, random_tree, uniform_outcome
from .oracles import decimal_constants


def dec_to_float(d):
    try:
        return float(d)
    except OverflowError:
        return math.inf


def uniform_binary_tree(nd, T):
    stages = [[(nd, 1.0)]] + [[(nd, 0.5), (nd, 0.5)]] * T
    return build_tree_stagewise(stages)


# ---------------------------------------------------------------------------
# compute_constants


def test_constants_direct_substitution_values():
    b = compute_constants(1.0, 0.5, 1.0)
    assert b.L_H == 3.0
    assert b.gamma_F == pytest.approx(0.0625, abs=1e-15)
    assert b.gamma_G == pytest.approx(0.03125, abs=1e-15)
    expected_mu = (2 * 9 / 0.03125 + 0.03125 + 3) / 0.0625
    assert b.mu_bar == pytest.approx(expected_mu, rel=1e-14)


@pytest.mark.parametrize("params", [(1.0, 0.5, 1.0), (1.0, 0.2, 1.0), (2.0, 0.3, 0.5)])
def test_constants_match_extended_precision_oracle(params):
    L, alpha, gamma = params
    b = compute_constants(L, alpha, gamma)
    o = decimal_constants(L, alpha, gamma)
    assert b.L_H == pytest.approx(dec_to_float(o["L_H"]), rel=1e-12)
    assert b.gamma_F == pytest.approx(dec_to_float(o["gamma_F"]), rel=1e-12)
    assert b.gamma_G == pytest.approx(dec_to_float(o["gamma_G"]), rel=1e-12)
    assert b.mu_bar == pytest.approx(dec_to_float(o["mu_bar"]), rel=1e-12)
    assert b.gamma_H == pytest.approx(dec_to_float(o["gamma_H"]), rel=1e-12)
    assert b.one_minus_rho == pytest.approx(
        dec_to_float(1 - o["rho"]), rel=1e-10
    )
    assert b.c1 == pytest.approx(dec_to_float(o["c1"]), rel=1e-10)
    assert b.W_bar == pytest.approx(dec_to_float(o["W_bar"]), rel=1e-10)
    for name in ("c2", "c3", "c4", "c5", "c6", "c7"):
        expected = dec_to_float(o[name])
        got = getattr(b, name)
        if math.isinf(expected):
            assert math.isinf(got)
        else:
            assert got == pytest.approx(expected, rel=1e-9)


def test_constants_internal_consistency():
    b = compute_constants(1.0, 0.2, 1.0)
    x = (b.gamma_H / b.L_H) ** 2
    assert b.one_minus_rho2 == pytest.approx(2 * x / (1 + x), rel=1e-14)
    assert b.c1 * b.gamma_H**2 * b.rho == pytest.approx(b.L_H, rel=1e-12)
    # complements are mutually consistent
    sqrt_rho = math.sqrt(b.rho)
    assert b.one_minus_sqrt_rho * (1 + sqrt_rho) == pytest.approx(
        b.one_minus_rho, rel=1e-12
    )
    assert b.one_minus_rho > 0.0
    assert b.rho <= 1.0
    assert b.W_bar >= 0.0 and b.c1 >= 1.0 and b.gamma_H > 0.0
    for name in ("c2", "c3", "c4", "c5", "c6", "c7"):
        assert getattr(b, name) > 0.0


def test_constants_normalization_warns():
    with pytest.warns(RuntimeWarning, match="normalized"):
        a = compute_constants(0.5, 0.3, 1.0)
    assert a.L == 1.0
    with pytest.warns(RuntimeWarning, match="normalized"):
        g = compute_constants(1.0, 0.3, 2.0)
    assert g.gamma == 1.0
    ref = compute_constants(1.0, 0.3, 1.0)
    assert a.c2 == ref.c2 and g.c2 == ref.c2


@pytest.mark.parametrize("alpha", [0.0, 1.0, -0.2, 1.5])
def test_constants_reject_bad_alpha(alpha):
    with pytest.raises(ValueError):
        compute_constants(1.0, alpha, 1.0)


@pytest.mark.parametrize("bad", [(-1.0, 0.5, 1.0), (1.0, 0.5, 0.0), (1.0, 0.5, -2.0)])
def test_constants_reject_bad_L_gamma(bad):
    with pytest.raises(ValueError):
        compute_constants(*bad)


def test_constants_monotone_rate_and_threshold():
    # rate toward 1 (complement toward 0) as L or alpha grow, gamma shrinks
    oms = [compute_constants(L, 0.3, 1.0).one_minus_rho for L in (1.0, 1.5, 2.0)]
    assert oms[0] >= oms[1] >= oms[2]
    oms = [compute_constants(1.0, a, 1.0).one_minus_rho for a in (0.1, 0.3, 0.5)]
    assert oms[0] >= oms[1] >= oms[2]
    oms = [compute_constants(1.0, 0.3, g).one_minus_rho for g in (0.25, 0.5, 1.0)]
    assert oms[0] <= oms[1] <= oms[2]
    wbs = [compute_constants(L, 0.3, 1.0).W_bar for L in (1.0, 1.5, 2.0)]
    assert wbs[0] <= wbs[1] <= wbs[2]
    wbs = [compute_constants(1.0, 0.3, g).W_bar for g in (0.25, 0.5, 1.0)]
    assert wbs[0] >= wbs[1] >= wbs[2]


def test_constants_moment_bound_from_tree():
    tree = random_tree(seed=61, T=3, branching=2, nx=2, nu=1)
    b = compute_constants(1.0, 0.3, 1.0, tree=tree, w_prev=(np.ones(2), np.ones(1)))
    per_stage = []
    for t in range(tree.horizon + 1):
        per_stage.append(
            math.fsum(
                tree.pi[j] * float(tree.data[j].p @ tree.data[j].p)
                for j in tree.stage_nodes(t)
            )
        )
    assert b.D == pytest.approx(math.sqrt(max(per_stage)), rel=1e-13)
    assert b.w_bar_norm == pytest.approx(math.sqrt(3.0), rel=1e-13)
    assert b.W_bar_ceil == math.ceil(b.W_bar)


# ---------------------------------------------------------------------------
# check_stability_tree


def test_stability_scalar_half_exact():
    tree = uniform_binary_tree(nd_scalar(), 3)
    Phi = {n: np.array([[0.5]]) for n in range(1, tree.node_count)}
    result = check_stability_tree(tree, Phi, 1.0, 0.5)
    assert result.passed
    assert result.worst_ratio == pytest.approx(1.0, abs=1e-12)


def test_stability_scalar_growth_fails():
    tree = uniform_binary_tree(nd_scalar(), 2)
    Phi = {n: np.array([[1.1]]) for n in range(1, tree.node_count)}
    result = check_stability_tree(tree, Phi, 1.0, 0.5)
    assert not result.passed
    assert result.worst_ratio > 2.0


def test_stability_requires_all_transition_matrices():
    tree = uniform_binary_tree(nd_scalar(), 1)
    with pytest.raises(TreeError, match="missing"):
        check_stability_tree(tree, {1: np.eye(1)}, 1.0, 0.5)


def test_stability_path_products_are_order_correct():
    # non-commuting pair whose two multiplication orders land on opposite
    # sides of the depth-2 bound, so a reversed product flips the verdict
    nd = NodeData(
        A=np.zeros((2, 2)),
        B=np.zeros((2, 1)),
        d=np.zeros(2),
        Q=np.eye(2),
        R=np.eye(1),
        q=np.zeros(2),
        r=np.zeros(1),
    )
    tree = build_tree_stagewise([[(nd, 1.0)], [(nd, 1.0)], [(nd, 1.0)]])
    L, alpha = 2.0, 0.5
    M1 = np.array([[0.0, 1.0], [0.0, 0.0]])  # stage 1, norm 1 = L*alpha
    M2 = np.array([[0.0, 0.0], [0.4, 0.6]])  # stage 2, norm < 1
    # transition along the chain is M2 @ M1, norm 0.4 <= L*alpha^2 = 0.5;
    # the reversed product has norm > 0.7 and would fail
    assert np.linalg.norm(M2 @ M1, 2) < 0.5 < np.linalg.norm(M1 @ M2, 2)
    result = check_stability_tree(tree, {1: M1, 2: M2}, L, alpha)
    assert result.passed


# ---------------------------------------------------------------------------
# certificates


def test_stabilizability_decoupled_pass():
    nd = nd_scalar(A=0.5, B=0.0)
    tree = uniform_binary_tree(nd, 2)
    cert = GainCertificate(
        K={n: np.zeros((1, 1)) for n in range(tree.node_count)},
        L=1.0,
        alpha=0.5,
    )
    check = check_stabilizability(tree, cert)
    assert check.passed
    assert check.stability.worst_ratio <= 1.0 + 1e-9


def test_stabilizability_flags_oversized_gain():
    nd = nd_scalar(A=0.5, B=0.0)
    tree = uniform_binary_tree(nd, 1)
    cert = GainCertificate(
        K={n: np.array([[2.0]]) for n in range(tree.node_count)},
        L=1.0,
        alpha=0.5,
    )
    check = check_stabilizability(tree, cert)
    assert not check.passed
    assert "gain bound violated" in check.message


def test_stabilizability_requires_gains_on_early_stages():
    nd = nd_scalar(A=0.5, B=0.0)
    tree = uniform_binary_tree(nd, 1)
    cert = GainCertificate(K={}, L=1.0, alpha=0.5)
    with pytest.raises(TreeError, match="missing gain"):
        check_stabilizability(tree, cert)


def test_stabilizability_uses_parent_gain():
    # A = 1, B = 1; only K = 0.5 at every node keeps A - B K = 0.5 stable
    nd = nd_scalar(A=1.0, B=1.0)
    tree = uniform_binary_tree(nd, 2)
    K = {n: np.array([[0.5]]) for n in range(tree.node_count)}
    check = check_stabilizability(tree, GainCertificate(K, 1.0, 0.5))
    assert check.passed
    K_bad = {n: np.array([[0.0]]) for n in range(tree.node_count)}
    check = check_stabilizability(tree, GainCertificate(K_bad, 1.0, 0.5))
    assert not check.passed


def test_detectability_decoupled_pass():
    nd = nd_scalar(A=0.5, B=0.0, Q=1.0)
    tree = uniform_binary_tree(nd, 2)
    cert = GainCertificate(
        K={n: np.zeros((1, 1)) for n in range(tree.node_count)},
        L=1.0,
        alpha=0.5,
        role="detectability",
    )
    check = check_detectability(tree, cert)
    assert check.passed


def test_detectability_rejects_indefinite_cost():
    bad = NodeData(
        A=[[0.5]], B=[[0.0]], d=[0.0], Q=[[-0.1]], R=[[1.0]], q=[0.0], r=[0.0]
    )
    tree = build_tree_stagewise([[(bad, 1.0)], [(bad, 1.0)]])
    cert = GainCertificate(
        K={n: np.zeros((1, 1)) for n in range(2)},
        L=1.0,
        alpha=0.5,
        role="detectability",
    )
    with pytest.raises(TreeError, match="Q not PSD"):
        check_detectability(tree, cert)


def test_detectability_uses_parent_observation_map():
    # root Q = 4 so C_root = 2; node 1 closes A - K*C = 1 - 0.25*2 = 0.5
    root = nd_scalar(A=1.0, B=0.0, Q=4.0)
    child = nd_scalar(A=1.0, B=0.0, Q=4.0)
    tree = build_tree_stagewise([[(root, 1.0)], [(child, 1.0)]])
    cert = GainCertificate(
        K={1: np.array([[0.25]])}, L=1.0, alpha=0.5, role="detectability"
    )
    check = check_detectability(tree, cert)
    assert check.passed
    assert check.stability.worst_ratio == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------------------
# psd_sqrt


def test_psd_sqrt_squares_back():
    rng = np.random.default_rng(62)
    M = rng.standard_normal((4, 4))
    Q = M @ M.T
    S = psd_sqrt(Q)
    assert_allclose(S @ S, Q, atol=1e-10)
    assert_allclose(S, S.T, atol=0)


def test_psd_sqrt_clamps_drift():
    Q = np.diag([1.0, -5e-11])
    S = psd_sqrt(Q)
    assert_allclose(S, np.diag([1.0, 0.0]), atol=1e-8)


def test_psd_sqrt_rejects_indefinite():
    with pytest.raises(TreeError, match="not PSD"):
        psd_sqrt(np.diag([1.0, -0.1]))


# ---------------------------------------------------------------------------
# perturbation margin


def test_margin_direct_values():
    assert perturbation_margin(1.0, 0.25) == pytest.approx(0.25, abs=1e-15)
    assert perturbation_margin(2.0, 0.25) == pytest.approx(0.125, abs=1e-15)


def test_margin_vanishes_toward_one():
    grid = [0.5, 0.7, 0.9, 0.99, 0.999]
    vals = [perturbation_margin(1.0, a) for a in grid]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 0.02


def test_margin_rejects_bad_alpha():
    with pytest.raises(ValueError):
        perturbation_margin(1.0, 1.0)


# ---------------------------------------------------------------------------
# verify_perturbed_stability


def orthogonal(rng, n):
    M = rng.standard_normal((n, n))
    Qm, Rm = np.linalg.qr(M)
    return Qm * np.sign(np.diag(Rm))


def test_perturbed_zero_deviation_passes():
    tree = uniform_binary_tree(nd_scalar(), 3)
    dev = {n: np.zeros((2, 2)) for n in range(1, tree.node_count)}
    out = verify_perturbed_stability(0.5 * np.eye(2), tree, dev, 1.0, 0.5)
    assert out.status == "pass"


def test_perturbed_oversized_deviation_is_precondition_error():
    tree = uniform_binary_tree(nd_scalar(), 2)
    delta = perturbation_margin(1.0, 0.5)
    dev = {n: np.zeros((2, 2)) for n in range(1, tree.node_count)}
    dev[1] = 1.5 * delta * np.eye(2)
    out = verify_perturbed_stability(0.5 * np.eye(2), tree, dev, 1.0, 0.5)
    assert out.status == "precondition_violated"
    assert "margin" in out.message


def test_perturbed_unstable_nominal_is_precondition_error():
    tree = uniform_binary_tree(nd_scalar(), 2)
    dev = {n: np.zeros((2, 2)) for n in range(1, tree.node_count)}
    out = verify_perturbed_stability(1.1 * np.eye(2), tree, dev, 1.0, 0.5)
    assert out.status == "precondition_violated"
    assert "nominal" in out.message


@pytest.mark.parametrize("trial", range(10))
def test_perturbed_random_deviations_within_margin_pass(trial):
    rng = np.random.default_rng(1000 + trial)
    alpha, L = 0.4, 1.0
    tree = uniform_binary_tree(nd_scalar(), 3)
    Phi = alpha * orthogonal(rng, 3)
    delta = perturbation_margin(L, alpha)
    dev = {}
    for n in range(1, tree.node_count):
        raw = rng.standard_normal((3, 3))
        dev[n] = raw * (delta * rng.uniform(0.0, 1.0) / np.linalg.norm(raw, 2))
    out = verify_perturbed_stability(Phi, tree, dev, L, alpha)
    assert out.status == "pass"
