"""Stability certificates, perturbation margins, and derived constants.

Uniform tree stability asks that every ancestor-to-descendant transition
product contract like ``L * alpha**dt``; stabilizability and
detectability phrase the same decay for gain-corrected dynamics.  From
the triple (L, alpha, gamma) a chain of conditioning constants follows,
ending in the decay rate ``rho``, the horizon threshold ``W_bar``, and
the regret prefactors c5..c7.

The chain is numerically delicate: ``rho`` sits within an ulp of 1 for
realistic parameters, so every formula here is written against stable
complements (1-rho, 1-sqrt(rho), ...) computed without cancellation.
Values that genuinely exceed double range are reported as ``inf``, which
keeps every downstream inequality a valid (if useless) upper bound.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .tree import TreeError

GAIN_TOL = 1e-10
STAB_TOL = 1e-9
PSD_TOL = 1e-10


@dataclass(frozen=True)
class ConstantsBundle:
    """Every derived constant for one (L, alpha, gamma) triple.

    ``rho`` is the float rounding of the true rate and may equal 1.0;
    the strictly positive complements ``one_minus_rho`` and friends are
    the authoritative witnesses that the true rate lies inside (0, 1),
    and are what the constant formulas were evaluated with.
    """

    L: float
    alpha: float
    gamma: float
    L_H: float
    gamma_F: float
    gamma_G: float
    mu_bar: float
    gamma_H: float
    rho: float
    one_minus_rho: float
    one_minus_sqrt_rho: float
    one_minus_rho2: float
    c1: float
    W_bar: float
    W_bar_ceil: float
    c2: float
    c3: float
    c4: float
    c5: float
    c6: float
    c7: float
    D: float
    w_bar_norm: float


class StabilityResult(NamedTuple):
    passed: bool
    worst_pair: Optional[tuple]
    worst_ratio: float


@dataclass(frozen=True)
class CertificateCheck:
    passed: bool
    message: str
    stability: Optional[StabilityResult]


@dataclass(frozen=True)
class PerturbationCheck:
    status: str  # "pass", "fail", or "precondition_violated"
    message: str
    stability: Optional[StabilityResult]


@dataclass(frozen=True)
class GainCertificate:
    """Per-node gains keyed by node index, with the claimed (L, alpha)."""

    K: dict
    L: float
    alpha: float
    role: str = "stabilizability"


def _inv(x):
    return math.inf if x == 0.0 else 1.0 / x


def perturbation_margin(L, alpha):
    """Allowed per-node deviation (sqrt(alpha) - alpha) / L."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if L < 1.0:
        raise ValueError(f"L must be >= 1, got {L}")
    return (math.sqrt(alpha) - alpha) / L


def _stage_moments(tree):
    """Exact per-stage conditional second moments of the perturbations.

    Returns the list over stages t of E[||p_t||^2 | root], enumerated as
    sum over stage-t nodes of pi_j * ||p_j||^2 (the unshifted p).
    """
    out = []
    for t in range(tree.horizon + 1):
        out.append(
            math.fsum(
                tree.pi[j] * float(tree.data[j].p @ tree.data[j].p)
                for j in tree.stage_nodes(t)
            )
        )
    return out


def compute_constants(L, alpha, gamma, tree=None, w_prev=None):
    """Evaluate the full constant chain for (L, alpha, gamma).

    ``L`` is raised to at least 1 and ``gamma`` capped at 1 (with a
    warning) before use.  When a tree is given, ``D`` is the largest
    per-stage root-conditional second-moment root of the perturbations,
    enumerated exactly; ``w_bar_norm`` records the committed pair's norm
    when one is given.  ``W_bar`` is reported raw and ceiled.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if L <= 0.0 or not math.isfinite(L):
        raise ValueError(f"L must be positive and finite, got {L}")
    if gamma <= 0.0 or not math.isfinite(gamma):
        raise ValueError(f"gamma must be positive and finite, got {gamma}")
    Ln, gn = max(L, 1.0), min(gamma, 1.0)
    if Ln != L or gn != gamma:
        warnings.warn(
            f"normalized (L, gamma) from ({L}, {gamma}) to ({Ln}, {gn})",
            RuntimeWarning,
            stacklevel=2,
        )
    L, gamma = Ln, gn

    L_H = 2.0 * L + 1.0
    gamma_F = (1.0 - alpha) ** 2 / ((1.0 + L) ** 2 * L**2)
    gamma_G = gamma * (1.0 - alpha) ** 2 / (2.0 * (1.0 + L) ** 2 * L**4)
    mu_bar = (2.0 * L_H * L_H / gamma_G + gamma_G + L_H) / gamma_F
    gamma_H = 1.0 / (
        2.0 / gamma_G
        + (1.0 + 4.0 * L_H / gamma_G + 4.0 * L_H * L_H / (gamma_G * gamma_G))
        * L_H
        * (1.0 + mu_bar * L_H)
        / gamma_F
        + mu_bar
    )

    # rho^2 = (1 - x) / (1 + x) with x = (gamma_H / L_H)^2; all "one minus"
    # quantities flow from x without cancellation
    x = (gamma_H / L_H) ** 2
    om_rho2 = 2.0 * x / (1.0 + x)  # 1 - rho^2
    rho = math.sqrt(max(0.0, 1.0 - om_rho2))
    om_rho = om_rho2 / (1.0 + rho)  # 1 - rho
    sqrt_rho = math.sqrt(rho)
    om_sqrt_rho = om_rho / (1.0 + sqrt_rho)  # 1 - sqrt(rho)
    om_rho32 = om_rho + rho * om_sqrt_rho  # 1 - rho^(3/2)

    c1 = L_H * _inv(gamma_H * gamma_H * rho)

    if math.isfinite(c1) and om_rho > 0.0:
        num = (math.sqrt(alpha) - alpha) / (4.0 * c1 * c1 * L * L * L)
        W_bar = math.log(num) / (2.0 * math.log1p(-om_rho)) if num > 0 else math.inf
    else:
        W_bar = math.inf
    W_bar_ceil = float(math.ceil(W_bar)) if math.isfinite(W_bar) else math.inf

    def chain(c1):
        c1sq = c1 * c1
        c2 = 2.0 * c1sq * L * _inv(rho * om_rho32)
        c3 = 4.0 * c1sq * L * (2.0 * c2 * L * _inv(om_sqrt_rho) + _inv(om_rho))
        c4 = 8.0 * c1sq * c2 * L * L * L
        if not all(map(math.isfinite, (c2, c3, c4))):
            return c2, c3, c4, math.inf, math.inf, math.inf
        c5 = c3 * (
            2.0 * c2 * L * _inv(om_sqrt_rho) + c3 * L / 2.0 + 1.0
        ) + (2.0 * c1sq * c3 * L * L * _inv(om_rho2)) * (
            -1.0
            + 2.0 * c3 * L
            + 4.0 * _inv(om_rho)
            + 8.0 * c2 * L * _inv(om_sqrt_rho)
        )
        c6 = _inv(om_sqrt_rho) * (
            2.0 * c2 * c4 * L * _inv(om_sqrt_rho)
            + c3 * c4 * L
            + c4
            + 2.0 * c2 * c3 * L * L
            + (2.0 * c1sq * L * L * _inv(om_rho2))
            * (
                -c4
                + 2.0 * c3 * c4 * L
                + 4.0 * c4 * _inv(om_rho)
                + 8.0 * c2 * c4 * L * _inv(om_sqrt_rho)
                + 2.0 * c3 * L * (4.0 * c2 * L + c4)
            )
        )
        c7 = _inv(om_rho) * (
            c4 * (2.0 * c2 * L * L + c4 * L / 2.0)
            + 4.0 * c1sq * c4 * L * L * L * (4.0 * c2 * L + c4) * _inv(om_rho2)
        )
        return c2, c3, c4, c5, c6, c7

    if math.isfinite(c1):
        c2, c3, c4, c5, c6, c7 = chain(c1)
    else:
        c2 = c3 = c4 = c5 = c6 = c7 = math.inf

    D = math.nan
    if tree is not None:
        D = math.sqrt(max(_stage_moments(tree)))
    w_bar_norm = math.nan
    if w_prev is not None:
        if hasattr(w_prev, "w"):
            stacked = w_prev.w
        else:
            stacked = np.concatenate(
                [np.asarray(w_prev[0], float), np.asarray(w_prev[1], float)]
            )
        w_bar_norm = float(np.linalg.norm(stacked))

    return ConstantsBundle(
        L=L,
        alpha=alpha,
        gamma=gamma,
        L_H=L_H,
        gamma_F=gamma_F,
        gamma_G=gamma_G,
        mu_bar=mu_bar,
        gamma_H=gamma_H,
        rho=rho,
        one_minus_rho=om_rho,
        one_minus_sqrt_rho=om_sqrt_rho,
        one_minus_rho2=om_rho2,
        c1=c1,
        W_bar=W_bar,
        W_bar_ceil=W_bar_ceil,
        c2=c2,
        c3=c3,
        c4=c4,
        c5=c5,
        c6=c6,
        c7=c7,
        D=D,
        w_bar_norm=w_bar_norm,
    )


def check_stability_tree(tree, Phi, L, alpha):
    """Exhaustive ancestor-descendant path-product stability check.

    ``Phi`` maps every node of stage >= 1 to its transition matrix.  For
    each strict ancestor-descendant pair (i, j) the product of matrices
    along the path (excluding i's stage, including j's) must satisfy
    ``||prod|| <= L * alpha**(t(j)-t(i))`` within relative 1e-9.  Exact
    enumeration; cost grows with (#nodes x depth), intended for desk
    scale.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    worst_ratio, worst_pair = 0.0, None
    for j in range(tree.node_count):
        if tree.stage[j] < 1:
            continue
        if j not in Phi:
            raise TreeError(f"missing transition matrix for node {j}")
        M = np.asarray(Phi[j], dtype=float)
        node = j
        dt = 1
        while True:
            anc = int(tree.parent[node])
            ratio = float(np.linalg.norm(M, 2)) / (L * alpha**dt)
            if ratio > worst_ratio:
                worst_ratio, worst_pair = ratio, (anc, j)
            if anc == 0 or tree.parent[anc] < 0:
                break
            M = M @ np.asarray(Phi[anc], dtype=float)
            node = anc
            dt += 1
    return StabilityResult(worst_ratio <= 1.0 + STAB_TOL, worst_pair, worst_ratio)


def _check_gain_bounds(cert, stages, tree):
    for n in range(tree.node_count):
        if int(tree.stage[n]) not in stages:
            continue
        if n not in cert.K:
            raise TreeError(f"missing gain for node {n}")
        norm = float(np.linalg.norm(np.asarray(cert.K[n], float), 2))
        if norm > cert.L + GAIN_TOL:
            return f"gain bound violated: node {n} has ||K|| = {norm:.6g} > L = {cert.L:.6g}"
    return None


def check_stabilizability(tree, cert, L=None, alpha=None):
    """Verify a stabilizability certificate by exhaustive path products.

    Gains live on stages 0..T-1; node i's closed transition is
    ``A_i - B_i K_{a(i)}``.  Fails (without raising) when a gain exceeds
    the claimed L or when some path product violates the decay.
    """
    L = cert.L if L is None else L
    alpha = cert.alpha if alpha is None else alpha
    msg = _check_gain_bounds(cert, range(0, tree.horizon), tree)
    if msg is not None:
        return CertificateCheck(False, msg, None)
    Phi = {}
    for n in range(1, tree.node_count):
        if tree.stage[n] < 1:
            continue
        nd = tree.data[n]
        par = int(tree.parent[n])
        Phi[n] = nd.A - nd.B @ np.asarray(cert.K[par], float)
    result = check_stability_tree(tree, Phi, L, alpha)
    msg = "" if result.passed else (
        f"path product at pair {result.worst_pair} exceeds bound by factor "
        f"{result.worst_ratio:.6g}"
    )
    return CertificateCheck(result.passed, msg, result)


def psd_sqrt(M, name="Q", tol=PSD_TOL):
    """Principal square root of a PSD matrix, with drift clamping.

    Eigenvalues in [-tol, 0) are clamped to zero; anything lower raises
    (the square root is undefined for genuinely indefinite input).
    """
    M = np.asarray(M, dtype=float)
    vals, vecs = np.linalg.eigh(0.5 * (M + M.T))
    if vals.min() < -tol:
        raise TreeError(
            f"{name} not PSD: smallest eigenvalue {vals.min():.6g}"
        )
    root = (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T
    return 0.5 * (root + root.T)


def check_detectability(tree, cert, L=None, alpha=None):
    """Verify a detectability certificate by exhaustive path products.

    Gains live on stages 1..T; node i's closed transition is
    ``A_i - K_i C_{a(i)}`` with C the principal square root of the
    parent's Q.
    """
    L = cert.L if L is None else L
    alpha = cert.alpha if alpha is None else alpha
    msg = _check_gain_bounds(cert, range(1, tree.horizon + 1), tree)
    if msg is not None:
        return CertificateCheck(False, msg, None)
    C = {n: psd_sqrt(tree.data[n].Q) for n in range(tree.node_count)}
    Phi = {}
    for n in range(1, tree.node_count):
        if tree.stage[n] < 1:
            continue
        par = int(tree.parent[n])
        Phi[n] = tree.data[n].A - np.asarray(cert.K[n], float) @ C[par]
    result = check_stability_tree(tree, Phi, L, alpha)
    msg = "" if result.passed else (
        f"path product at pair {result.worst_pair} exceeds bound by factor "
        f"{result.worst_ratio:.6g}"
    )
    return CertificateCheck(result.passed, msg, result)


def verify_perturbed_stability(Phi_nominal, tree, deviations, L, alpha):
    """Margin soundness check: nominal decay plus bounded deviations.

    Preconditions: the single nominal matrix is (L, alpha)-stable over
    powers 0..T, and every per-node deviation has norm at most
    ``perturbation_margin(L, alpha)``.  When they hold, the per-node
    transitions ``Phi_nominal + deviation`` must pass the tree stability
    check at the weakened rate (L, sqrt(alpha)); a precondition failure
    is reported distinctly from a stability failure.
    """
    Phi_nominal = np.asarray(Phi_nominal, dtype=float)
    T = tree.horizon
    P = np.eye(Phi_nominal.shape[0])
    for t in range(T + 1):
        bound = L * alpha**t
        norm = float(np.linalg.norm(P, 2))
        if norm > bound * (1.0 + STAB_TOL):
            return PerturbationCheck(
                "precondition_violated",
                f"nominal matrix is not (L, alpha)-stable: ||Phi^{t}|| = "
                f"{norm:.6g} > {bound:.6g}",
                None,
            )
        P = P @ Phi_nominal
    delta = perturbation_margin(L, alpha)
    for n in range(1, tree.node_count):
        dev = np.asarray(deviations[n], dtype=float)
        norm = float(np.linalg.norm(dev, 2))
        if norm > delta * (1.0 + STAB_TOL):
            return PerturbationCheck(
                "precondition_violated",
                f"deviation at node {n} has norm {norm:.6g} > margin {delta:.6g}",
                None,
            )
    Phi = {
        n: Phi_nominal + np.asarray(deviations[n], dtype=float)
        for n in range(1, tree.node_count)
    }
    result = check_stability_tree(tree, Phi, L, math.sqrt(alpha))
    status = "pass" if result.passed else "fail"
    msg = "" if result.passed else (
        f"perturbed path product at {result.worst_pair} exceeds the "
        f"(L, sqrt(alpha)) bound by factor {result.worst_ratio:.6g}"
    )
    return PerturbationCheck(status, msg, result)
