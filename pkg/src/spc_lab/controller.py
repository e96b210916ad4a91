"""Receding-horizon control on scenario trees, baselines, and regret.

The policy solves a depth-W subtree problem at every node, commits only
that node's state-control pair, and hands the commitment to the node's
children as their initial condition.  A full-horizon solve, a
here-and-now baseline (stagewise controls, no recourse), and an
anticipative baseline (per-scenario clairvoyant plans) bracket the
policy's performance; closed-loop recursion matrices express the
commitments as a linear system driven by the perturbations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .kkt import (
    PolicySolution,
    ScaledKKT,
    SingularKKTError,
    SolverError,
    solution_map_rows,
    solve_extensive,
    stage_cost,
)
from .norms import BlockMatrix
from .tree import ScenarioTree, TreeError, subtree_nodes


def _pair(w_prev, nx, nu):
    if hasattr(w_prev, "x_prev"):
        x, u = w_prev.x_prev, w_prev.u_prev
    else:
        x, u = w_prev
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape != (nx,) or u.shape != (nu,):
        raise TreeError(
            f"committed pair dims ({x.shape}, {u.shape}) do not match ({nx}, {nu})"
        )
    return x, u


@dataclass(frozen=True)
class ClosedLoopTrace:
    """Committed state-control pairs of one receding-horizon run."""

    tree: object
    W: int
    x: dict
    u: dict
    J_W: float
    w_prev_init: tuple

    def w(self, node):
        return np.concatenate([self.x[node], self.u[node]])


class SpcStep(NamedTuple):
    x: np.ndarray
    u: np.ndarray
    plan: PolicySolution


@dataclass(frozen=True)
class HereAndNowSolution:
    """Stagewise-control baseline: one control per stage, states per node."""

    tree: object
    x: dict
    v: dict  # stage -> shared control
    objective: float


@dataclass(frozen=True)
class AnticipativeSolution:
    """Clairvoyant baseline: optimal value of each scenario, averaged."""

    tree: object
    objective: float
    path_values: dict  # leaf -> optimal value along its scenario


def solve_optimal(tree, w_prev):
    """Full-horizon optimal decision tree from the root."""
    return solve_extensive(tree, 0, tree.horizon, w_prev)


def spc_step(tree, k, w_prev_committed, W):
    """One receding-horizon step: solve depth-W subproblem at k, commit k.

    Returns the committed pair and the whole subtree plan; the committed
    state is the dynamics-forced value, the control is the plan's first
    decision.
    """
    plan = solve_extensive(tree, k, W, w_prev_committed)
    return SpcStep(plan.x[k], plan.u[k], plan)


def run_spc(tree, w_prev_init, W):
    """Run the policy over the whole tree in breadth-first order.

    Every node's commitment is computed from its parent's committed pair;
    the reported performance is the exact probability-weighted cost of
    the committed pairs.  Solver failures are re-raised annotated with
    the failing node.
    """
    if W < 0:
        raise TreeError("window W must be >= 0")
    x_init, u_init = _pair(w_prev_init, tree.nx, tree.nu)
    x, u = {}, {}
    for k in range(tree.node_count):
        if k == 0:
            prev = (x_init, u_init)
        else:
            par = int(tree.parent[k])
            prev = (x[par], u[par])
        try:
            step = spc_step(tree, k, prev, W)
        except SolverError as exc:
            raise type(exc)(f"node {k}: {exc}") from exc
        x[k], u[k] = step.x, step.u
    J_W = math.fsum(
        tree.pi[k] * stage_cost(tree.data[k], x[k], u[k])
        for k in range(tree.node_count)
    )
    return ClosedLoopTrace(tree, int(W), x, u, J_W, (x_init, u_init))


def dynamic_regret(tree, w_prev, W):
    """Policy cost, optimal cost, and their difference.

    The difference must be nonnegative up to solver accuracy; a value
    below -1e-8 indicates a broken solve and raises.
    """
    J_W = run_spc(tree, w_prev, W).J_W
    J_star = solve_optimal(tree, w_prev).objective
    regret = J_W - J_star
    if regret < -1e-8:
        raise SolverError(
            f"policy cost undercuts the optimum: regret = {regret:.3e}"
        )
    return J_W, J_star, regret


# ---------------------------------------------------------------------------
# baselines


def solve_here_and_now(tree, w_prev):
    """Optimal cost with one shared control per stage (no recourse in u).

    States stay per-node; the stage control is shared by every node of
    that stage.  Assembled in the same scaled, symmetric KKT framework
    as the main solver: per-node scaled states and multipliers plus
    trailing unscaled shared controls.
    """
    nx, nu = tree.nx, tree.nu
    x_prev, u_prev = _pair(w_prev, nx, nu)
    n = tree.node_count
    T = tree.horizon
    dim = 2 * nx * n + nu * (T + 1)
    xoff = lambda i: 2 * nx * i
    yoff = lambda i: 2 * nx * i + nx
    voff = lambda t: 2 * nx * n + nu * t
    rows, cols, vals = [], [], []

    def put(r0, c0, blk):
        blk = np.asarray(blk)
        nz = np.nonzero(blk)
        rows.extend(r0 + nz[0])
        cols.extend(c0 + nz[1])
        vals.extend(blk[nz])

    rhs = np.zeros(dim)
    eye = np.eye(nx)
    Rsum = {t: np.zeros((nu, nu)) for t in range(T + 1)}
    rsum = {t: np.zeros(nu) for t in range(T + 1)}
    for i in range(n):
        nd = tree.data[i]
        s = math.sqrt(tree.pi[i])
        t = int(tree.stage[i])
        put(xoff(i), xoff(i), 0.5 * (nd.Q + nd.Q.T))
        put(xoff(i), yoff(i), eye)
        put(yoff(i), xoff(i), eye)
        rhs[xoff(i) : xoff(i) + nx] = s * nd.q
        d_eff = nd.d if i != 0 else nd.d + nd.A @ x_prev + nd.B @ u_prev
        rhs[yoff(i) : yoff(i) + nx] = s * d_eff
        Rsum[t] += tree.pi[i] * 0.5 * (nd.R + nd.R.T)
        rsum[t] += tree.pi[i] * nd.r
        if i != 0:
            par = int(tree.parent[i])
            ratio = math.sqrt(tree.pi[i] / tree.pi[par])
            put(yoff(i), xoff(par), -ratio * nd.A)
            put(xoff(par), yoff(i), -ratio * nd.A.T)
            Bsc = s * nd.B
            put(yoff(i), voff(t - 1), -Bsc)
            put(voff(t - 1), yoff(i), -Bsc.T)
    for t in range(T + 1):
        put(voff(t), voff(t), Rsum[t])
        rhs[voff(t) : voff(t) + nu] = rsum[t]
    H = sp.csc_matrix((vals, (rows, cols)), shape=(dim, dim))
    z = _solve_symmetric_sparse(H, rhs)
    x = {
        i: z[xoff(i) : xoff(i) + nx] / math.sqrt(tree.pi[i]) for i in range(n)
    }
    v = {t: z[voff(t) : voff(t) + nu] for t in range(T + 1)}
    objective = math.fsum(
        tree.pi[i] * stage_cost(tree.data[i], x[i], v[int(tree.stage[i])])
        for i in range(n)
    )
    return HereAndNowSolution(tree, x, v, objective)


def _solve_symmetric_sparse(H, rhs):
    """Shared solve path: factorize, refine once, enforce the residual
    contract.  Mirrors the main engine's behavior for ad-hoc systems."""
    import scipy.sparse.linalg as spla

    try:
        lu = spla.splu(H)
    except RuntimeError as exc:
        raise SingularKKTError(f"KKT factorization failed: {exc}") from exc
    diag = np.abs(lu.U.diagonal())
    worst = float(diag.min() / diag.max()) if diag.max() > 0 else 0.0
    if worst < 1e-12:
        raise SingularKKTError(
            f"KKT matrix numerically singular: relative pivot {worst:.3e}",
            pivot=worst,
        )
    z = lu.solve(rhs)
    z = z + lu.solve(rhs - H @ z)
    resid = float(np.linalg.norm(H @ z - rhs))
    if resid > 1e-8 * (1.0 + float(np.linalg.norm(rhs))):
        raise SolverError(f"KKT residual {resid:.3e} exceeds contract")
    return z


def _chain_tree(tree, path):
    """Deterministic single-scenario tree along one root-to-leaf path."""
    data = [tree.data[n] for n in path]
    return ScenarioTree(
        parent=[-1] + list(range(len(path) - 1)),
        stage=list(range(len(path))),
        pi=[1.0] * len(path),
        data=data,
    )


def solve_anticipative(tree, w_prev):
    """Clairvoyant baseline: per-scenario optimal values, probability mix.

    Each root-to-leaf path becomes a deterministic problem solved by the
    main engine; the objective is the probability-weighted sum of path
    optima.
    """
    x_prev, u_prev = _pair(w_prev, tree.nx, tree.nu)
    path_values = {}
    for leaf in tree.leaves():
        path = tree.ancestry(leaf)
        chain = _chain_tree(tree, path)
        sol = solve_extensive(chain, 0, chain.horizon, (x_prev, u_prev))
        path_values[leaf] = sol.objective
    objective = math.fsum(
        tree.pi[leaf] * val for leaf, val in path_values.items()
    )
    return AnticipativeSolution(tree, objective, path_values)


# ---------------------------------------------------------------------------
# closed-loop recursion machinery


@dataclass(frozen=True)
class RecursionMatrices:
    """Linear closed-loop description of the policy.

    ``Lambda[i]`` injects the parent's committed pair into node i's
    perturbation (zero rows for q and r, dynamics rows for d).  ``S[i]``
    is the first-row solution-map block times Lambda, the one-step
    transfer from the parent's commitment to node i's; ``S[0]`` transfers
    from the pre-root committed pair.  ``psi_rows[i]`` holds node i's
    solution-map row blocks over its depth-W subtree.
    """

    tree: object
    W: int
    Lambda: dict
    S: dict
    psi_rows: dict

    def stage_matrix(self, t):
        """S as a block matrix from stage t-1 commitments to stage t."""
        if t < 1 or t > self.tree.horizon:
            raise TreeError(f"stage {t} out of range for one-step transfer")
        rows = tuple(self.tree.stage_nodes(t))
        cols = tuple(self.tree.stage_nodes(t - 1))
        return BlockMatrix(
            self.tree,
            rows,
            cols,
            {(i, int(self.tree.parent[i])): self.S[i] for i in rows},
        )

    def psi_stage_matrix(self, t, tprime):
        """Stacked solution-map rows from stage-t' perturbations to the
        stage-t commitments; zero where t' is outside a node's window."""
        rows = tuple(self.tree.stage_nodes(t))
        cols = tuple(self.tree.stage_nodes(tprime))
        blocks = {}
        for i in rows:
            for j, blk in self.psi_rows[i].items():
                if int(self.tree.stage[j]) == tprime:
                    blocks[(i, j)] = blk
        return BlockMatrix(self.tree, rows, cols, blocks)

    def iterate(self, w_prev_init):
        """Drive the one-step recursion from the root; returns per-node
        committed pairs (equal to the receding-horizon run's)."""
        tree = self.tree
        x_init, u_init = _pair(w_prev_init, tree.nx, tree.nu)
        w = {}
        for k in range(tree.node_count):
            wpar = (
                np.concatenate([x_init, u_init])
                if k == 0
                else w[int(tree.parent[k])]
            )
            acc = self.S[k] @ wpar
            for j, blk in self.psi_rows[k].items():
                acc = acc + blk @ tree.data[j].p
            w[k] = acc
        return w


def _lambda_block(nd, nx, nu):
    out = np.zeros((2 * nx + nu, nx + nu))
    out[nx + nu :, :nx] = nd.A
    out[nx + nu :, nx:] = nd.B
    return out


def recursion_matrices(tree, W):
    """Build the one-step closed-loop transfer matrices for window W.

    For every node the local solution-map rows are extracted from one
    factorization of its subtree system; the parent-to-node transfer is
    the node's diagonal row block times the perturbation injection.
    """
    nx, nu = tree.nx, tree.nu
    Lambda, S, psi_rows = {}, {}, {}
    for k in range(tree.node_count):
        rows = solution_map_rows(tree, k, W, (k,), rows="w")
        psi_rows[k] = {j: blk for (i, j), blk in rows.items()}
        Lambda[k] = _lambda_block(tree.data[k], nx, nu)
        S[k] = psi_rows[k][k] @ Lambda[k]
    return RecursionMatrices(tree, int(W), Lambda, S, psi_rows)


def hypothetical_state(tree, trace):
    """Full-horizon re-solve of every node from its parent's commitment.

    Returns per-node stacked pairs: node k's value of the optimal plan
    for the remaining horizon, started from the policy's committed pair
    at k's parent (the run's initial pair for the root).
    """
    out = {}
    for k in range(tree.node_count):
        if k == 0:
            prev = trace.w_prev_init
        else:
            par = int(tree.parent[k])
            prev = (trace.x[par], trace.u[par])
        sol = solve_extensive(
            tree, k, tree.horizon - int(tree.stage[k]), prev
        )
        out[k] = sol.w(k)
    return out


def check_time_consistency(tree, k, j, w_prev=None):
    """Restriction-versus-resolve gap of full-horizon plans.

    Solves the remaining horizon from k (zero committed pair unless one
    is given), then re-solves from the strict descendant j starting at
    the first plan's commitment at j's parent.  Returns the largest
    entrywise difference between the two plans over j's subtree.
    """
    if j == k or not tree.is_ancestor(k, j):
        raise TreeError(f"node {j} is not a strict descendant of node {k}")
    if w_prev is None:
        w_prev = (np.zeros(tree.nx), np.zeros(tree.nu))
    full = solve_extensive(tree, k, tree.horizon - int(tree.stage[k]), w_prev)
    par = int(tree.parent[j])
    resolved = solve_extensive(
        tree,
        j,
        tree.horizon - int(tree.stage[j]),
        (full.x[par], full.u[par]),
    )
    gap = 0.0
    for n in resolved.nodes:
        gap = max(
            gap,
            float(np.max(np.abs(full.x[n] - resolved.x[n]), initial=0.0)),
            float(np.max(np.abs(full.u[n] - resolved.u[n]), initial=0.0)),
        )
    return gap
