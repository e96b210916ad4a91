"""Finite-support scenario trees: data model, builders, structural queries.

A scenario tree is a rooted tree whose nodes carry linear-quadratic problem
data and strictly positive probabilities.  The root has probability one,
every leaf sits at the final stage, the probability of an interior node
equals the sum over its children, and node indices follow breadth-first
order from the root.  That ordering fixes the layout of every stacked
vector and matrix built downstream, so it is part of the contract.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PROB_TOL = 1e-12
SYM_TOL = 1e-12


class TreeError(ValueError):
    """Inconsistent tree input.  Carries the full validation report."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


def _matrix(value, shape, name):
    arr = np.array(value, dtype=float)
    if arr.shape != shape:
        raise TreeError(f"{name}: expected shape {shape}, got {arr.shape}")
    return arr


@dataclass(frozen=True)
class NodeData:
    """Per-node problem data.

    ``A, B, d`` define the transition into this node from its parent's
    state-control pair, ``x = A x_parent + B u_parent + d``.  ``Q, R, q, r``
    define the node's stage cost ``0.5 x'Qx + 0.5 u'Ru - q'x - r'u``.
    """

    A: np.ndarray
    B: np.ndarray
    d: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    q: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        for name in ("A", "B", "d", "Q", "R", "q", "r"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        nx, nu = self.nx, self.nu
        if self.A.shape != (nx, nx) or self.B.shape != (nx, nu):
            raise TreeError("A/B dimension mismatch")
        if self.Q.shape != (nx, nx) or self.R.shape != (nu, nu):
            raise TreeError("Q/R dimension mismatch")
        if self.q.shape != (nx,) or self.d.shape != (nx,) or self.r.shape != (nu,):
            raise TreeError("q/r/d dimension mismatch")

    @property
    def nx(self):
        return self.d.shape[0]

    @property
    def nu(self):
        return self.r.shape[0] if self.r.ndim == 1 else self.R.shape[0]

    @property
    def p(self):
        """Stacked perturbation vector (q, r, d) driving the solution maps."""
        return np.concatenate([self.q, self.r, self.d])

    def symmetry_defect(self):
        """Relative asymmetry of Q and R (0 for exactly symmetric data)."""
        out = 0.0
        for M in (self.Q, self.R):
            scale = max(1.0, float(np.linalg.norm(M, 2)))
            out = max(out, float(np.linalg.norm(M - M.T, 2)) / scale)
        return out


@dataclass(frozen=True)
class InitialCondition:
    """State-control pair committed before the root stage."""

    x_prev: np.ndarray
    u_prev: np.ndarray

    def __post_init__(self):
        for name in ("x_prev", "u_prev"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def zero(cls, nx, nu):
        return cls(np.zeros(nx), np.zeros(nu))

    @property
    def w(self):
        return np.concatenate([self.x_prev, self.u_prev])

    def check(self, tree):
        if self.x_prev.shape != (tree.nx,) or self.u_prev.shape != (tree.nu,):
            raise TreeError(
                f"initial condition dims ({self.x_prev.shape[0]}, "
                f"{self.u_prev.shape[0]}) do not match tree ({tree.nx}, {tree.nu})"
            )


@dataclass(frozen=True)
class ScenarioTree:
    """Immutable scenario tree in breadth-first node order.

    ``parent[0] == -1`` marks the root.  ``children``, ``horizon`` and the
    per-stage node lists are derived at construction.  Invariants are not
    enforced here; builders call :func:`validate_tree` and raise, while this
    constructor stays usable for assembling deliberately broken fixtures.
    """

    parent: np.ndarray
    stage: np.ndarray
    pi: np.ndarray
    data: tuple
    children: tuple = field(init=False)
    horizon: int = field(init=False)

    def __post_init__(self):
        parent = np.array(self.parent, dtype=int)
        stage = np.array(self.stage, dtype=int)
        pi = np.array(self.pi, dtype=float)
        for arr in (parent, stage, pi):
            arr.setflags(write=False)
        object.__setattr__(self, "parent", parent)
        object.__setattr__(self, "stage", stage)
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "data", tuple(self.data))
        kids = [[] for _ in range(len(parent))]
        for i in range(1, len(parent)):
            p = int(parent[i])
            if 0 <= p < len(parent):
                kids[p].append(i)
        object.__setattr__(self, "children", tuple(tuple(k) for k in kids))
        object.__setattr__(self, "horizon", int(stage.max()) if len(stage) else 0)
        by_stage = [[] for _ in range(self.horizon + 1)]
        for i in range(len(parent)):
            t = int(stage[i])
            if 0 <= t <= self.horizon:
                by_stage[t].append(i)
        object.__setattr__(self, "_by_stage", tuple(tuple(s) for s in by_stage))

    @property
    def node_count(self):
        return len(self.parent)

    @property
    def nx(self):
        return self.data[0].nx

    @property
    def nu(self):
        return self.data[0].nu

    def stage_nodes(self, t):
        """Nodes at stage t, in index (breadth-first) order."""
        return list(self._by_stage[t])

    def leaves(self):
        return [i for i in range(self.node_count) if not self.children[i]]

    def ancestry(self, j):
        """Path from the root to j, inclusive."""
        path = [j]
        while self.parent[path[-1]] >= 0:
            path.append(int(self.parent[path[-1]]))
        return path[::-1]

    def is_ancestor(self, k, j):
        """True when k lies on the root path of j (every node is its own ancestor)."""
        node = j
        while node >= 0:
            if node == k:
                return True
            node = int(self.parent[node])
        return False

    def descendants(self, k):
        """All strict descendants of k, breadth-first."""
        out, frontier = [], [k]
        while frontier:
            nxt = [c for f in frontier for c in self.children[f]]
            out.extend(nxt)
            frontier = nxt
        return out


@dataclass
class ValidationReport:
    violations: list

    @property
    def ok(self):
        return not self.violations

    def __str__(self):
        return "valid" if self.ok else "; ".join(self.violations)


def validate_tree(tree):
    """Check every structural invariant and report all violations.

    Returns a :class:`ValidationReport`; the report is empty exactly when
    the tree is a valid stage-``horizon`` scenario tree in breadth-first
    order with consistent probabilities and symmetric cost data.
    """
    v = []
    n = tree.node_count
    if n == 0:
        return ValidationReport(["empty tree"])
    if tree.parent[0] != -1:
        v.append("node 0 is not a root (parent != -1)")
    for i in range(1, n):
        p = int(tree.parent[i])
        if p == -1:
            v.append(f"node {i}: multiple roots")
        elif not 0 <= p < i:
            v.append(f"node {i}: parent {p} does not precede child")
    if tree.stage[0] != 0:
        v.append("root stage != 0")
    for i in range(1, n):
        p = int(tree.parent[i])
        if 0 <= p < n and tree.stage[i] != tree.stage[p] + 1:
            v.append(f"node {i}: stage {tree.stage[i]} != parent stage + 1")
        if tree.stage[i] < tree.stage[i - 1]:
            v.append(f"node {i}: order not breadth-first (stage decreases)")
    if abs(tree.pi[0] - 1.0) > PROB_TOL:
        v.append(f"root probability {tree.pi[0]:.12g} != 1")
    for i in range(n):
        if tree.pi[i] <= 0:
            v.append(f"node {i}: probability {tree.pi[i]:.12g} <= 0")
    T = tree.horizon
    for i in range(n):
        kids = tree.children[i]
        if kids:
            s = float(sum(tree.pi[c] for c in kids))
            if abs(s - tree.pi[i]) > PROB_TOL:
                v.append(
                    f"node {i}: children sum {s:.12g} != parent probability "
                    f"{tree.pi[i]:.12g}"
                )
        elif tree.stage[i] != T:
            v.append(f"node {i}: leaf at wrong stage {tree.stage[i]} (expected {T})")
    nx, nu = tree.nx, tree.nu
    for i, nd in enumerate(tree.data):
        if nd.nx != nx or nd.nu != nu:
            v.append(f"node {i}: data dims ({nd.nx}, {nd.nu}) != ({nx}, {nu})")
        elif nd.symmetry_defect() > SYM_TOL:
            v.append(f"node {i}: Q or R not symmetric within {SYM_TOL:g}")
    return ValidationReport(v)


def _checked(tree):
    report = validate_tree(tree)
    if not report.ok:
        raise TreeError(str(report), report)
    return tree


def build_tree_stagewise(per_stage_outcomes):
    """Product tree for stagewise-independent uncertainty.

    Parameters
    ----------
    per_stage_outcomes : list over stages 0..T of lists of (NodeData, prob)
        Stage 0 must hold exactly one outcome (the root realization is
        observed); each later stage's probabilities must be positive and
        sum to one within 1e-12.

    Returns
    -------
    ScenarioTree whose node probability is the product of branch
    probabilities along its root path.
    """
    if not per_stage_outcomes:
        raise TreeError("empty stage list")
    if len(per_stage_outcomes[0]) != 1:
        raise TreeError(
            f"stage 0 must have exactly one outcome, got {len(per_stage_outcomes[0])}"
        )
    for t, outcomes in enumerate(per_stage_outcomes):
        if not outcomes:
            raise TreeError(f"stage {t}: no outcomes")
        s = float(sum(prob for _, prob in outcomes))
        if any(prob <= 0 for _, prob in outcomes):
            raise TreeError(f"stage {t}: nonpositive outcome probability")
        if abs(s - 1.0) > PROB_TOL:
            raise TreeError(f"stage {t}: outcome probabilities sum {s:.12g} != 1")
    parents, stages, pis, payload = [-1], [0], [1.0], [per_stage_outcomes[0][0][0]]
    prev_level = [0]
    for t in range(1, len(per_stage_outcomes)):
        level = []
        for node in prev_level:
            for nd, prob in per_stage_outcomes[t]:
                idx = len(parents)
                parents.append(node)
                stages.append(t)
                pis.append(pis[node] * prob)
                payload.append(nd)
                level.append(idx)
        prev_level = level
    return _checked(ScenarioTree(parents, stages, pis, payload))


def build_tree_explicit(parents, stage_labels, probabilities, node_data):
    """General tree from parallel arrays in breadth-first order.

    Covers arbitrary dependence structures (for example Markov-modulated
    data) that the stagewise product builder cannot express.  Parent
    indices must precede their children; all invariants are validated and
    a :class:`TreeError` carrying the report is raised on any violation.
    """
    n = len(parents)
    if not (len(stage_labels) == len(probabilities) == len(node_data) == n):
        raise TreeError("parents/stages/probs/nodes arrays have mismatched lengths")
    if n == 0:
        raise TreeError("empty tree")
    return _checked(ScenarioTree(parents, stage_labels, probabilities, node_data))


def conditional_prob(tree, j, k):
    """Probability of reaching j conditioned on having reached ancestor k."""
    if not tree.is_ancestor(k, j):
        raise TreeError(f"node {k} is not an ancestor of node {j}")
    return float(tree.pi[j] / tree.pi[k])


def subtree_nodes(tree, k, W):
    """Nodes of the depth-W subtree rooted at k, breadth-first.

    The window is capped at the final stage, so the effective depth is
    ``min(W, horizon - stage(k))``.
    """
    if not 0 <= k < tree.node_count:
        raise TreeError(f"node {k} out of range")
    if W < 0:
        raise TreeError("window W must be >= 0")
    out, frontier = [k], [k]
    for _ in range(min(W, tree.horizon - int(tree.stage[k]))):
        frontier = [c for f in frontier for c in tree.children[f]]
        out.extend(frontier)
    return out
