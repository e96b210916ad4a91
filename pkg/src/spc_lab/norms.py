"""Probability-scaled norms over scenario-tree node sets.

The weighted vector norm ``sqrt(sum_i pi_i ||v_i||^2)`` and its induced
operator norm are the measuring sticks for every decay and performance
bound in this package.  Both matrix norms reduce to ordinary spectral
norms of rescaled dense matrices, which is how they are evaluated here:
problem sizes at norm-checking scale stay in the low thousands of rows,
so dense SVD is simple, deterministic, and accurate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tree import ScenarioTree, TreeError


def _offsets(nodes, dim):
    return {n: i * dim for i, n in enumerate(nodes)}


@dataclass(frozen=True)
class BlockVector:
    """Vector with one fixed-size block per node of a tree node set."""

    tree: ScenarioTree
    nodes: tuple
    blocks: dict

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        blocks = {}
        dim = None
        for n in self.nodes:
            if not 0 <= n < self.tree.node_count:
                raise TreeError(f"node {n} not in tree")
            b = np.array(self.blocks[n], dtype=float).ravel()
            if dim is None:
                dim = b.shape[0]
            elif b.shape[0] != dim:
                raise TreeError("block dimensions differ across nodes")
            b.setflags(write=False)
            blocks[n] = b
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "_dim", dim if dim is not None else 0)

    @property
    def dim(self):
        return self._dim

    def stacked(self):
        """Concatenation of blocks in node-set order."""
        if not self.nodes:
            return np.zeros(0)
        return np.concatenate([self.blocks[n] for n in self.nodes])

    @classmethod
    def from_stacked(cls, tree, nodes, flat, dim):
        flat = np.asarray(flat, dtype=float)
        blocks = {
            n: flat[i * dim : (i + 1) * dim] for i, n in enumerate(nodes)
        }
        return cls(tree, tuple(nodes), blocks)


@dataclass(frozen=True)
class BlockMatrix:
    """Sparse-by-blocks matrix between two tree node sets.

    ``blocks`` maps ``(row_node, col_node)`` to a dense block; missing
    pairs are zero.  All stored blocks share one shape.
    """

    tree: ScenarioTree
    row_nodes: tuple
    col_nodes: tuple
    blocks: dict
    shape_block: tuple = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "row_nodes", tuple(self.row_nodes))
        object.__setattr__(self, "col_nodes", tuple(self.col_nodes))
        rows, cols = set(self.row_nodes), set(self.col_nodes)
        blocks = {}
        shape = None
        for (i, j), blk in self.blocks.items():
            if i not in rows or j not in cols:
                raise TreeError(f"block ({i}, {j}) outside declared node sets")
            b = np.atleast_2d(np.array(blk, dtype=float))
            if shape is None:
                shape = b.shape
            elif b.shape != shape:
                raise TreeError("stored blocks have differing shapes")
            b.setflags(write=False)
            blocks[(i, j)] = b
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "shape_block", shape if shape else (0, 0))

    @classmethod
    def identity(cls, tree, nodes, dim):
        return cls(
            tree, tuple(nodes), tuple(nodes), {(n, n): np.eye(dim) for n in nodes}
        )

    @classmethod
    def zero(cls, tree, row_nodes, col_nodes):
        return cls(tree, tuple(row_nodes), tuple(col_nodes), {})

    def block(self, i, j):
        blk = self.blocks.get((i, j))
        if blk is None:
            return np.zeros(self.shape_block)
        return blk

    def transpose(self):
        return BlockMatrix(
            self.tree,
            self.col_nodes,
            self.row_nodes,
            {(j, i): blk.T for (i, j), blk in self.blocks.items()},
        )

    def scaled(self, alpha):
        return BlockMatrix(
            self.tree,
            self.row_nodes,
            self.col_nodes,
            {key: alpha * blk for key, blk in self.blocks.items()},
        )

    def add(self, other):
        if self.row_nodes != other.row_nodes or self.col_nodes != other.col_nodes:
            raise TreeError("block matrix node sets differ")
        out = dict(self.blocks)
        for key, blk in other.blocks.items():
            out[key] = out[key] + blk if key in out else blk
        return BlockMatrix(self.tree, self.row_nodes, self.col_nodes, out)

    def sub(self, other):
        return self.add(other.scaled(-1.0))

    def matmul(self, other):
        """Block product; column nodes must equal the factor's row nodes."""
        if self.col_nodes != other.row_nodes:
            raise TreeError("inner node sets differ in block product")
        by_row = {}
        for (i, m), blk in self.blocks.items():
            by_row.setdefault(i, []).append((m, blk))
        out = {}
        cols_of = {}
        for (m, j), blk in other.blocks.items():
            cols_of.setdefault(m, []).append((j, blk))
        for i, left_entries in by_row.items():
            for m, lblk in left_entries:
                for j, rblk in cols_of.get(m, ()):
                    key = (i, j)
                    prod = lblk @ rblk
                    out[key] = out[key] + prod if key in out else prod
        return BlockMatrix(self.tree, self.row_nodes, other.col_nodes, out)

    def apply(self, v):
        """Matrix-vector action; returns a BlockVector on the row nodes."""
        if tuple(v.nodes) != self.col_nodes:
            raise TreeError("vector node set differs from matrix columns")
        nr = self.shape_block[0] if self.blocks else v.dim
        out = {n: np.zeros(nr) for n in self.row_nodes}
        for (i, j), blk in self.blocks.items():
            out[i] = out[i] + blk @ v.blocks[j]
        return BlockVector(self.tree, self.row_nodes, out)

    def dense(self, scaling=None):
        """Assembled dense matrix; ``scaling(i, j)`` multiplies each block."""
        nr, nc = self.shape_block
        if not self.blocks:
            return np.zeros((0, 0))
        roff = _offsets(self.row_nodes, nr)
        coff = _offsets(self.col_nodes, nc)
        out = np.zeros((nr * len(self.row_nodes), nc * len(self.col_nodes)))
        for (i, j), blk in self.blocks.items():
            f = 1.0 if scaling is None else scaling(i, j)
            out[roff[i] : roff[i] + nr, coff[j] : coff[j] + nc] = f * blk
        return out


def pi_norm_vec(v):
    """Probability-weighted norm sqrt(sum_i pi_i ||v_i||^2)."""
    pi = v.tree.pi
    terms = [
        float(pi[n]) * float(v.blocks[n] @ v.blocks[n]) for n in v.nodes
    ]
    return math.sqrt(math.fsum(terms))


def pi_norm_mat(M):
    """Operator norm induced by :func:`pi_norm_vec`.

    Equals the spectral norm after rescaling each stored block by
    ``sqrt(pi_row / pi_col)``; the formula is applied verbatim to every
    stored block regardless of how the two nodes relate in the tree.
    """
    pi = M.tree.pi
    dense = M.dense(lambda i, j: math.sqrt(pi[i] / pi[j]))
    if dense.size == 0:
        return 0.0
    return float(np.linalg.norm(dense, 2))


def sigma_pi(M):
    """Largest singular value of the probability-desensitized form.

    Rescales each stored block by ``(pi_row * pi_col)^{-1/2}`` before
    taking the spectral norm; symmetric in transposition.
    """
    pi = M.tree.pi
    dense = M.dense(lambda i, j: 1.0 / math.sqrt(pi[i] * pi[j]))
    if dense.size == 0:
        return 0.0
    return float(np.linalg.norm(dense, 2))


def expectation_identity_check(tree, k, t, v):
    """Weighted norm versus conditional second moment on one stage slice.

    For ``v`` defined on the stage-``t`` nodes of the subtree rooted at
    ``k``, the weighted norm equals ``sqrt(pi_k)`` times the square root
    of the conditional expectation of ``||v||^2`` given arrival at ``k``,
    with the expectation enumerated exactly.  Returns ``(lhs, rhs, gap)``;
    the two sides must agree within ``1e-10 * (1 + lhs)``.
    """
    if t < tree.stage[k]:
        raise TreeError(f"stage {t} precedes node {k}'s stage {tree.stage[k]}")
    expected = [
        j
        for j in tree.stage_nodes(t)
        if tree.is_ancestor(k, j)
    ]
    if set(v.nodes) != set(expected):
        raise TreeError(
            f"vector nodes do not match stage-{t} slice of subtree at {k}"
        )
    lhs = pi_norm_vec(v)
    cond = [
        (tree.pi[j] / tree.pi[k]) * float(v.blocks[j] @ v.blocks[j])
        for j in v.nodes
    ]
    rhs = math.sqrt(tree.pi[k]) * math.sqrt(math.fsum(cond))
    return lhs, rhs, abs(lhs - rhs)
