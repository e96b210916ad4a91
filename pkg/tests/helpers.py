"""Shared fixture factories for the test suite."""

import numpy as np

from spc_lab import NodeData, ScenarioTree, build_tree_stagewise


def nd_scalar(A=1.0, B=1.0, d=0.0, Q=1.0, R=1.0, q=0.0, r=0.0):
    """Scalar-system node data from plain floats."""
    return NodeData(
        A=[[A]], B=[[B]], d=[d], Q=[[Q]], R=[[R]], q=[q], r=[r]
    )


def uniform_outcome(nd, prob_splits):
    """Stagewise outcome lists that reuse one NodeData everywhere."""
    return [[(nd, p) for p in probs] for probs in prob_splits]


def random_node_data(rng, nx, nu, spread=0.4):
    """Well-posed random node data: Q PSD, R PD, moderate dynamics."""
    A = spread * rng.standard_normal((nx, nx))
    B = spread * rng.standard_normal((nx, nu))
    Mq = rng.standard_normal((nx, nx))
    Q = 0.5 * (Mq @ Mq.T) / nx
    Mr = rng.standard_normal((nu, nu))
    R = np.eye(nu) + 0.5 * (Mr @ Mr.T) / nu
    return NodeData(
        A=A,
        B=B,
        d=rng.standard_normal(nx),
        Q=Q,
        R=R,
        q=rng.standard_normal(nx),
        r=rng.standard_normal(nu),
    )


def random_tree(seed, T=3, branching=2, nx=2, nu=1, spread=0.4):
    """Random stagewise tree with distinct data and probabilities per stage.

    Stage 0 has a single outcome; later stages split ``branching`` ways with
    random positive probabilities summing to one.
    """
    rng = np.random.default_rng(seed)
    stages = []
    for t in range(T + 1):
        if t == 0:
            probs = np.array([1.0])
        else:
            raw = rng.uniform(0.2, 1.0, size=branching)
            probs = raw / raw.sum()
        stages.append(
            [(random_node_data(rng, nx, nu, spread), float(p)) for p in probs]
        )
    return build_tree_stagewise(stages)


def random_block_vector(rng, tree, dims):
    """One random block per node; ``dims`` maps node -> block size or int."""
    if isinstance(dims, int):
        return [rng.standard_normal(dims) for _ in range(tree.node_count)]
    return [rng.standard_normal(dims[n]) for n in range(tree.node_count)]
