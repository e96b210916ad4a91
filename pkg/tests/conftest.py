"""Session fixtures shared by the acceptance gate.

The certified instance pools are expensive to build, so they are
generated once per session.  The acceptance tests record one verdict
line per criterion; a terminal-summary hook echoes them at the end of
the run so the pass/fail ledger is visible in plain pytest output.
"""

import pytest

from spc_lab import InstanceSpec, generate_certified_instance, regret_sweep

ACCEPTANCE_LINES = []


def record_criterion(num, title, passed):
    ACCEPTANCE_LINES.append((num, title, passed))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, passed in sorted(ACCEPTANCE_LINES):
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {num:02d} [{title}]: {verdict}")


def pool_spec(seed, T=6):
    return InstanceSpec(
        n_x=2,
        n_u=2,
        T=T,
        branching=2,
        L=1.0,
        alpha=0.04,
        gamma=1.0,
        noise_scale=0.1,
        seed=seed,
    )


@pytest.fixture(scope="session")
def instance_pool():
    """20 certified random instances: branching 2, T = 6, n_x = n_u = 2."""
    return tuple(
        generate_certified_instance(pool_spec(seed)) for seed in range(101, 121)
    )


@pytest.fixture(scope="session")
def deep_pool():
    """Two deeper noisy instances (T = 10) for the regret-decay criterion."""
    return tuple(
        generate_certified_instance(pool_spec(seed, T=10)) for seed in (7, 8)
    )


@pytest.fixture(scope="session")
def pool_sweeps(instance_pool):
    """Full-range regret sweeps over the 20-instance pool, computed once."""
    return tuple(
        regret_sweep(
            inst.tree,
            inst.constants,
            inst.w_prev,
            range(inst.tree.horizon + 1),
        )
        for inst in instance_pool
    )


@pytest.fixture(scope="session")
def deep_sweeps(deep_pool):
    return tuple(
        regret_sweep(
            inst.tree,
            inst.constants,
            inst.w_prev,
            range(inst.tree.horizon + 1),
        )
        for inst in deep_pool
    )
