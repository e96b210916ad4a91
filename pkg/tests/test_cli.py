"""Command-line wiring: exit codes, file formats, reproducibility.

The CLI is a thin shell, so these tests exercise argument handling and
the emitted artifacts; the numerics behind each command are covered by
the library test modules.
"""

import json
import os

import numpy as np
import pytest

from spc_lab import (
    InitialCondition,
    NodeData,
    TreeError,
    build_tree_stagewise,
    compute_constants,
    load_certificate,
    load_problem,
    save_certificate,
    save_problem,
    solve_anticipative,
    solve_here_and_now,
)
from spc_lab.cli import main
from spc_lab.stability import GainCertificate

from .helpers import random_tree
from .oracles import dense_unscaled_solve


def write_problem(path, tree, initial, assumption=None):
    save_problem(str(path), tree, initial, assumption)
    return str(path)


def rng_initial(tree, seed):
    rng = np.random.default_rng(seed)
    return InitialCondition(
        0.3 * rng.standard_normal(tree.nx), 0.3 * rng.standard_normal(tree.nu)
    )


def zero_data_tree(T=2, branching=2, nx=2, nu=1):
    """Stable dynamics, zero perturbations: the optimum is exactly zero."""
    rng = np.random.default_rng(11)
    stages = []
    for t in range(T + 1):
        outcomes = []
        for b in range(branching if t > 0 else 1):
            A = 0.3 * rng.standard_normal((nx, nx))
            B = 0.4 * rng.standard_normal((nx, nu))
            outcomes.append(
                (
                    NodeData(
                        A=A,
                        B=B,
                        d=np.zeros(nx),
                        Q=np.eye(nx),
                        R=np.eye(nu),
                        q=np.zeros(nx),
                        r=np.zeros(nu),
                    ),
                    1.0 / (branching if t > 0 else 1),
                )
            )
        stages.append(outcomes)
    return build_tree_stagewise(stages)


def read_summary(path):
    """Parse the '#'-prefixed key=value summary line of a trace file."""
    with open(path) as fh:
        last = fh.readlines()[-1]
    assert last.startswith("# ")
    out = {}
    for part in last[2:].strip().split(","):
        key, val = part.split("=", 1)
        out[key] = float(val)
    return out


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    """One CLI-generated certified instance shared by the module."""
    out = tmp_path_factory.mktemp("gen")
    spec = {
        "n_x": 2,
        "n_u": 1,
        "T": 4,
        "branching": 2,
        "L": 1.0,
        "alpha": 0.04,
        "gamma": 1.0,
        "noise_scale": 0.1,
        "seed": 5,
    }
    spec_path = out / "spec.json"
    spec_path.write_text(json.dumps(spec))
    rc = main(
        ["generate", "--input", str(spec_path), "--out", str(out / "gen")]
    )
    assert rc == 0
    return out / "gen"


# ---------------------------------------------------------------- file formats


class TestProblemFile:
    def test_round_trip_explicit(self, tmp_path):
        tree = random_tree(seed=2, T=2, branching=2, nx=2, nu=2)
        initial = rng_initial(tree, 7)
        path = write_problem(
            tmp_path / "p.json",
            tree,
            initial,
            assumption={"L": 1.5, "alpha": 0.3, "gamma": 0.5},
        )
        tree2, initial2, assumption = load_problem(path)
        assert tree2.node_count == tree.node_count
        assert np.array_equal(tree2.parent, tree.parent)
        assert np.array_equal(tree2.stage, tree.stage)
        assert np.array_equal(tree2.pi, tree.pi)
        for n in range(tree.node_count):
            for field in ("A", "B", "d", "Q", "R", "q", "r"):
                assert np.array_equal(
                    getattr(tree2.data[n], field), getattr(tree.data[n], field)
                )
        assert np.array_equal(initial2.x_prev, initial.x_prev)
        assert np.array_equal(initial2.u_prev, initial.u_prev)
        assert assumption == {"L": 1.5, "alpha": 0.3, "gamma": 0.5}

    def test_stagewise_form(self, tmp_path):
        doc = {
            "dims": {"nx": 1, "nu": 1},
            "horizon": 1,
            "stagewise": [
                [
                    {
                        "prob": 1.0,
                        "A": [[1.0]],
                        "B": [[1.0]],
                        "d": [0.0],
                        "Q": [[1.0]],
                        "R": [[1.0]],
                        "q": [0.0],
                        "r": [0.0],
                    }
                ],
                [
                    {
                        "prob": 0.25,
                        "A": [[0.5]],
                        "B": [[1.0]],
                        "d": [1.0],
                        "Q": [[1.0]],
                        "R": [[1.0]],
                        "q": [0.0],
                        "r": [0.0],
                    },
                    {
                        "prob": 0.75,
                        "A": [[0.5]],
                        "B": [[1.0]],
                        "d": [-1.0],
                        "Q": [[1.0]],
                        "R": [[1.0]],
                        "q": [0.0],
                        "r": [0.0],
                    },
                ],
            ],
            "initial": {"x_prev": [0.0], "u_prev": [0.0]},
        }
        path = tmp_path / "p.json"
        path.write_text(json.dumps(doc))
        tree, initial, assumption = load_problem(str(path))
        assert tree.node_count == 3
        assert tree.pi[1] == 0.25 and tree.pi[2] == 0.75
        assert tree.data[1].d[0] == 1.0 and tree.data[2].d[0] == -1.0
        assert assumption is None

    def test_missing_field_rejected(self, tmp_path):
        path = tmp_path / "p.json"
        path.write_text(json.dumps({"dims": {"nx": 1, "nu": 1}}))
        with pytest.raises(TreeError, match="missing"):
            load_problem(str(path))

    def test_dims_mismatch_rejected(self, tmp_path):
        tree = random_tree(seed=2, T=1, branching=2, nx=2, nu=1)
        path = write_problem(tmp_path / "p.json", tree, rng_initial(tree, 1))
        doc = json.loads(open(path).read())
        doc["dims"]["nx"] = 3
        path2 = tmp_path / "q.json"
        path2.write_text(json.dumps(doc))
        with pytest.raises(TreeError, match="dims"):
            load_problem(str(path2))

    def test_not_json_rejected(self, tmp_path):
        path = tmp_path / "p.json"
        path.write_text("not json {")
        with pytest.raises(TreeError, match="JSON"):
            load_problem(str(path))


class TestCertificateFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        cert = GainCertificate(
            K={0: rng.standard_normal((1, 2)), 1: rng.standard_normal((1, 2))},
            L=1.25,
            alpha=0.5,
            role="detectability",
        )
        path = tmp_path / "c.json"
        save_certificate(str(path), cert)
        back = load_certificate(str(path))
        assert back.role == "detectability"
        assert back.L == 1.25 and back.alpha == 0.5
        assert set(back.K) == {0, 1}
        for n in (0, 1):
            assert np.array_equal(back.K[n], cert.K[n])

    def test_missing_claim_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"K": {"0": [[1.0]]}, "L": 1.0}))
        with pytest.raises(TreeError, match="alpha"):
            load_certificate(str(path))


# ---------------------------------------------------------------------- solve


class TestSolve:
    def test_zero_data_objective_is_zero(self, tmp_path, capsys):
        tree = zero_data_tree()
        path = write_problem(
            tmp_path / "p.json", tree, InitialCondition.zero(tree.nx, tree.nu)
        )
        rc = main(["solve", "--input", path, "--out", str(tmp_path)])
        out = capsys.readouterr().out
        assert rc == 0
        assert "J=0.0" in out
        summary = read_summary(tmp_path / "trace.csv")
        assert summary["J"] == 0.0

    def test_malformed_probabilities_exit_2(self, tmp_path, capsys):
        tree = random_tree(seed=3, T=2, branching=2, nx=2, nu=1)
        path = write_problem(tmp_path / "p.json", tree, rng_initial(tree, 0))
        doc = json.loads(open(path).read())
        doc["explicit"]["probs"][1] = 0.9
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(doc))
        rc = main(["solve", "--input", str(bad), "--out", str(tmp_path)])
        err = capsys.readouterr().err
        assert rc == 2
        assert "children sum" in err

    def test_optimal_objective_matches_dense_oracle(self, tmp_path):
        tree = random_tree(seed=3, T=2, branching=2, nx=2, nu=1)
        assert tree.node_count == 7
        initial = rng_initial(tree, 4)
        path = write_problem(tmp_path / "p.json", tree, initial)
        rc = main(
            ["solve", "--input", path, "--out", str(tmp_path), "--policy", "optimal"]
        )
        assert rc == 0
        summary = read_summary(tmp_path / "trace.csv")
        _, _, _, obj = dense_unscaled_solve(
            tree, 0, tuple(range(7)), (initial.x_prev, initial.u_prev)
        )
        assert summary["J"] == pytest.approx(obj, abs=1e-8)

    def test_trace_rows_carry_tree_layout(self, tmp_path):
        tree = random_tree(seed=3, T=2, branching=2, nx=2, nu=1)
        path = write_problem(tmp_path / "p.json", tree, rng_initial(tree, 4))
        main(["solve", "--input", path, "--out", str(tmp_path)])
        lines = open(tmp_path / "trace.csv").read().splitlines()
        assert lines[0] == "node,stage,parent,pi,x[0],x[1],u[0]"
        assert len(lines) == 1 + tree.node_count + 1
        first = lines[1].split(",")
        assert first[:3] == ["0", "0", "-1"]

    def test_hn_objective_matches_library(self, tmp_path):
        tree = random_tree(seed=6, T=2, branching=2, nx=2, nu=1)
        initial = rng_initial(tree, 6)
        path = write_problem(tmp_path / "p.json", tree, initial)
        rc = main(
            ["solve", "--input", path, "--out", str(tmp_path), "--policy", "hn"]
        )
        assert rc == 0
        summary = read_summary(tmp_path / "trace.csv")
        hn = solve_here_and_now(tree, initial)
        assert summary["J"] == pytest.approx(hn.objective, rel=1e-12)

    def test_an_paths_file(self, tmp_path):
        tree = random_tree(seed=6, T=2, branching=2, nx=2, nu=1)
        initial = rng_initial(tree, 6)
        path = write_problem(tmp_path / "p.json", tree, initial)
        rc = main(
            ["solve", "--input", path, "--out", str(tmp_path), "--policy", "an"]
        )
        assert rc == 0
        an = solve_anticipative(tree, initial)
        summary = read_summary(tmp_path / "paths.csv")
        assert summary["J"] == pytest.approx(an.objective, rel=1e-12)
        lines = open(tmp_path / "paths.csv").read().splitlines()
        assert lines[0] == "leaf,pi,J_path"
        assert len(lines) == 1 + len(tree.leaves()) + 1

    def test_missing_file_exit_2(self, tmp_path, capsys):
        rc = main(
            ["solve", "--input", str(tmp_path / "nope.json"), "--out", str(tmp_path)]
        )
        assert rc == 2


# ------------------------------------------------------------------------ spc


class TestSpc:
    def test_full_window_zero_regret(self, tmp_path, capsys):
        tree = random_tree(seed=9, T=3, branching=2, nx=2, nu=1)
        path = write_problem(tmp_path / "p.json", tree, rng_initial(tree, 9))
        rc = main(
            ["spc", "--input", path, "--out", str(tmp_path), "--W", "3"]
        )
        assert rc == 0
        summary = read_summary(tmp_path / "trace.csv")
        assert set(summary) == {"J_W", "J_star", "regret"}
        assert abs(summary["regret"]) <= 1e-8

    def test_window_out_of_range_exit_2(self, tmp_path):
        tree = random_tree(seed=9, T=3, branching=2, nx=2, nu=1)
        path = write_problem(tmp_path / "p.json", tree, rng_initial(tree, 9))
        assert main(["spc", "--input", path, "--out", str(tmp_path), "--W", "9"]) == 2
        assert main(["spc", "--input", path, "--out", str(tmp_path), "--W", "-1"]) == 2
        assert main(["spc", "--input", path, "--out", str(tmp_path), "--W", "x"]) == 2


# ---------------------------------------------------------------- regret sweep


class TestRegretSweep:
    def test_single_full_window_row(self, generated, tmp_path, capsys):
        rc = main(
            [
                "regret-sweep",
                "--input",
                str(generated / "problem.json"),
                "--out",
                str(tmp_path),
                "--W",
                "4..4",
            ]
        )
        assert rc == 0
        lines = open(tmp_path / "regret.csv").read().splitlines()
        assert (
            lines[0] == "W,J_W,J_star,regret,bound,applies,Wbar,rho"
        )
        rows = [l for l in lines[1:] if not l.startswith("#")]
        assert len(rows) == 1
        regret = float(rows[0].split(",")[3])
        assert abs(regret) <= 1e-8

    def test_identical_bytes_on_rerun(self, generated, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            rc = main(
                [
                    "regret-sweep",
                    "--input",
                    str(generated / "problem.json"),
                    "--out",
                    str(out),
                ]
            )
            assert rc == 0
        assert (a / "regret.csv").read_bytes() == (b / "regret.csv").read_bytes()
        assert (a / "run.json").read_bytes() == (b / "run.json").read_bytes()

    def test_thread_count_does_not_change_bytes(
        self, generated, tmp_path, monkeypatch
    ):
        a = tmp_path / "serial"
        rc = main(
            [
                "regret-sweep",
                "--input",
                str(generated / "problem.json"),
                "--out",
                str(a),
            ]
        )
        assert rc == 0
        monkeypatch.setenv("SPC_LAB_THREADS", "3")
        b = tmp_path / "threaded"
        rc = main(
            [
                "regret-sweep",
                "--input",
                str(generated / "problem.json"),
                "--out",
                str(b),
            ]
        )
        assert rc == 0
        assert (a / "regret.csv").read_bytes() == (b / "regret.csv").read_bytes()

    def test_full_sweep_passes(self, generated, tmp_path):
        rc = main(
            [
                "regret-sweep",
                "--input",
                str(generated / "problem.json"),
                "--out",
                str(tmp_path),
            ]
        )
        assert rc == 0
        manifest = json.loads(open(tmp_path / "run.json").read())
        assert manifest["passed"] is True
        assert manifest["command"] == "regret-sweep"
        assert "constants" in manifest and "timestamp" not in manifest
        trailer = open(tmp_path / "regret.csv").read().splitlines()[-1]
        assert "passed=true" in trailer

    def test_requires_assumption_block(self, tmp_path, capsys):
        tree = random_tree(seed=3, T=2, branching=2, nx=2, nu=1)
        path = write_problem(tmp_path / "p.json", tree, rng_initial(tree, 1))
        rc = main(["regret-sweep", "--input", path, "--out", str(tmp_path)])
        assert rc == 2
        assert "assumption" in capsys.readouterr().err

    def test_bad_env_threads_exit_2(self, generated, tmp_path, monkeypatch):
        monkeypatch.setenv("SPC_LAB_THREADS", "many")
        rc = main(
            [
                "regret-sweep",
                "--input",
                str(generated / "problem.json"),
                "--out",
                str(tmp_path),
            ]
        )
        assert rc == 2


# --------------------------------------------------------------------- verify


class TestVerify:
    def test_norms_suite_passes_on_any_fixture(self, tmp_path, capsys):
        tree = random_tree(seed=12, T=2, branching=3, nx=2, nu=2)
        path = write_problem(tmp_path / "p.json", tree, rng_initial(tree, 2))
        rc = main(["verify-norms", "--input", path, "--out", str(tmp_path)])
        assert rc == 0
        assert "all checks passed: norms" in capsys.readouterr().out
        report = json.loads(open(tmp_path / "verify_report.json").read())
        assert report["passed"] is True
        assert report["suites"] == ["norms"]

    def test_inflated_gain_exit_4(self, generated, tmp_path, capsys):
        cert = json.loads(open(generated / "stabilizability.json").read())
        node = next(iter(cert["K"]))
        cert["K"][node] = [[40.0 * v for v in row] for row in cert["K"][node]]
        bad = tmp_path / "bad_cert.json"
        bad.write_text(json.dumps(cert))
        rc = main(
            [
                "verify-bounds",
                "--input",
                str(generated / "problem.json"),
                "--suite",
                "stability",
                "--cert",
                str(bad),
                "--out",
                str(tmp_path),
            ]
        )
        out = capsys.readouterr().out
        assert rc == 4
        assert "gain bound violated" in out

    def test_suite_all_on_generated_instance(self, generated, tmp_path, capsys):
        rc = main(
            [
                "verify-bounds",
                "--input",
                str(generated / "problem.json"),
                "--suite",
                "all",
                "--cert",
                str(generated / "stabilizability.json"),
                "--cert",
                str(generated / "detectability.json"),
                "--out",
                str(tmp_path),
            ]
        )
        out = capsys.readouterr().out
        assert rc == 0
        assert "all checks passed: norms,regularity,stability,lemmas,theorems" in out
        report = json.loads(open(tmp_path / "verify_report.json").read())
        assert report["passed"] is True
        for suite in ("norms", "regularity", "stability", "lemmas", "theorems"):
            assert report["summary"][suite]["passed"] is True
        for name in ("moments.csv", "regret.csv", "decay.csv"):
            assert (tmp_path / name).exists()

    def test_decay_csv_columns(self, generated, tmp_path):
        main(
            [
                "verify-bounds",
                "--input",
                str(generated / "problem.json"),
                "--suite",
                "theorems",
                "--out",
                str(tmp_path),
            ]
        )
        lines = open(tmp_path / "decay.csv").read().splitlines()
        assert lines[0] == "t,tprime,psi_norm,omega_norm,bound"
        assert len(lines) == 1 + 5 * 5
        for line in lines[1:]:
            t, tp, psi, omega, bound = line.split(",")
            assert float(psi) <= float(bound) and float(omega) <= float(bound)

    def test_lemmas_without_assumption_exit_2(self, tmp_path, capsys):
        tree = random_tree(seed=3, T=2, branching=2, nx=2, nu=1)
        path = write_problem(tmp_path / "p.json", tree, rng_initial(tree, 1))
        rc = main(
            [
                "verify-bounds",
                "--input",
                path,
                "--suite",
                "lemmas",
                "--out",
                str(tmp_path),
            ]
        )
        assert rc == 2
        assert "assumption" in capsys.readouterr().err

    def test_regularity_without_constants_is_structural(self, tmp_path):
        tree = random_tree(seed=3, T=2, branching=2, nx=2, nu=1)
        path = write_problem(tmp_path / "p.json", tree, rng_initial(tree, 1))
        rc = main(
            [
                "verify-bounds",
                "--input",
                path,
                "--suite",
                "regularity",
                "--out",
                str(tmp_path),
            ]
        )
        assert rc == 0


# -------------------------------------------------------------------- certify


class TestCertify:
    def test_valid_certificates_pass(self, generated, capsys):
        rc = main(
            [
                "certify",
                "--input",
                str(generated / "problem.json"),
                "--cert",
                str(generated / "stabilizability.json"),
                "--cert",
                str(generated / "detectability.json"),
            ]
        )
        out = capsys.readouterr().out
        assert rc == 0
        assert "stabilizability" in out and "detectability" in out

    def test_inflated_gain_exit_4(self, generated, tmp_path, capsys):
        cert = json.loads(open(generated / "detectability.json").read())
        node = next(iter(cert["K"]))
        cert["K"][node] = [[40.0 * v for v in row] for row in cert["K"][node]]
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(cert))
        rc = main(
            [
                "certify",
                "--input",
                str(generated / "problem.json"),
                "--cert",
                str(bad),
            ]
        )
        out = capsys.readouterr().out
        assert rc == 4
        assert "gain bound violated" in out


# ---------------------------------------------------------- constants/generate


class TestConstantsCmd:
    def test_matches_library_bundle(self, generated, tmp_path, capsys):
        rc = main(
            [
                "constants",
                "--input",
                str(generated / "problem.json"),
                "--out",
                str(tmp_path),
            ]
        )
        assert rc == 0
        written = json.loads(open(tmp_path / "constants.json").read())
        tree, initial, assumption = load_problem(str(generated / "problem.json"))
        c = compute_constants(
            assumption["L"],
            assumption["alpha"],
            assumption["gamma"],
            tree=tree,
            w_prev=(initial.x_prev, initial.u_prev),
        )
        assert written["gamma_F"] == c.gamma_F
        assert written["gamma_G"] == c.gamma_G
        assert written["rho"] == c.rho
        assert written["one_minus_rho"] == c.one_minus_rho
        assert written["D"] == c.D


class TestGenerate:
    def test_writes_expected_files(self, generated):
        for name in (
            "problem.json",
            "stabilizability.json",
            "detectability.json",
            "constants.json",
            "run.json",
        ):
            assert (generated / name).exists()

    def test_deterministic_bytes(self, generated, tmp_path):
        spec = {
            "n_x": 2,
            "n_u": 1,
            "T": 4,
            "branching": 2,
            "L": 1.0,
            "alpha": 0.04,
            "gamma": 1.0,
            "noise_scale": 0.1,
            "seed": 5,
        }
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps(spec))
        rc = main(
            ["generate", "--input", str(spec_path), "--out", str(tmp_path / "g")]
        )
        assert rc == 0
        for name in ("problem.json", "stabilizability.json", "constants.json"):
            assert (tmp_path / "g" / name).read_bytes() == (
                generated / name
            ).read_bytes()

    def test_generated_problem_verifies(self, generated, tmp_path):
        rc = main(
            [
                "certify",
                "--input",
                str(generated / "problem.json"),
                "--cert",
                str(generated / "stabilizability.json"),
            ]
        )
        assert rc == 0

    def test_seed_flag_changes_instance(self, tmp_path):
        rc = main(["generate", "--seed", "6", "--out", str(tmp_path / "s6")])
        assert rc == 0
        rc = main(["generate", "--seed", "7", "--out", str(tmp_path / "s7")])
        assert rc == 0
        a = (tmp_path / "s6" / "problem.json").read_bytes()
        b = (tmp_path / "s7" / "problem.json").read_bytes()
        assert a != b

    def test_unknown_spec_field_exit_2(self, tmp_path, capsys):
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps({"horizon": 4}))
        rc = main(
            ["generate", "--input", str(spec_path), "--out", str(tmp_path / "g")]
        )
        assert rc == 2
        assert "unknown fields" in capsys.readouterr().err


class TestBuildTree:
    def test_summary_line_and_file(self, tmp_path, capsys):
        tree = random_tree(seed=1, T=2, branching=2, nx=2, nu=1)
        path = write_problem(tmp_path / "p.json", tree, rng_initial(tree, 1))
        rc = main(["build-tree", "--input", path, "--out", str(tmp_path)])
        out = capsys.readouterr().out
        assert rc == 0
        assert "nodes=7 horizon=2 leaves=4" in out
        summary = json.loads(open(tmp_path / "tree_summary.json").read())
        assert summary["node_count"] == 7
        assert summary["stage_sizes"] == [1, 2, 4]
