import json
import math

import numpy as np
import pandas as pd
import pytest

import main
from harness.harness import (
    build_problem,
    hitting_iteration,
    load_run_config,
    report,
    resolve_hyperparams,
    run_experiment,
    seed_average,
    sweep,
    validate_config,
    with_overrides,
)
from harness.metrics import TRACE_COLUMNS
from harness.models import ProblemSpec
from harness.storage import RunStorage
from oracles.oracles import VerificationReport
from problems.datasets import build_synthetic_logistic, load_csv_dataset, save_csv_dataset
from problems.models import ConfigError, DatasetError


def make_config(**overrides):
    payload = {
        "name": "test",
        "problem": {"kind": "counterexample"},
        "algorithm": "fedavg-case1",
        "hyper": {"mode": "manual", "eta": 0.04, "I": 2, "T": 100, "full_batch": True},
        "seed": 0,
        "cadence": 1,
        "x0": 0.5,
    }
    payload.update(overrides)
    return validate_config(payload)


def quadratic_config(**overrides):
    payload = {
        "name": "quad",
        "problem": {"kind": "quadratic", "K": 3, "dim": 3, "n_per_client": 12},
        "algorithm": "feddro",
        "hyper": {"mode": "manual", "eta": 0.05, "beta": 0.5, "I": 4, "T": 40, "batch_h": 2, "batch_g": 2},
        "seed": 1,
        "cadence": 1,
        "x0": 0.0,
    }
    payload.update(overrides)
    return validate_config(payload)


class TestConfig:
    def test_load_from_file(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"problem": {"kind": "counterexample"}, "algorithm": "feddro"}))
        config = load_run_config(path)
        assert config.algorithm == "feddro"
        assert config.hyper.T == 1000

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_run_config(tmp_path / "absent.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text("{\n  \"algorithm\": \n")
        with pytest.raises(ConfigError, match="line"):
            load_run_config(path)

    def test_unknown_algorithm(self):
        with pytest.raises(ConfigError):
            make_config(algorithm="scaffold")

    def test_period_longer_than_horizon(self):
        with pytest.raises(ConfigError):
            make_config(hyper={"mode": "manual", "I": 20, "T": 10})

    def test_zero_cadence(self):
        with pytest.raises(ConfigError):
            make_config(cadence=0)

    def test_warm_start_only_for_feddro(self):
        with pytest.raises(ConfigError):
            make_config(y0=[1.0])

    def test_parallel_sgd_needs_h_only_problem(self):
        with pytest.raises(ConfigError):
            make_config(algorithm="parallel-sgd")

    def test_parallel_sgd_accepts_erm(self):
        config = make_config(algorithm="parallel-sgd", problem={"kind": "erm", "K": 2, "n_total": 40, "dim": 2})
        assert config.problem.kind == "erm"

    @pytest.mark.parametrize("kind", ["kl-dro", "chi2-dro", "counterexample"])
    def test_h_only_is_quadratic_only(self, kind):
        with pytest.raises(ConfigError, match="erm"):
            make_config(problem={"kind": kind, "h_only": True})

    def test_holdout_needs_classification_data(self):
        with pytest.raises(ConfigError):
            quadratic_config(problem={"kind": "quadratic", "K": 2, "holdout_fraction": 0.2})

    def test_overrides_nested_fields(self):
        config = with_overrides(make_config(), **{"hyper.I": 4, "seed": 9})
        assert config.hyper.I == 4
        assert config.seed == 9


class TestBuildProblem:
    def test_kl_dro_from_csv_dataset(self, tmp_path):
        dataset, _ = build_synthetic_logistic(60, 3, seed=2)
        path = save_csv_dataset(dataset, tmp_path / "data.csv")
        problem = build_problem(ProblemSpec(kind="kl-dro", K=3, dataset_path=str(path), lam=0.5))
        assert problem.name == "kl-dro"
        assert problem.K == 3
        assert sum(c.n_g for c in problem.clients) == 60

    def test_generated_chi2_oracle_problem(self):
        problem = build_problem(ProblemSpec(kind="chi2-dro", K=2, chi2_variant="oracle", n_total=30, dim=2))
        assert problem.name == "chi2-dro-oracle"

    def test_h_only_quadratic(self):
        problem = build_problem(ProblemSpec(kind="quadratic", K=2, dim=2, h_only=True))
        assert problem.outer.is_constant

    def test_missing_dataset(self, tmp_path):
        with pytest.raises(DatasetError):
            build_problem(ProblemSpec(kind="kl-dro", dataset_path=str(tmp_path / "absent.csv")))

    def test_erm_problem_with_holdout(self):
        problem = build_problem(ProblemSpec(kind="erm", K=2, n_total=80, dim=2,
                                            holdout_fraction=0.25))
        assert problem.name == "erm"
        assert problem.outer.is_constant
        assert problem.holdout.n_samples == 20
        assert sum(c.n_h for c in problem.clients) == 60

    def test_no_holdout_by_default(self):
        assert build_problem(ProblemSpec(kind="kl-dro", K=2, n_total=30, dim=2)).holdout is None


def test_theory_mode_uses_schedule():
    config = make_config(algorithm="feddro", hyper={"mode": "theory", "T": 400, "I": None, "full_batch": True})
    problem = build_problem(config.problem)
    hp, schedule = resolve_hyperparams(config, problem)
    assert schedule.eta == pytest.approx(math.sqrt(2 / 400))
    assert hp.I == schedule.I_max == 2
    assert np.all(hp.eta_schedule == schedule.eta)
    assert np.all(hp.beta_schedule == 1.0)


def test_run_writes_trace_and_meta(tmp_path):
    config = make_config(algorithm="feddro", hyper={"mode": "theory", "T": 100, "I": 2, "full_batch": True})
    result = run_experiment(config, tmp_path)
    storage = RunStorage(tmp_path)
    trace = storage.read_trace()
    meta = storage.read_meta()
    assert list(trace.columns) == TRACE_COLUMNS
    assert len(trace) == 101
    assert meta["schedule"]["eta"] == pytest.approx(math.sqrt(2 / 100))
    assert meta["hyperparams"]["eta"] == meta["schedule"]["eta"]
    assert meta["result"]["sampled_index"] == result.sampled_index
    assert 1 <= meta["result"]["sampled_index"] <= 100
    assert meta["evolution"]["sync_rounds"] == 50
    assert "output_dir" not in meta["config"]
    assert (tmp_path / "wallclock.json").exists()
    assert meta["prediction"]["bound"] > 0
    assert meta["prediction"]["init_gap"] >= 0
    assert {"iterations", "local_updates", "highdim_rounds"} <= set(meta["prediction"]["complexity"])
    assert meta["classification"] is None


def erm_config(**overrides):
    payload = {
        "name": "erm",
        "problem": {"kind": "erm", "K": 2, "n_total": 80, "dim": 2, "holdout_fraction": 0.25},
        "algorithm": "parallel-sgd",
        "hyper": {"mode": "manual", "eta": 0.1, "I": 2, "T": 20, "batch_h": 2, "batch_g": 2},
        "seed": 0,
        "cadence": 1,
        "x0": 0.0,
    }
    payload.update(overrides)
    return validate_config(payload)


def test_parallel_sgd_on_erm(tmp_path):
    result = run_experiment(erm_config(), tmp_path)
    last = RunStorage(tmp_path).read_trace().iloc[-1]
    assert np.any(result.x_final != 0.0)
    assert last["samples_consumed"] == 2 * 20 * 2
    assert last["comm_lowdim_up"] == 0


def test_meta_reports_classification_quality(tmp_path):
    run_experiment(erm_config(), tmp_path)
    meta = RunStorage(tmp_path).read_meta()
    assert meta["prediction"] is None
    for point in ("final", "sampled"):
        train = meta["classification"][point]["train"]
        assert 0.0 <= train["accuracy"] <= 1.0
        assert 0.0 <= train["minority_accuracy"] <= 1.0
        assert train["worst_class_loss"] > 0.0
    assert 0.0 <= meta["classification"]["final"]["holdout"]["accuracy"] <= 1.0


def test_summary_has_classification_columns(tmp_path):
    summary = sweep(erm_config(), "I", [1, 2], [0], output_dir=tmp_path)
    for name in ("accuracy", "minority_accuracy", "worst_class_loss"):
        for prefix in ("final", "sampled", "holdout"):
            assert summary[f"{prefix}_{name}"].notna().all()
    by_value = pd.read_csv(tmp_path / "summary_by_value.csv")
    assert "final_accuracy_mean" in by_value.columns


def test_summary_leaves_classification_empty_without_data(tmp_path):
    summary = sweep(make_config(hyper={"mode": "manual", "eta": 0.04, "I": 2, "T": 20, "full_batch": True}),
                    "I", [2], [0], output_dir=tmp_path)
    assert summary["final_accuracy"].isna().all()
    assert summary["holdout_worst_class_loss"].isna().all()


def test_cadence_row_count(tmp_path):
    run_experiment(make_config(cadence=7), tmp_path)
    assert len(RunStorage(tmp_path).read_trace()) == 100 // 7 + 1


def test_identical_runs_write_identical_files(tmp_path):
    config = quadratic_config()
    run_experiment(config, tmp_path / "a")
    run_experiment(config, tmp_path / "b")
    for name in ("trace.csv", "meta.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_trace_floats_round_trip(tmp_path):
    result = run_experiment(quadratic_config(), tmp_path)
    trace = RunStorage(tmp_path).read_trace()
    assert np.array_equal(trace["grad_norm_sq"].to_numpy(), result.trace.column("grad_norm_sq"))


def test_feddro_counters_in_trace(tmp_path):
    config = quadratic_config(hyper={"mode": "manual", "eta": 0.05, "beta": 0.5, "I": 8, "T": 64,
                                     "batch_h": 2, "batch_g": 2})
    run_experiment(config, tmp_path)
    last = RunStorage(tmp_path).read_trace().iloc[-1]
    assert last["comm_lowdim_up"] == 3 * 64 * 1
    assert last["comm_highdim_up"] == 3 * (64 // 8) * 3
    assert last["samples_consumed"] == 3 * 64 * (2 + 2)


class TestSweep:
    def test_cells_and_summary(self, tmp_path):
        summary = sweep(quadratic_config(), "K", [1, 2], [0, 1], output_dir=tmp_path, workers=2)
        assert len(summary) == 4
        assert list(summary["value"]) == [1, 1, 2, 2]
        for K in (1, 2):
            for seed in (0, 1):
                meta = RunStorage(tmp_path / f"K={K}" / f"seed={seed}").read_meta()
                assert meta["problem"]["K"] == K
                assert meta["config"]["seed"] == seed
        by_value = pd.read_csv(tmp_path / "summary_by_value.csv")
        assert list(by_value["n_seeds"]) == [2, 2]
        assert "final_grad_norm_sq_std" in by_value.columns

    def test_summary_matches_cell_traces(self, tmp_path):
        summary = sweep(quadratic_config(), "eta", [0.01, 0.05], [3], output_dir=tmp_path)
        for row in summary.itertuples():
            trace = RunStorage(tmp_path / f"eta={row.value}" / f"seed={row.seed}").read_trace()
            assert row.final_grad_norm_sq == trace["grad_norm_sq"].iloc[-1]
            assert row.avg_grad_norm_sq == trace["grad_norm_sq"].mean()
            assert row.comm_lowdim_up == trace["comm_lowdim_up"].iloc[-1]

    def test_counterexample_cells_stay_above_start(self, tmp_path):
        base = make_config(hyper={"mode": "manual", "eta": 0.04, "I": 2, "T": 400, "full_batch": True})
        summary = sweep(base, "I", [2, 4], [0], output_dir=tmp_path)
        assert (summary["min_sync_xbar"] >= 0.5).all()

    def test_single_cell_equals_run(self, tmp_path):
        config = quadratic_config()
        sweep(config, "T", [40], [1], output_dir=tmp_path / "sweep")
        run_experiment(config, tmp_path / "run")
        cell = tmp_path / "sweep" / "T=40" / "seed=1" / "trace.csv"
        assert cell.read_bytes() == (tmp_path / "run" / "trace.csv").read_bytes()

    def test_report_regenerates_summary(self, tmp_path):
        sweep(quadratic_config(), "I", [1, 2], [0], output_dir=tmp_path)
        before = (tmp_path / "summary.csv").read_bytes()
        (tmp_path / "summary.csv").unlink()
        report(tmp_path)
        assert (tmp_path / "summary.csv").read_bytes() == before

    @pytest.mark.parametrize("axis, values", [("I", [80]), ("T", [0]), ("batch", [1]), ("I", [])])
    def test_invalid_cells(self, tmp_path, axis, values):
        with pytest.raises(ConfigError):
            sweep(quadratic_config(), axis, values, [0], output_dir=tmp_path)

    def test_client_axis_on_counterexample(self, tmp_path):
        with pytest.raises(ConfigError):
            sweep(make_config(), "K", [2], [0], output_dir=tmp_path)

    def test_eta_axis_needs_manual_mode(self, tmp_path):
        config = quadratic_config(hyper={"mode": "theory", "T": 40, "I": 1})
        with pytest.raises(ConfigError):
            sweep(config, "eta", [0.1], [0], output_dir=tmp_path)

    def test_report_on_empty_directory(self, tmp_path):
        with pytest.raises(ConfigError):
            report(tmp_path)


def test_seed_average_and_hitting_iteration():
    first = pd.DataFrame({"iter": [0, 1, 2], "grad_norm_sq": [4.0, 2.0, 0.5]})
    second = pd.DataFrame({"iter": [0, 1, 2], "grad_norm_sq": [2.0, 1.0, 0.5]})
    averaged = seed_average([first, second])
    assert list(averaged) == [3.0, 1.5, 0.5]
    assert hitting_iteration(averaged, 1.5) == 1
    assert hitting_iteration(averaged, 0.1) is None


class TestCli:
    def write_config(self, tmp_path, payload):
        path = tmp_path / "config.json"
        path.write_text(json.dumps(payload))
        return str(path)

    def test_run(self, tmp_path):
        path = self.write_config(tmp_path, {"problem": {"kind": "counterexample"}, "algorithm": "feddro",
                                            "hyper": {"T": 20, "I": 2, "eta": 0.05, "full_batch": True}})
        assert main.main(["run", "--config", path, "--out", str(tmp_path / "out"), "--seed", "3"]) == 0
        meta = RunStorage(tmp_path / "out").read_meta()
        assert meta["config"]["seed"] == 3

    def test_config_error_exit_code(self, tmp_path):
        path = self.write_config(tmp_path, {"problem": {"kind": "counterexample"}, "algorithm": "sgd"})
        assert main.main(["run", "--config", path, "--out", str(tmp_path / "out")]) == 1
        assert main.main(["run", "--config", str(tmp_path / "absent.json")]) == 1

    def test_runtime_error_exit_code(self, tmp_path):
        path = self.write_config(tmp_path, {"problem": {"kind": "kl-dro", "dataset_path": str(tmp_path / "no.csv")},
                                            "algorithm": "feddro"})
        assert main.main(["run", "--config", path, "--out", str(tmp_path / "out")]) == 2

    def test_sweep_and_report(self, tmp_path):
        path = self.write_config(tmp_path, {"problem": {"kind": "counterexample"}, "algorithm": "fedavg-case2",
                                            "hyper": {"T": 40, "I": 2, "eta": 0.02, "full_batch": True},
                                            "x0": 0.5})
        out = str(tmp_path / "sweep")
        assert main.main(["sweep", "--config", path, "--axis", "I", "--values", "2,4",
                          "--seeds", "0,1", "--out", out]) == 0
        assert main.main(["report", "--dir", out]) == 0
        assert len(pd.read_csv(tmp_path / "sweep" / "summary.csv")) == 4

    def test_generate(self, tmp_path):
        out = tmp_path / "data.csv"
        assert main.main(["generate", "--out", str(out), "--n", "30", "--dim", "2", "--imbalance", "0.5"]) == 0
        dataset = load_csv_dataset(out)
        assert dataset.n_samples == 30
        assert int(dataset.labels.sum()) == 10

    def test_verify(self, tmp_path):
        out = tmp_path / "verify.json"
        assert main.main(["verify", "--out", str(out)]) == 0
        payload = json.loads(out.read_text())
        assert payload["passed"] is True
        assert all(check["passed"] for check in payload["checks"])

    def test_failed_verification_exit_code(self, tmp_path, monkeypatch):
        def failing_suite(seed=0):
            report = VerificationReport()
            report.add("kl-dual-equality", 1e-3, 1e-8)
            return report

        monkeypatch.setattr(main, "verify_suite", failing_suite)
        out = tmp_path / "verify.json"
        assert main.main(["verify", "--out", str(out)]) == 3
        payload = json.loads(out.read_text())
        assert payload["passed"] is False
        assert payload["checks"][0]["values"] == []
