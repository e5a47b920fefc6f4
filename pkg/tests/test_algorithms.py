import math

import numpy as np
import pytest

from algorithms.algorithms import (
    ALGORITHMS,
    FedDRORunner,
    VanillaFedAvgRunner,
    aggregate_mean,
    run_feddro,
    run_modified_fedavg,
    run_parallel_sgd,
    run_vanilla_fedavg,
)
from algorithms.models import HyperParams
from estimators.estimators import BatchSpec
from oracles.oracles import centralized_gd_reference
from problems.datasets import build_synthetic_logistic
from problems.models import ConfigError, DimensionError, LipschitzConstants, ScheduleError
from problems.problems import (
    CompositionalProblem,
    QuadraticClient,
    ZeroOuter,
    build_counterexample,
    build_kl_dro,
    build_pure_h,
    build_quadratic,
    make_quadratic_samples,
)

FULL = BatchSpec(full=True)


def single_client(problem):
    return CompositionalProblem(problem.name, problem.clients[:1], problem.outer, problem.constants)


def quadratic(K=4, dim=3, seed=0):
    return build_quadratic(make_quadratic_samples(K, 16, dim, hetero=1.0, noise=0.5, seed=seed))


class TestAggregateMean:
    def test_single_vector_is_identity(self):
        v = np.array([0.1, 0.7])
        assert np.array_equal(aggregate_mean([v]), v)

    def test_mean_of_basis_vectors(self):
        assert np.array_equal(aggregate_mean([np.array([1.0, 0.0]), np.array([0.0, 1.0])]), [0.5, 0.5])

    def test_equal_inputs_are_returned_exactly(self):
        v = np.array([0.1, 0.2, 1.0 / 3.0])
        assert np.array_equal(aggregate_mean([v, v, v]), v)

    def test_empty_input(self):
        with pytest.raises(ValueError):
            aggregate_mean([])

    def test_ragged_input(self):
        with pytest.raises(DimensionError):
            aggregate_mean([np.zeros(2), np.zeros(3)])


def test_vanilla_first_local_step_on_counterexample():
    problem = build_counterexample()
    hp = HyperParams.constant(0.04, T=2, I=2, K=2, batch=FULL)
    runner = VanillaFedAvgRunner(problem, hp, 0.5, case="I")
    runner.step(0)
    assert runner.states[0].x[0] == pytest.approx(0.5 + 0.04 * 4 * 2 / math.sqrt(8), abs=1e-12)
    assert runner.states[0].x[0] == pytest.approx(0.61314, abs=1e-5)
    assert runner.states[1].x[0] == pytest.approx(0.56657, abs=1e-5)


@pytest.mark.parametrize("algorithm", ["fedavg-case1", "fedavg-case2", "modified-fedavg", "feddro"])
def test_zero_step_size_keeps_iterates(algorithm):
    problem = build_counterexample()
    hp = HyperParams.constant(0.0, T=20, I=3, K=2, batch=FULL)
    result = ALGORITHMS[algorithm](problem, hp, 0.5)
    assert np.all(result.iterates == 0.5)
    assert result.x_final[0] == 0.5


def test_feddro_with_zero_step_still_tracks_embeddings():
    _, shards = build_synthetic_logistic(40, 2, K=2, seed=1)
    problem = build_kl_dro(shards, 1.0)
    hp = HyperParams.constant(0.0, T=10, I=2, K=2, beta=0.5, batch=BatchSpec(batch_g=4, batch_h=4))
    result = run_feddro(problem, hp, np.array([0.2, -0.1]), seed=3)
    assert np.all(result.iterates == np.array([0.2, -0.1]))
    assert result.comm.lowdim_up == 2 * 10


@pytest.mark.parametrize("case", ["I", "II"])
@pytest.mark.parametrize("eta", [0.005, 0.01, 0.02, 0.04])
def test_vanilla_fedavg_does_not_converge_on_counterexample(case, eta):
    problem = build_counterexample()
    hp = HyperParams.constant(eta, T=5000, I=2, K=2, batch=FULL)
    result = run_vanilla_fedavg(problem, hp, case, 0.5, store_iterates=False)
    sync_values = [float(x[0]) for x in result.sync_history]
    assert len(sync_values) == 2500
    assert min(sync_values) >= 0.5
    assert result.trace.rows[-1].grad_norm_sq >= 0.04
    if eta >= 0.02:
        assert result.x_final[0] >= 1.0


@pytest.mark.parametrize("algorithm", ["modified-fedavg", "feddro"])
def test_shared_embeddings_converge_on_counterexample(algorithm):
    problem = build_counterexample()
    T, I = 10_000, 10
    hp = HyperParams.constant(math.sqrt(1.0 / T), T=T, I=I, K=2, beta=1.0, batch=FULL)
    result = ALGORITHMS[algorithm](problem, hp, 0.5, cadence=100, store_iterates=False)
    assert abs(result.x_final[0]) <= 0.05
    assert result.trace.rows[-1].grad_norm_sq <= 1e-3


@pytest.mark.parametrize("build", [build_counterexample, quadratic])
def test_feddro_reduces_to_gradient_descent(build):
    problem = single_client(build())
    hp = HyperParams.constant(0.1, T=100, I=1, K=1, beta=1.0, batch=FULL)
    result = run_feddro(problem, hp, 0.5)
    reference = np.array(centralized_gd_reference(problem, 0.1, 100, 0.5))
    assert np.max(np.abs(result.iterates - reference)) <= 1e-10


def test_feddro_with_every_step_sync_is_gradient_descent_on_counterexample():
    problem = build_counterexample()
    hp = HyperParams.constant(0.1, T=100, I=1, K=2, beta=1.0, batch=FULL)
    result = run_feddro(problem, hp, 0.5)
    reference = np.array(centralized_gd_reference(problem, 0.1, 100, 0.5))
    assert np.max(np.abs(result.iterates - reference)) <= 1e-10


def test_modified_fedavg_single_client_is_gradient_descent():
    problem = single_client(build_counterexample())
    hp = HyperParams.constant(0.05, T=50, I=5, K=1, batch=FULL)
    result = run_modified_fedavg(problem, hp, 0.3)
    reference = np.array(centralized_gd_reference(problem, 0.05, 50, 0.3))
    assert np.max(np.abs(result.iterates - reference)) <= 1e-12


def test_communication_ledger_is_exact():
    problem = build_quadratic(make_quadratic_samples(4, 4, 100, seed=0))
    hp = HyperParams.constant(0.01, T=1024, I=8, K=4, beta=0.5, batch=BatchSpec())
    result = run_feddro(problem, hp, 0.0, cadence=1024, store_iterates=False)
    assert result.comm.highdim_up == 512
    assert result.comm.lowdim_up == 4096
    assert result.comm.highdim_down == 512
    assert result.comm.reals_up == 512 * 100 + 4096
    last = result.trace.rows[-1]
    assert last.comm_highdim_up == 512 * 100
    assert last.comm_lowdim_up == 4096


def test_final_sync_is_appended_when_period_does_not_divide_horizon():
    problem = quadratic(K=2)
    hp = HyperParams.constant(0.05, T=10, I=4, K=2, beta=0.5, batch=BatchSpec(batch_h=2, batch_g=2))
    result = run_feddro(problem, hp, 0.0)
    assert len(result.sync_history) == 3
    assert result.comm.highdim_up == 3 * 2
    assert result.trace.rows[-1].drift == 0.0


def test_clients_agree_after_every_sync():
    problem = quadratic(K=3)
    hp = HyperParams.constant(0.05, T=40, I=4, K=3, beta=0.5, batch=BatchSpec(batch_h=2, batch_g=2))
    result = run_feddro(problem, hp, 0.0, seed=2)
    for row in result.trace.rows:
        if row.iter % 4 == 0:
            assert row.drift == 0.0
    assert any(row.drift > 0 for row in result.trace.rows)


def test_drift_grows_with_local_period():
    inversions = 0
    for seed in range(5):
        problem = quadratic(K=4, seed=seed)
        drifts = []
        for I in (1, 2, 4, 8):
            hp = HyperParams.constant(0.05, T=256, I=I, K=4, beta=0.5, batch=BatchSpec(batch_h=4, batch_g=4))
            result = run_feddro(problem, hp, 0.0, seed=seed, store_iterates=False)
            drifts.append(float(np.mean(result.trace.column("drift"))))
        inversions += sum(later < earlier for earlier, later in zip(drifts, drifts[1:]))
    assert inversions <= 1


def test_embedding_bias_tracks_drift_for_modified_fedavg():
    problem = build_counterexample()
    hp = HyperParams.constant(0.05, T=12, I=4, K=2, batch=FULL)
    result = run_modified_fedavg(problem, hp, 0.5)
    for row in result.trace.rows:
        if row.drift == 0.0:
            assert row.embed_bias == pytest.approx(0.0, abs=1e-30)
        else:
            assert row.embed_bias > 0.0


def test_single_client_has_no_drift():
    problem = single_client(quadratic())
    hp = HyperParams.constant(0.05, T=30, I=5, K=1, beta=0.5, batch=BatchSpec(batch_h=2, batch_g=2))
    result = run_feddro(problem, hp, 0.0)
    assert np.all(result.trace.column("drift") == 0.0)


def test_cadence_controls_row_count():
    problem = build_counterexample()
    for cadence, rows in ((1, 101), (7, 15), (100, 2)):
        hp = HyperParams.constant(0.01, T=100, I=2, K=2, batch=FULL)
        assert len(run_feddro(problem, hp, 0.5, cadence=cadence).trace) == rows


def test_sampled_iterate_does_not_depend_on_storage():
    problem = quadratic(K=2)
    hp = HyperParams.constant(0.05, T=50, I=5, K=2, beta=0.5, batch=BatchSpec(batch_h=2, batch_g=2))
    stored = run_feddro(problem, hp, 0.0, seed=4)
    streamed = run_feddro(problem, hp, 0.0, seed=4, store_iterates=False)
    assert 1 <= stored.sampled_index <= 50
    assert stored.sampled_index == streamed.sampled_index
    assert np.array_equal(stored.x_sampled, streamed.x_sampled)
    assert np.array_equal(stored.x_sampled, stored.iterates[stored.sampled_index])
    assert streamed.iterates is None


def test_runs_are_reproducible_and_seed_sensitive():
    problem = quadratic(K=3)
    hp = HyperParams.constant(0.05, T=30, I=3, K=3, beta=0.5, batch=BatchSpec(batch_h=2, batch_g=2))
    first = run_feddro(problem, hp, 0.0, seed=7)
    second = run_feddro(problem, hp, 0.0, seed=7)
    other = run_feddro(problem, hp, 0.0, seed=8)
    assert first.trace.to_frame().equals(second.trace.to_frame())
    assert not np.array_equal(first.x_final, other.x_final)


def test_feddro_warm_start():
    problem = quadratic(K=2)
    hp = HyperParams.constant(0.0, T=1, I=1, K=2, beta=0.0, batch=BatchSpec(batch_h=2, batch_g=2))
    runner = FedDRORunner(problem, hp, 0.0, y0=np.array([5.0]))
    runner.run()
    # beta = 0 и x не меняется: оценка остаётся равной y0
    assert all(s.y[0] == pytest.approx(5.0, abs=1e-12) for s in runner.states)
    with pytest.raises(DimensionError):
        FedDRORunner(problem, hp, 0.0, y0=np.array([1.0, 2.0]))


def test_parallel_sgd_single_step():
    client = QuadraticClient(a=[[0.0, 0.0]], b=[0.0], centers=[[0.0, 0.0]])
    problem = CompositionalProblem("half-norm", [client], ZeroOuter(), LipschitzConstants(L_h=1.0))
    hp = HyperParams.constant(0.1, T=1, I=1, K=1, batch=FULL)
    result = run_parallel_sgd(problem, hp, np.array([1.0, 0.0]))
    assert np.allclose(result.x_final, [0.9, 0.0])


def test_parallel_sgd_averages_once_when_period_equals_horizon():
    problem = build_pure_h(quadratic(K=3))
    hp = HyperParams.constant(0.05, T=16, I=16, K=3, batch=BatchSpec(batch_h=2))
    result = run_parallel_sgd(problem, hp, 0.0)
    assert len(result.sync_history) == 1
    assert result.comm.lowdim_up == 0


def test_parallel_sgd_rejects_compositional_problem():
    hp = HyperParams.constant(0.1, T=5, I=1, K=2, batch=FULL)
    with pytest.raises(ConfigError):
        run_parallel_sgd(build_counterexample(), hp, 0.5)


def test_invalid_case_tag():
    hp = HyperParams.constant(0.1, T=5, I=1, K=2, batch=FULL)
    with pytest.raises(ConfigError):
        run_vanilla_fedavg(build_counterexample(), hp, "III", 0.5)


def test_client_count_must_match_problem():
    hp = HyperParams.constant(0.1, T=5, I=1, K=3, batch=FULL)
    with pytest.raises(ConfigError):
        run_feddro(build_counterexample(), hp, 0.5)


class TestHyperParams:
    def test_schedule_length_must_match_horizon(self):
        with pytest.raises(ScheduleError):
            HyperParams(np.full(4, 0.1), np.full(5, 1.0), I=1, T=5, batch=FULL, K=1)

    def test_beta_must_be_clamped(self):
        with pytest.raises(ScheduleError):
            HyperParams.constant(0.1, T=5, beta=1.5)

    def test_negative_step_size(self):
        with pytest.raises(ScheduleError):
            HyperParams.constant(-0.1, T=5)

    def test_period_must_be_positive(self):
        with pytest.raises(ScheduleError):
            HyperParams.constant(0.1, T=5, I=0)


def test_case_two_first_step_uses_shared_embedding():
    problem = build_counterexample()
    hp = HyperParams.constant(0.04, T=2, I=2, K=2, batch=FULL)
    runner = VanillaFedAvgRunner(problem, hp, 0.5, case="II")
    # y_1 = -2, y_2 = 3, общее среднее 0.5
    assert all(s.y[0] == pytest.approx(0.5, abs=1e-15) for s in runner.states)
    assert runner.ledger.lowdim_up == 2
    runner.step(0)
    slope = 0.5 / math.sqrt(4.25)
    assert runner.states[0].x[0] == pytest.approx(0.5 - 4 * 0.04 * slope, abs=1e-12)
    assert runner.states[0].x[0] == pytest.approx(0.461194, abs=1e-6)
    assert runner.states[1].x[0] == pytest.approx(0.519403, abs=1e-6)


def test_case_one_keeps_local_embeddings_at_start():
    runner = VanillaFedAvgRunner(build_counterexample(), HyperParams.constant(0.04, T=2, I=2, K=2, batch=FULL),
                                 0.5, case="I")
    assert [float(s.y[0]) for s in runner.states] == [-2.0, 3.0]
    assert runner.ledger.lowdim_up == 0


def test_feddro_projects_embedding_below_domain_floor(caplog):
    _, shards = build_synthetic_logistic(40, 2, K=2, seed=1)
    problem = build_kl_dro(shards, 0.5)
    hp = HyperParams.constant(0.1, T=3, I=3, K=2, beta=0.1, batch=FULL)
    runner = FedDRORunner(problem, hp, np.zeros(2), y0=np.array([-1.0]))
    with caplog.at_level("WARNING", logger="fedco"):
        runner.step(0)
    # в нуле все потери равны log 2, exp(log 2 / 0.5) = 4
    assert all(s.y[0] == pytest.approx(0.9 * -1.0 + 0.1 * 4.0, abs=1e-12) for s in runner.states)
    assert runner.embedding_projections == 1
    assert "projected onto floor" in caplog.text
    assert all(np.all(np.isfinite(s.x)) for s in runner.states)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_minibatch_feddro_on_kl_dro_survives_long_horizon(seed):
    _, shards = build_synthetic_logistic(400, 5, imbalance_ratio=0.1, K=4, hetero_scheme="label-skew",
                                         seed=seed)
    problem = build_kl_dro(shards, 0.5)
    hp = HyperParams.constant(0.1, T=2000, I=4, K=4, beta=0.1, batch=BatchSpec(batch_h=1, batch_g=1))
    result = run_feddro(problem, hp, np.zeros(5), seed=seed, cadence=100, store_iterates=False)
    assert np.all(np.isfinite(result.x_final))
    assert math.isfinite(result.trace.rows[-1].grad_norm_sq)
