from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from algorithms.models import ClientState, FederatedRunResult, HyperParams
from estimators.estimators import draw_batch, momentum_embedding_update, stochastic_phi_grad
from harness.metrics import CommLedger, RunTrace, record_metrics
from logger.sim_logger import get_logger
from problems.models import ConfigError, DimensionError
from problems.problems import ClientOracle, CompositionalProblem, fixed_order_mean

logger = get_logger("algorithms")

CASES = {"I": "I", "1": "I", "II": "II", "2": "II"}


def aggregate_mean(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Серверное усреднение в фиксированном порядке номеров клиентов"""
    if len(vectors) == 0:
        raise ValueError("cannot aggregate an empty set of client vectors")
    shapes = {np.shape(v) for v in vectors}
    if len(shapes) != 1:
        raise DimensionError(f"ragged client vectors: {sorted(shapes)}")
    return fixed_order_mean(vectors)


def client_seed_sequence(master_seed: int, client_id: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([master_seed, client_id])


class FederatedRunner:
    """Синхронный цикл раундов: локальные шаги, усреднение моделей каждые I итераций.

    Подклассы задают step(t) и, при необходимости, _after_sync().
    """

    name = "base"

    def __init__(self, problem: CompositionalProblem, hp: HyperParams, x0,
                 seed: int = 0, cadence: int = 1, store_iterates: bool = True):
        if hp.K != problem.K:
            raise ConfigError(f"hyperparameters declare K={hp.K} but the problem has {problem.K} clients")
        if cadence < 1:
            raise ConfigError(f"metric cadence must be >= 1, got {cadence}")
        if seed < 0:
            raise ConfigError(f"seed must be non-negative, got {seed}")
        self.problem = problem
        self.hp = hp
        self.seed = seed
        self.cadence = cadence
        self.store_iterates = store_iterates
        self.x0 = self._initial_point(x0)

        self.states: List[ClientState] = [
            ClientState(
                k=k,
                x=self.x0.copy(),
                x_prev=self.x0.copy(),
                y=np.zeros(problem.dim_g),
                rng=np.random.default_rng(client_seed_sequence(seed, k)),
            )
            for k in range(problem.K)
        ]
        self.master_rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.ledger = CommLedger(problem.dim_x, problem.dim_g)
        self.trace = RunTrace()
        self.sync_round = 0
        self.samples = 0
        self.sync_history: List[np.ndarray] = []
        self.embedding_projections = 0

    def _initial_point(self, x0) -> np.ndarray:
        x0 = np.asarray(x0, dtype=float)
        if x0.ndim == 0:
            return np.full(self.problem.dim_x, float(x0))
        return self.problem.check_point(x0).copy()

    @property
    def clients(self) -> List[ClientOracle]:
        return self.problem.clients

    def x_bar(self) -> np.ndarray:
        return aggregate_mean([s.x for s in self.states])

    def is_sync(self, t: int) -> bool:
        # при T, не кратном I, в конце добавляется ещё одно усреднение
        return (t + 1) % self.hp.I == 0 or t + 1 == self.hp.T

    def step(self, t: int):
        raise NotImplementedError

    def _after_sync(self):
        pass

    def sync(self):
        x_bar = self.x_bar()
        for s in self.states:
            s.x = x_bar.copy()
        self.ledger.share_models(self.problem.K)
        self.sync_round += 1
        self.sync_history.append(x_bar.copy())
        self._after_sync()

    def share_embeddings(self) -> np.ndarray:
        y_bar = aggregate_mean([s.y for s in self.states])
        for s in self.states:
            s.y = y_bar.copy()
        self.ledger.share_embeddings(self.problem.K)
        return y_bar

    def record(self, t: int):
        self.trace.append(record_metrics(self.problem, self.states, t, self.sync_round,
                                         self.ledger, self.samples))

    def run(self) -> FederatedRunResult:
        T = self.hp.T
        logger.info(f"Starting {self.name}: problem={self.problem.name}, K={self.problem.K}, "
                    f"T={T}, I={self.hp.I}, seed={self.seed}")
        iterates = np.empty((T + 1, self.problem.dim_x)) if self.store_iterates else None
        pre_drawn = None if self.store_iterates else int(self.master_rng.integers(1, T + 1))
        kept = None

        if iterates is not None:
            iterates[0] = self.x_bar()
        self.record(0)
        for t in range(T):
            self.step(t)
            if self.is_sync(t):
                self.sync()
            if iterates is not None:
                iterates[t + 1] = self.x_bar()
            elif t + 1 == pre_drawn:
                kept = self.x_bar()
            if (t + 1) % self.cadence == 0:
                self.record(t + 1)

        if iterates is not None:
            sampled_index = int(self.master_rng.integers(1, T + 1))
            kept = iterates[sampled_index].copy()
        else:
            sampled_index = pre_drawn

        self.trace.metadata.update(algorithm=self.name, sampled_index=sampled_index,
                                   embedding_projections=self.embedding_projections)
        if self.embedding_projections:
            logger.warning(f"{self.name}: shared embedding was projected onto the domain of f "
                           f"at {self.embedding_projections} of {T} iterations")
        logger.info(f"Finished {self.name}: {self.sync_round} model syncs, "
                    f"final grad_norm_sq={self.trace.rows[-1].grad_norm_sq:.6g}")
        return FederatedRunResult(
            algorithm=self.name,
            trace=self.trace,
            x_final=self.x_bar(),
            x_sampled=kept,
            sampled_index=sampled_index,
            comm=self.ledger,
            sync_history=self.sync_history,
            iterates=iterates,
            samples_consumed=self.samples,
            embedding_projections=self.embedding_projections,
        )


class VanillaFedAvgRunner(FederatedRunner):
    """Детерминированный FedAvg для композиционной цели, случаи I и II"""

    def __init__(self, problem, hp, x0, case="I", **kwargs):
        if str(case) not in CASES:
            raise ConfigError(f"case must be 'I' or 'II', got {case!r}")
        super().__init__(problem, hp, x0, **kwargs)
        self.case = CASES[str(case)]
        self.name = "fedavg-case1" if self.case == "I" else "fedavg-case2"
        for s, c in zip(self.states, self.clients):
            s.y = c.g(s.x)
        if self.case == "II":
            self.share_embeddings()

    def _local_grad(self, client: ClientOracle, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        grad = client.grad_h(x)
        if not self.problem.outer.is_constant:
            grad = grad + client.jac_g(x) @ self.problem.outer.grad(y)
        return grad

    def step(self, t):
        eta = self.hp.eta_schedule[t]
        for s, c in zip(self.states, self.clients):
            grad = self._local_grad(c, s.x, s.y)
            s.x_prev = s.x
            s.x = s.x - eta * grad
            s.y = c.g(s.x)
            self.samples += c.n_g + (c.n_h if c.has_h else 0)

    def _after_sync(self):
        for s, c in zip(self.states, self.clients):
            s.y = c.g(s.x)
        if self.case == "II":
            self.share_embeddings()


class ModifiedFedAvgRunner(VanillaFedAvgRunner):
    """FedAvg, в котором y_bar пересчитывается и рассылается на каждой итерации"""

    def __init__(self, problem, hp, x0, **kwargs):
        super().__init__(problem, hp, x0, case="I", **kwargs)
        self.name = "modified-fedavg"

    def step(self, t):
        self.share_embeddings()
        super().step(t)


class FedDRORunner(FederatedRunner):
    """Редкое усреднение моделей и обмен низкоразмерной оценкой g на каждой итерации"""

    name = "feddro"

    def __init__(self, problem, hp, x0, y0=None, **kwargs):
        super().__init__(problem, hp, x0, **kwargs)
        self.warm_start = y0 is not None
        if self.warm_start:
            y0 = np.asarray(y0, dtype=float).reshape(-1)
            if y0.shape != (problem.dim_g,):
                raise DimensionError(f"y0 must have {problem.dim_g} entries, got {y0.shape[0]}")
            for s in self.states:
                s.y = y0.copy()

    def step(self, t):
        hp = self.hp
        beta = float(hp.beta_schedule[t])
        if t == 0 and not self.warm_start:
            # y^{-1} не определён: первая оценка - обычное среднее по пакету
            beta = 1.0

        batches = []
        for s, c in zip(self.states, self.clients):
            sample = draw_batch(c, hp.batch, s.rng)
            batches.append(sample)
            self.samples += sample.size(c)
            s.y = momentum_embedding_update(c, s.x, s.x_prev, s.y, beta, hp.batch.batch_g,
                                            idx=sample.g_idx, full=hp.batch.full)

        y_bar = self.share_embeddings()
        # рекурсия для y не меняется, проецируется только точка вычисления grad f
        y_bar, moved = self.problem.outer.project(y_bar)
        if moved:
            if not self.embedding_projections:
                logger.warning(f"Shared embedding left the domain of f at t={t}, projected onto floor "
                               f"{self.problem.outer.floor}")
            self.embedding_projections += 1
        eta = hp.eta_schedule[t]
        for s, c, sample in zip(self.states, self.clients, batches):
            grad = stochastic_phi_grad(c, self.problem.outer, s.x, y_bar, hp.batch, sample=sample)
            s.x_prev = s.x
            s.x = s.x - eta * grad


class ParallelSGDRunner(FederatedRunner):
    """Локальный SGD по h без композиционной части"""

    name = "parallel-sgd"

    def __init__(self, problem, hp, x0, **kwargs):
        if not problem.outer.is_constant:
            raise ConfigError(f"parallel SGD needs a constant outer map, problem {problem.name} has one")
        super().__init__(problem, hp, x0, **kwargs)
        for s, c in zip(self.states, self.clients):
            s.y = c.g(s.x)

    def step(self, t):
        eta = self.hp.eta_schedule[t]
        for s, c in zip(self.states, self.clients):
            if not c.has_h:
                continue
            idx = None if self.hp.batch.full else c.sample_h(self.hp.batch.batch_h, s.rng)
            self.samples += c.n_h if idx is None else idx.shape[0]
            s.x_prev = s.x
            s.x = s.x - eta * c.grad_h_at(s.x, idx)

    def _after_sync(self):
        for s, c in zip(self.states, self.clients):
            s.y = c.g(s.x)


def run_vanilla_fedavg(problem: CompositionalProblem, hp: HyperParams, case: str, x0,
                       seed: int = 0, cadence: int = 1, store_iterates: bool = True) -> FederatedRunResult:
    return VanillaFedAvgRunner(problem, hp, x0, case=case, seed=seed, cadence=cadence,
                               store_iterates=store_iterates).run()


def run_modified_fedavg(problem: CompositionalProblem, hp: HyperParams, x0, seed: int = 0,
                        cadence: int = 1, store_iterates: bool = True) -> FederatedRunResult:
    return ModifiedFedAvgRunner(problem, hp, x0, seed=seed, cadence=cadence,
                                store_iterates=store_iterates).run()


def run_feddro(problem: CompositionalProblem, hp: HyperParams, x0, seed: int = 0,
               cadence: int = 1, store_iterates: bool = True,
               y0: Optional[np.ndarray] = None) -> FederatedRunResult:
    return FedDRORunner(problem, hp, x0, y0=y0, seed=seed, cadence=cadence,
                        store_iterates=store_iterates).run()


def run_parallel_sgd(problem: CompositionalProblem, hp: HyperParams, x0, seed: int = 0,
                     cadence: int = 1, store_iterates: bool = True) -> FederatedRunResult:
    return ParallelSGDRunner(problem, hp, x0, seed=seed, cadence=cadence,
                             store_iterates=store_iterates).run()


ALGORITHMS: Dict[str, Callable[..., FederatedRunResult]] = {
    "fedavg-case1": lambda problem, hp, x0, **kw: run_vanilla_fedavg(problem, hp, "I", x0, **kw),
    "fedavg-case2": lambda problem, hp, x0, **kw: run_vanilla_fedavg(problem, hp, "II", x0, **kw),
    "modified-fedavg": run_modified_fedavg,
    "feddro": run_feddro,
    "parallel-sgd": run_parallel_sgd,
}
