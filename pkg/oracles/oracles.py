"""
Независимые проверки: конечные разности, перебор внутреннего максимума DRO на
симплексе, эталонный централизованный градиентный спуск и сводный набор проверок.
"""
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from algorithms.algorithms import run_feddro
from algorithms.models import HyperParams
from estimators.estimators import BatchSpec
from logger.sim_logger import get_logger
from problems.datasets import build_synthetic_logistic
from problems.models import ConfigError, NumericalError, VerificationError
from problems.problems import (
    CompositionalProblem,
    build_chi2_dro,
    build_counterexample,
    build_kl_dro,
    build_quadratic,
    eval_true_grad_phi,
    eval_true_phi,
    make_quadratic_samples,
)

logger = get_logger("oracles")

FD_STEP = 1e-6
CHI2_MAX_ITERS = 100_000
CHI2_TOL = 1e-10


class SimplexPoint(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    p: np.ndarray

    @field_validator("p")
    def validate_simplex(cls, v):
        v = np.asarray(v, dtype=float)
        if v.ndim != 1 or v.shape[0] < 1:
            raise ValueError("p must be a non-empty vector")
        if np.any(v < 0):
            raise ValueError("p must be entrywise non-negative")
        if abs(v.sum() - 1.0) > 1e-12:
            raise ValueError(f"p must sum to 1, sums to {v.sum()!r}")
        return v


def finite_diff_grad(fn: Callable[[np.ndarray], float], x, h: float = FD_STEP) -> np.ndarray:
    """Центральные разности по каждой координате"""
    if h <= 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    x = np.asarray(x, dtype=float).reshape(-1)
    grad = np.zeros_like(x)
    for i in range(x.shape[0]):
        shift = np.zeros_like(x)
        shift[i] = h
        f_plus, f_minus = fn(x + shift), fn(x - shift)
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericalError(f"non-finite function value near x along coordinate {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def project_to_simplex(v) -> np.ndarray:
    """Евклидова проекция на вероятностный симплекс (сортировка и порог)"""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    cumulative = np.cumsum(u) - 1.0
    ranks = np.arange(1, v.shape[0] + 1)
    rho = np.flatnonzero(u - cumulative / ranks > 0)[-1]
    theta = cumulative[rho] / (rho + 1.0)
    p = np.maximum(v - theta, 0.0)
    return p / p.sum()


def _chi2_objective(losses, lam, p):
    m = losses.shape[0]
    return float(p @ losses - lam * (m / 2.0) * np.sum((p - 1.0 / m) ** 2))


def _chi2_gradient(losses, lam, p):
    m = losses.shape[0]
    return losses - lam * m * (p - 1.0 / m)


def chi2_kkt_residual(losses, lam: float, p) -> float:
    """Невязка условий оптимальности: ||proj(p + grad) - p||"""
    losses = np.asarray(losses, dtype=float)
    p = np.asarray(p, dtype=float)
    return float(np.linalg.norm(project_to_simplex(p + _chi2_gradient(losses, lam, p)) - p))


def brute_force_dro_value(losses, lam: float, divergence: str) -> Tuple[float, SimplexPoint]:
    """max_p sum p_i l_i - lam * D(p, 1/m) по симплексу"""
    if lam <= 0:
        raise ConfigError(f"lambda must be positive, got {lam}")
    losses = np.asarray(losses, dtype=float).reshape(-1)
    m = losses.shape[0]
    if m < 1:
        raise ConfigError("need at least one loss value")

    if divergence == "KL":
        scaled = losses / lam
        top = scaled.max()
        weights = np.exp(scaled - top)
        value = lam * (top + np.log(weights.mean()))
        return float(value), SimplexPoint(p=weights / weights.sum())

    if divergence != "chi2":
        raise ConfigError(f"divergence must be 'KL' or 'chi2', got {divergence!r}")

    # вогнутая цель, шаг 1 / (lam m)
    step = 1.0 / (lam * m)
    p = np.full(m, 1.0 / m)
    for it in range(1, CHI2_MAX_ITERS + 1):
        p_next = project_to_simplex(p + step * _chi2_gradient(losses, lam, p))
        mapping = np.linalg.norm(p_next - p) / step
        p = p_next
        if mapping <= CHI2_TOL:
            break
    else:
        logger.warning(f"chi2 ascent hit the {CHI2_MAX_ITERS} iteration cap, mapping norm {mapping:.3g}")
    return _chi2_objective(losses, lam, p), SimplexPoint(p=p)


def centralized_gd_reference(problem: CompositionalProblem, eta: float, T: int, x0) -> List[np.ndarray]:
    """x_{t+1} = x_t - eta * grad Phi(x_t), возвращает T + 1 точек"""
    x = np.asarray(x0, dtype=float)
    x = np.full(problem.dim_x, float(x)) if x.ndim == 0 else problem.check_point(x).copy()
    iterates = [x.copy()]
    for _ in range(T):
        x = x - eta * eval_true_grad_phi(problem, x)
        iterates.append(x.copy())
    return iterates


def check_gradient(problem: CompositionalProblem, points: Sequence[np.ndarray], h: float = FD_STEP) -> float:
    """Максимальная относительная ошибка аналитического градиента"""
    worst = 0.0
    for x in points:
        analytic = eval_true_grad_phi(problem, x)
        numeric = finite_diff_grad(lambda z: eval_true_phi(problem, z), x, h)
        error = np.linalg.norm(analytic - numeric) / max(1.0, np.linalg.norm(analytic))
        worst = max(worst, float(error))
    return worst


def unit_ball_points(dim: int, count: int, rng: np.random.Generator) -> List[np.ndarray]:
    points = []
    for _ in range(count):
        direction = rng.normal(size=dim)
        direction /= np.linalg.norm(direction)
        points.append(direction * rng.uniform() ** (1.0 / dim))
    return points


class CheckResult(BaseModel):
    name: str
    passed: bool
    measured: float
    threshold: float
    detail: str = ""
    # значения по отдельным тестовым точкам; None - точка пропущена
    values: List[Optional[float]] = Field(default_factory=list)


class VerificationReport(BaseModel):
    checks: List[CheckResult] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name: str, measured: float, threshold: float, detail: str = "",
            values: Optional[Sequence[Optional[float]]] = None) -> CheckResult:
        check = CheckResult(name=name, passed=bool(measured <= threshold), measured=float(measured),
                            threshold=threshold, detail=detail, values=list(values or []))
        self.checks.append(check)
        level = logger.info if check.passed else logger.error
        level(f"check {name}: measured={measured:.3g}, threshold={threshold:.3g}, "
              f"{'pass' if check.passed else 'FAIL'}")
        return check

    def raise_for_failures(self):
        failed = [c.name for c in self.checks if not c.passed]
        if failed:
            raise VerificationError(f"{len(failed)} of {len(self.checks)} checks failed: {failed}")


def default_problem_set(seed: int = 0) -> List[CompositionalProblem]:
    _, shards = build_synthetic_logistic(50, 3, imbalance_ratio=0.5, K=2, seed=seed)
    return [
        build_counterexample(),
        build_kl_dro(shards, lam=1.0),
        build_chi2_dro(shards, lam=10.0),
        build_chi2_dro(shards, lam=10.0, variant="oracle"),
        build_quadratic(make_quadratic_samples(K=3, n_per_client=8, dim=3, seed=seed)),
    ]


def _gd_reduction_gap(problem: CompositionalProblem, eta: float, T: int, x0) -> float:
    single = CompositionalProblem(problem.name, problem.clients[:1], problem.outer, problem.constants)
    hp = HyperParams.constant(eta, T=T, I=1, K=1, beta=1.0, batch=BatchSpec(full=True))
    result = run_feddro(single, hp, x0, store_iterates=True)
    reference = np.array(centralized_gd_reference(single, eta, T, x0))
    return float(np.max(np.abs(result.iterates - reference)))


def verify_suite(problems: Optional[Sequence[CompositionalProblem]] = None, seed: int = 0) -> VerificationReport:
    """Проверки, опирающиеся на независимые оракулы"""
    problems = list(problems) if problems is not None else default_problem_set(seed)
    rng = np.random.default_rng(seed)
    report = VerificationReport()

    for problem in problems:
        points = unit_ball_points(problem.dim_x, 20, rng)
        report.add(f"gradient-consistency[{problem.name}]", check_gradient(problem, points), 1e-5)

        if problem.name == "counterexample":
            xs = rng.uniform(-10, 10, size=100)
            gap = max(abs(eval_true_phi(problem, [x]) - np.sqrt(x * x + 4.0)) for x in xs)
            report.add("counterexample-aggregate", gap, 1e-12)

        report.add(f"feddro-gd-reduction[{problem.name}]",
                   _gd_reduction_gap(problem, 0.1, 100, 0.5), 1e-10)

        if problem.name == "kl-dro":
            lam = problem.outer.lam
            gap = 0.0
            for x in unit_ball_points(problem.dim_x, 10, rng):
                value, _ = brute_force_dro_value(problem.sample_losses(x), lam, "KL")
                gap = max(gap, abs(eval_true_phi(problem, x) - value))
            report.add("kl-dual-equality", gap, 1e-8)

        if problem.name in ("chi2-dro", "chi2-dro-oracle"):
            lam = -1.0 / problem.outer.scale if problem.name.endswith("oracle") else 1.0 / problem.outer.scale
            mismatch, kkt, boundary = 0.0, 0.0, 0
            gaps: List[Optional[float]] = []
            for x in unit_ball_points(problem.dim_x, 10, rng):
                losses = problem.sample_losses(x)
                value, point = brute_force_dro_value(losses, lam, "chi2")
                kkt = max(kkt, chi2_kkt_residual(losses, lam, point.p))
                if np.any(point.p <= 0):
                    boundary += 1
                    gaps.append(None)
                    continue
                gap = value - eval_true_phi(problem, x)
                gaps.append(float(gap))
                if problem.name == "chi2-dro":
                    # разрыв печатной формы с оракулом: mean(l) + Var(l) / lam
                    expected = losses.mean() + losses.var() / lam
                    mismatch = max(mismatch, abs(gap - expected))
                else:
                    mismatch = max(mismatch, abs(gap))
            label = "chi2-printed-gap" if problem.name == "chi2-dro" else "chi2-oracle-equality"
            listed = ", ".join("skipped" if g is None else f"{g:.6g}" for g in gaps)
            report.add(label, mismatch, 1e-8, values=gaps,
                       detail=f"oracle minus objective per test point: [{listed}]; "
                              f"{boundary} boundary maximizers skipped")
            report.add(f"chi2-kkt[{problem.name}]", kkt, 1e-8)

    return report
