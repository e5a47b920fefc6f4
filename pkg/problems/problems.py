from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from logger.sim_logger import get_logger
from problems.losses import LossModel, get_loss
from problems.models import (
    ClientDataset,
    ConfigError,
    DimensionError,
    LipschitzConstants,
    NumericalError,
)

logger = get_logger("problems")

DRO_KINDS = ("kl", "chi2", "chi2-oracle", "erm")
# mean exp(l / lam) >= 1 при неотрицательных потерях
KL_EMBEDDING_FLOOR = 1.0


def fixed_order_mean(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Среднее с суммированием слева направо по номеру клиента"""
    total = np.array(vectors[0], dtype=float, copy=True)
    # равные входы возвращаются без округления
    if all(np.array_equal(v, total) for v in vectors[1:]):
        return total
    for v in vectors[1:]:
        total = total + v
    return total / len(vectors)


class ClientOracle(ABC):
    """Оракул клиента k: выборочные и точные значения h_k, g_k и их градиентов.

    Все *_at методы принимают индексы локальных образцов; idx=None означает
    полный локальный набор (точное значение).
    """

    dim_x: int
    dim_g: int
    n_h: int
    n_g: int
    has_h: bool

    def sample_h(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(0, self.n_h, size=batch)

    def sample_g(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(0, self.n_g, size=batch)

    @abstractmethod
    def h_at(self, x: np.ndarray, idx: Optional[np.ndarray] = None) -> float:
        ...

    @abstractmethod
    def grad_h_at(self, x: np.ndarray, idx: Optional[np.ndarray] = None) -> np.ndarray:
        ...

    @abstractmethod
    def g_at(self, x: np.ndarray, idx: Optional[np.ndarray] = None) -> np.ndarray:
        ...

    @abstractmethod
    def jac_g_at(self, x: np.ndarray, idx: Optional[np.ndarray] = None) -> np.ndarray:
        """Якобиан g_k размера (dim_x, dim_g)"""

    # точные значения по полному локальному набору
    def h(self, x):
        return self.h_at(x, None)

    def grad_h(self, x):
        return self.grad_h_at(x, None)

    def g(self, x):
        return self.g_at(x, None)

    def jac_g(self, x):
        return self.jac_g_at(x, None)


class QuadraticClient(ClientOracle):
    """h_k(x; c_i) = 0.5 * ||x - c_i||^2,  g_k(x; a_i, b_i) = a_i^T x + b_i"""

    def __init__(self, a: np.ndarray, b: np.ndarray, centers: Optional[np.ndarray] = None):
        self.a = np.atleast_2d(np.asarray(a, dtype=float))
        self.b = np.asarray(b, dtype=float).reshape(-1)
        if self.a.shape[0] != self.b.shape[0]:
            raise DimensionError(f"{self.a.shape[0]} slope rows but {self.b.shape[0]} offsets")
        self.centers = None if centers is None else np.atleast_2d(np.asarray(centers, dtype=float))
        if self.centers is not None and self.centers.shape[1] != self.a.shape[1]:
            raise DimensionError("centers and slopes disagree on dim_x")
        self.dim_x = self.a.shape[1]
        self.dim_g = 1
        self.n_g = self.a.shape[0]
        self.n_h = 0 if self.centers is None else self.centers.shape[0]
        self.has_h = self.centers is not None

    def h_at(self, x, idx=None):
        if self.centers is None:
            return 0.0
        c = self.centers if idx is None else self.centers[idx]
        return float(0.5 * np.mean(np.sum((x - c) ** 2, axis=1)))

    def grad_h_at(self, x, idx=None):
        if self.centers is None:
            return np.zeros(self.dim_x)
        c = self.centers if idx is None else self.centers[idx]
        return x - c.mean(axis=0)

    def g_at(self, x, idx=None):
        a = self.a if idx is None else self.a[idx]
        b = self.b if idx is None else self.b[idx]
        return np.array([np.mean(a @ x + b)])

    def jac_g_at(self, x, idx=None):
        a = self.a if idx is None else self.a[idx]
        return a.mean(axis=0).reshape(self.dim_x, 1)


class DROClient(ClientOracle):
    """Клиент задачи над локальными образцами с линейной моделью.

    kind="kl":          g_k = mean exp(l / lam), h_k = 0
    kind="chi2":        g_k = mean l, h_k = -mean l^2 / (2 lam)
    kind="chi2-oracle": g_k = mean l, h_k = mean (l + l^2 / (2 lam))
    kind="erm":         g_k = mean l, h_k = mean l (f = 0, обычная эмпирическая потеря)
    """

    def __init__(self, dataset: ClientDataset, loss: LossModel, lam: float, kind: str):
        if kind not in DRO_KINDS:
            raise ConfigError(f"sample client kind must be one of: {list(DRO_KINDS)}")
        self.dataset = dataset
        self.loss = loss
        self.lam = float(lam)
        self.kind = kind
        self.dim_x = dataset.dim
        self.dim_g = 1
        self.n_g = dataset.n_samples
        self.n_h = dataset.n_samples
        self.has_h = kind != "kl"

    def _rows(self, idx):
        if idx is None:
            return self.dataset.features, self.dataset.labels
        return self.dataset.features[idx], self.dataset.labels[idx]

    def losses(self, x: np.ndarray, idx: Optional[np.ndarray] = None) -> np.ndarray:
        a, y = self._rows(idx)
        return self.loss.value(a @ x, y)

    def _loss_and_slope(self, x, idx):
        a, y = self._rows(idx)
        scores = a @ x
        return a, self.loss.value(scores, y), self.loss.derivative(scores, y)

    def h_at(self, x, idx=None):
        if self.kind == "kl":
            return 0.0
        ell = self.losses(x, idx)
        if self.kind == "chi2":
            return float(-np.mean(ell ** 2) / (2.0 * self.lam))
        if self.kind == "erm":
            return float(np.mean(ell))
        return float(np.mean(ell + ell ** 2 / (2.0 * self.lam)))

    def grad_h_at(self, x, idx=None):
        if self.kind == "kl":
            return np.zeros(self.dim_x)
        a, ell, slope = self._loss_and_slope(x, idx)
        if self.kind == "chi2":
            weights = -ell * slope / self.lam
        elif self.kind == "erm":
            weights = slope
        else:
            weights = slope * (1.0 + ell / self.lam)
        return a.T @ weights / a.shape[0]

    def _exp_losses(self, ell):
        with np.errstate(over="ignore"):
            values = np.exp(ell / self.lam)
        if not np.all(np.isfinite(values)):
            raise NumericalError(f"exp(loss / lambda) overflowed for lambda={self.lam}")
        return values

    def g_at(self, x, idx=None):
        ell = self.losses(x, idx)
        if self.kind == "kl":
            return np.array([np.mean(self._exp_losses(ell))])
        return np.array([np.mean(ell)])

    def jac_g_at(self, x, idx=None):
        a, ell, slope = self._loss_and_slope(x, idx)
        if self.kind == "kl":
            slope = self._exp_losses(ell) * slope / self.lam
        return (a.T @ slope / a.shape[0]).reshape(self.dim_x, 1)


class OuterMap(ABC):
    """Детерминированная внешняя функция f и её градиент.

    floor - нижняя граница области определения f по каждой координате (None - вся ось).
    """

    is_constant = False
    floor: Optional[float] = None

    @abstractmethod
    def value(self, y: np.ndarray) -> float:
        ...

    @abstractmethod
    def grad(self, y: np.ndarray) -> np.ndarray:
        ...

    def project(self, y: np.ndarray) -> Tuple[np.ndarray, bool]:
        """Проекция оценки y на область определения; второй элемент - была ли она сдвинута"""
        if self.floor is None:
            return y, False
        projected = np.maximum(y, self.floor)
        return projected, bool(np.any(projected != y))


class SqrtOuter(OuterMap):
    """f(y) = sqrt(||y||^2 + shift)"""

    def __init__(self, shift: float = 4.0):
        self.shift = shift

    def value(self, y):
        return float(np.sqrt(y @ y + self.shift))

    def grad(self, y):
        return y / np.sqrt(y @ y + self.shift)


class LogOuter(OuterMap):
    """f(y) = lam * log(y), y > 0"""

    def __init__(self, lam: float, floor: Optional[float] = None):
        if floor is not None and floor <= 0:
            raise ConfigError(f"log outer map floor must be positive, got {floor}")
        self.lam = lam
        self.floor = floor

    def value(self, y):
        if np.any(y <= 0):
            raise NumericalError(f"log outer map needs a positive embedding, got {y}")
        return float(self.lam * np.sum(np.log(y)))

    def grad(self, y):
        if np.any(y <= 0):
            raise NumericalError(f"log outer map needs a positive embedding, got {y}")
        return self.lam / y


class QuadraticOuter(OuterMap):
    """f(y) = scale / 2 * ||y||^2"""

    def __init__(self, scale: float):
        self.scale = scale
        self.is_constant = scale == 0.0

    def value(self, y):
        return float(0.5 * self.scale * (y @ y))

    def grad(self, y):
        return self.scale * y


class ZeroOuter(OuterMap):
    is_constant = True

    def value(self, y):
        return 0.0

    def grad(self, y):
        return np.zeros_like(y, dtype=float)


class CompositionalProblem:
    """Федеративная цель Phi(x) = (1/K) sum h_k(x) + f((1/K) sum g_k(x))"""

    def __init__(self, name: str, clients: List[ClientOracle], outer: OuterMap,
                 constants: LipschitzConstants, description: str = ""):
        if not clients:
            raise ConfigError("a problem needs at least one client")
        dims = {(c.dim_x, c.dim_g) for c in clients}
        if len(dims) != 1:
            raise DimensionError(f"clients disagree on (dim_x, dim_g): {sorted(dims)}")
        self.name = name
        self.clients = list(clients)
        self.outer = outer
        self.constants = constants
        self.description = description
        self.dim_x, self.dim_g = dims.pop()
        # отложенная выборка для оценки классификатора (задаётся при сборке из данных)
        self.holdout: Optional[ClientDataset] = None

    @property
    def K(self) -> int:
        return len(self.clients)

    @property
    def is_deterministic(self) -> bool:
        return all(c.n_g == 1 and c.n_h <= 1 for c in self.clients)

    def check_point(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.shape[0] != self.dim_x:
            raise DimensionError(f"expected a {self.dim_x}-vector, got {x.shape[0]} entries")
        return x

    def g(self, x) -> np.ndarray:
        return fixed_order_mean([c.g(x) for c in self.clients])

    def h(self, x) -> float:
        return float(fixed_order_mean([np.array([c.h(x)]) for c in self.clients])[0])

    def phi(self, x) -> float:
        x = self.check_point(x)
        return self.h(x) + self.outer.value(self.g(x))

    def grad_phi(self, x) -> np.ndarray:
        x = self.check_point(x)
        grad_h = fixed_order_mean([c.grad_h(x) for c in self.clients])
        if self.outer.is_constant:
            return grad_h
        jac = fixed_order_mean([c.jac_g(x) for c in self.clients])
        return grad_h + jac @ self.outer.grad(self.g(x))

    def sample_losses(self, x) -> np.ndarray:
        """Потери всех образцов всех клиентов (только для DRO-задач)"""
        x = self.check_point(x)
        if not all(isinstance(c, DROClient) for c in self.clients):
            raise ConfigError(f"problem {self.name} has no per-sample losses")
        return np.concatenate([c.losses(x) for c in self.clients])

    def __repr__(self):
        return f"CompositionalProblem(name={self.name!r}, K={self.K}, d={self.dim_x}, d_g={self.dim_g})"


def eval_true_phi(problem: CompositionalProblem, x) -> float:
    return problem.phi(x)


def eval_true_grad_phi(problem: CompositionalProblem, x) -> np.ndarray:
    return problem.grad_phi(x)


def build_counterexample() -> CompositionalProblem:
    """K=2, g_1 = 4x - 4, g_2 = -2x + 4, f(y) = sqrt(y^2 + 4), h = 0"""
    clients = [
        QuadraticClient(a=[[4.0]], b=[-4.0]),
        QuadraticClient(a=[[-2.0]], b=[4.0]),
    ]
    constants = LipschitzConstants(L_f=0.5, B_f=1.0, B_g=4.0, Delta_g=3.0)
    return CompositionalProblem("counterexample", clients, SqrtOuter(4.0), constants,
                                description="Phi(x) = sqrt(x^2 + 4)")


def _check_dro_inputs(datasets: Sequence[ClientDataset], lam: float):
    if lam <= 0:
        raise ConfigError(f"lambda must be positive, got {lam}")
    if not datasets:
        raise ConfigError("DRO problem needs at least one client dataset")
    dims = {ds.dim for ds in datasets}
    if len(dims) != 1:
        raise DimensionError(f"client datasets disagree on feature dimension: {sorted(dims)}")


def _dro_constants(datasets: Sequence[ClientDataset], loss: LossModel, lam: float,
                   radius: float, kind: str) -> LipschitzConstants:
    """Консервативные оценки констант на шаре ||x|| <= radius"""
    max_row = max(float(np.max(np.linalg.norm(ds.features, axis=1))) for ds in datasets)
    max_label = max(float(np.max(np.abs(ds.labels))) for ds in datasets)
    top_loss, top_slope, top_curv = loss.bounds(radius * max_row, max_label)

    if kind == "kl":
        scale = float(np.exp(top_loss / lam))
        B_g = scale * top_slope * max_row / lam
        return LipschitzConstants(
            L_f=lam, B_f=lam,
            B_g=B_g,
            L_g=scale * (top_slope ** 2 / lam ** 2 + top_curv / lam) * max_row ** 2,
            sigma_g=max((scale - 1.0) / 2.0, B_g),
            Delta_g=2.0 * B_g,
        )

    B_g = top_slope * max_row
    h_slope = top_loss * top_slope * max_row / lam
    if kind == "chi2-oracle":
        h_slope += B_g
    return LipschitzConstants(
        L_f=1.0 / lam,
        B_f=top_loss / lam,
        B_g=B_g,
        L_g=top_curv * max_row ** 2,
        L_h=(top_slope ** 2 + top_loss * top_curv) * max_row ** 2 / lam
            + (top_curv * max_row ** 2 if kind == "chi2-oracle" else 0.0),
        sigma_g=max(top_loss / 2.0, B_g),
        sigma_h=h_slope,
        Delta_g=2.0 * B_g,
        Delta_h=2.0 * h_slope,
    )


def build_kl_dro(datasets: Sequence[ClientDataset], lam: float,
                 loss_model: Union[str, LossModel] = "logistic",
                 radius: float = 1.0) -> CompositionalProblem:
    """KL-штраф: Phi(x) = lam * log((1/K) sum_k mean_i exp(l_i / lam)).

    Значение совпадает с максимумом по симплексу с KL-штрафом; форма без
    множителя lam отличается монотонным масштабированием.
    """
    _check_dro_inputs(datasets, lam)
    loss = get_loss(loss_model) if isinstance(loss_model, str) else loss_model
    clients = [DROClient(ds, loss, lam, "kl") for ds in datasets]
    constants = _dro_constants(datasets, loss, lam, radius, "kl")
    logger.info(f"KL-DRO problem built: K={len(clients)}, lambda={lam}, loss={loss.name}")
    return CompositionalProblem("kl-dro", clients, LogOuter(lam, floor=KL_EMBEDDING_FLOOR), constants)


def build_chi2_dro(datasets: Sequence[ClientDataset], lam: float,
                   loss_model: Union[str, LossModel] = "logistic",
                   variant: str = "printed", radius: float = 1.0) -> CompositionalProblem:
    """chi^2-штраф.

    variant="printed": h = -mean l^2 / (2 lam), f(y) = y^2 / (2 lam)  (= -Var(l) / (2 lam))
    variant="oracle":  h = mean(l + l^2 / (2 lam)), f(y) = -y^2 / (2 lam)
                       (= mean l + Var(l) / (2 lam), внутренний максимум при p > 0)
    """
    _check_dro_inputs(datasets, lam)
    if variant not in ("printed", "oracle"):
        raise ConfigError(f"chi2 variant must be 'printed' or 'oracle', got {variant!r}")
    loss = get_loss(loss_model) if isinstance(loss_model, str) else loss_model
    kind = "chi2" if variant == "printed" else "chi2-oracle"
    clients = [DROClient(ds, loss, lam, kind) for ds in datasets]
    outer = QuadraticOuter(1.0 / lam if variant == "printed" else -1.0 / lam)
    constants = _dro_constants(datasets, loss, lam, radius, kind)
    logger.info(f"chi2-DRO problem built: K={len(clients)}, lambda={lam}, variant={variant}")
    name = "chi2-dro" if variant == "printed" else "chi2-dro-oracle"
    return CompositionalProblem(name, clients, outer, constants)


def build_erm(datasets: Sequence[ClientDataset], loss_model: Union[str, LossModel] = "logistic",
              radius: float = 1.0) -> CompositionalProblem:
    """Обычная эмпирическая потеря: Phi(x) = (1/K) sum_k mean_i l_i(x), f = 0"""
    if not datasets:
        raise ConfigError("ERM problem needs at least one client dataset")
    dims = {ds.dim for ds in datasets}
    if len(dims) != 1:
        raise DimensionError(f"client datasets disagree on feature dimension: {sorted(dims)}")
    loss = get_loss(loss_model) if isinstance(loss_model, str) else loss_model
    clients = [DROClient(ds, loss, 1.0, "erm") for ds in datasets]

    max_row = max(float(np.max(np.linalg.norm(ds.features, axis=1))) for ds in datasets)
    max_label = max(float(np.max(np.abs(ds.labels))) for ds in datasets)
    top_loss, top_slope, top_curv = loss.bounds(radius * max_row, max_label)
    slope = top_slope * max_row
    curvature = top_curv * max_row ** 2
    constants = LipschitzConstants(
        L_h=curvature, L_g=curvature, B_g=slope,
        sigma_h=slope, sigma_g=max(top_loss / 2.0, slope),
        Delta_h=2.0 * slope, Delta_g=2.0 * slope,
    )
    logger.info(f"ERM problem built: K={len(clients)}, loss={loss.name}")
    return CompositionalProblem("erm", clients, ZeroOuter(), constants,
                                description="unweighted empirical loss")


@dataclass
class QuadraticSamples:
    a: np.ndarray
    b: np.ndarray
    centers: Optional[np.ndarray] = None


def make_quadratic_samples(K: int, n_per_client: int, dim: int, hetero: float = 1.0,
                           noise: float = 0.5, seed: int = 0) -> List[QuadraticSamples]:
    """Неоднородные клиенты: сдвиги центров и наклонов между клиентами плюс шум образцов"""
    if K < 1 or n_per_client < 1 or dim < 1:
        raise ConfigError("K, n_per_client and dim must all be >= 1")
    rng = np.random.default_rng(seed)
    base_slope = rng.normal(size=dim) / np.sqrt(dim)
    samples = []
    for _ in range(K):
        center = hetero * rng.normal(size=dim)
        slope = base_slope + 0.5 * hetero * rng.normal(size=dim) / np.sqrt(dim)
        offset = hetero * rng.normal()
        samples.append(QuadraticSamples(
            a=slope + 0.1 * noise * rng.normal(size=(n_per_client, dim)) / np.sqrt(dim),
            b=offset + noise * rng.normal(size=n_per_client),
            centers=center + noise * rng.normal(size=(n_per_client, dim)),
        ))
    return samples


def build_quadratic(samples: Sequence[QuadraticSamples], gamma: float = 1.0,
                    radius: float = 1.0) -> CompositionalProblem:
    """Phi(x) = (1/K) sum_k mean_i 0.5 ||x - c_i||^2 + gamma / 2 * ((1/K) sum_k mean_i a_i^T x + b_i)^2"""
    if not samples:
        raise ConfigError("quadratic problem needs at least one client")
    clients = [QuadraticClient(s.a, s.b, s.centers) for s in samples]

    slopes = [np.atleast_2d(s.a) for s in samples]
    offsets = [np.asarray(s.b, dtype=float).reshape(-1) for s in samples]
    mean_slopes = [a.mean(axis=0) for a in slopes]
    mean_offsets = [float(b.mean()) for b in offsets]
    B_g = max(float(np.max(np.linalg.norm(a, axis=1))) for a in slopes)
    top_offset = max(float(np.max(np.abs(b))) for b in offsets)
    global_slope = fixed_order_mean(mean_slopes)

    sigma_g = 0.0
    for a, b, a_bar, b_bar in zip(slopes, offsets, mean_slopes, mean_offsets):
        spread = np.linalg.norm(a - a_bar, axis=1)
        value_dev = np.sqrt(np.mean((spread * radius + np.abs(b - b_bar)) ** 2))
        sigma_g = max(sigma_g, float(value_dev), float(np.sqrt(np.mean(spread ** 2))))
    Delta_g = max(float(np.linalg.norm(a_bar - global_slope)) for a_bar in mean_slopes)

    sigma_h = Delta_h = L_h = 0.0
    with_centers = [np.atleast_2d(s.centers) for s in samples if s.centers is not None]
    if with_centers:
        L_h = 1.0
        center_means = [c.mean(axis=0) for c in with_centers]
        global_center = fixed_order_mean(center_means)
        sigma_h = max(float(np.sqrt(np.mean(np.sum((c - m) ** 2, axis=1))))
                      for c, m in zip(with_centers, center_means))
        Delta_h = max(float(np.linalg.norm(m - global_center)) for m in center_means)

    constants = LipschitzConstants(
        L_f=abs(gamma), B_f=abs(gamma) * (B_g * radius + top_offset), L_g=0.0, L_h=L_h,
        B_g=B_g, sigma_g=sigma_g, sigma_h=sigma_h, Delta_g=Delta_g, Delta_h=Delta_h,
    )
    return CompositionalProblem("quadratic", clients, QuadraticOuter(gamma), constants)


def build_pure_h(problem: CompositionalProblem) -> CompositionalProblem:
    """Та же задача без композиционной части (f = 0)"""
    c = problem.constants
    constants = c.model_copy(update={"L_f": 0.0, "B_f": 0.0})
    return CompositionalProblem(f"{problem.name}-h-only", problem.clients, ZeroOuter(), constants,
                                description="pure h minimization")
