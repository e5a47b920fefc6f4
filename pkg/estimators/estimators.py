from dataclasses import dataclass
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from logger.sim_logger import get_logger
from problems.models import DimensionError
from problems.problems import ClientOracle, OuterMap

logger = get_logger("estimators")


class BatchSpec(BaseModel):
    """Размеры пакетов на клиента за итерацию; full=True - весь локальный набор"""
    model_config = ConfigDict(frozen=True)

    batch_h: int = Field(default=1, ge=1, description="|b_h| per client per iteration")
    batch_g: int = Field(default=1, ge=1, description="|b_g| per client per iteration")
    full: bool = Field(default=False, description="Use the full local sample set every iteration")


@dataclass
class SampledBatch:
    """Индексы образцов одной итерации; None - полный локальный набор"""
    h_idx: Optional[np.ndarray]
    g_idx: Optional[np.ndarray]

    def size(self, client: ClientOracle) -> int:
        n_h = 0
        if client.has_h:
            n_h = client.n_h if self.h_idx is None else self.h_idx.shape[0]
        n_g = client.n_g if self.g_idx is None else self.g_idx.shape[0]
        return n_h + n_g


def _check_batch(size: int, label: str):
    if size < 1:
        raise ValueError(f"{label} must be >= 1, got {size}")


def draw_batch(client: ClientOracle, batch: BatchSpec, rng: np.random.Generator) -> SampledBatch:
    """Одна выборка на итерацию: общая для градиента и для обновления оценки g"""
    if batch.full:
        return SampledBatch(None, None)
    h_idx = client.sample_h(batch.batch_h, rng) if client.has_h else None
    return SampledBatch(h_idx, client.sample_g(batch.batch_g, rng))


def clamp_beta(beta: float) -> tuple[float, bool]:
    if beta > 1.0:
        logger.warning(f"Momentum beta={beta:.6g} exceeds 1, clamped to 1")
        return 1.0, True
    return beta, False


def _check_dims(client: ClientOracle, x: np.ndarray, label: str = "x"):
    if x.shape != (client.dim_x,):
        raise DimensionError(f"{label} must have shape ({client.dim_x},), got {x.shape}")


def batch_mean_g(client: ClientOracle, x: np.ndarray, batch_g: int,
                 rng: Optional[np.random.Generator] = None,
                 idx: Optional[np.ndarray] = None) -> np.ndarray:
    """Эмпирическое среднее g_k(x; zeta) по пакету (с возвращением)"""
    _check_batch(batch_g, "batch_g")
    _check_dims(client, x)
    if idx is None and rng is not None:
        idx = client.sample_g(batch_g, rng)
    return client.g_at(x, idx)


def stochastic_phi_grad(client: ClientOracle, outer: OuterMap, x: np.ndarray, y_bar: np.ndarray,
                        batch: BatchSpec, rng: Optional[np.random.Generator] = None,
                        sample: Optional[SampledBatch] = None) -> np.ndarray:
    """Стохастический градиент: mean grad h_k + (mean grad g_k) grad f(y_bar)"""
    _check_dims(client, x)
    if y_bar.shape != (client.dim_g,):
        raise DimensionError(f"y_bar must have shape ({client.dim_g},), got {y_bar.shape}")
    if sample is None:
        sample = draw_batch(client, batch, rng)

    grad = client.grad_h_at(x, sample.h_idx) if client.has_h else np.zeros(client.dim_x)
    if outer.is_constant:
        return grad
    return grad + client.jac_g_at(x, sample.g_idx) @ outer.grad(y_bar)


def momentum_embedding_update(client: ClientOracle, x_t: np.ndarray, x_prev: np.ndarray,
                              y_prev: np.ndarray, beta: float, batch_g: int,
                              rng: Optional[np.random.Generator] = None,
                              idx: Optional[np.ndarray] = None,
                              full: bool = False) -> np.ndarray:
    """Гибридная оценка: y_t = (1 - beta)(y_prev - g(x_prev)) + g(x_t) на одном пакете"""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    _check_batch(batch_g, "batch_g")
    _check_dims(client, x_t, "x_t")
    _check_dims(client, x_prev, "x_prev")
    if y_prev is not None and y_prev.shape != (client.dim_g,):
        raise DimensionError(f"y_prev must have shape ({client.dim_g},), got {y_prev.shape}")
    if idx is None and not full:
        idx = client.sample_g(batch_g, rng)

    g_now = client.g_at(x_t, idx)
    if beta == 1.0:
        return g_now
    return (1.0 - beta) * (y_prev - client.g_at(x_prev, idx)) + g_now
