from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field


class FedCOError(Exception):
    """Базовая ошибка симулятора"""


class ConfigError(FedCOError, ValueError):
    pass


class DimensionError(FedCOError, ValueError):
    pass


class DatasetError(FedCOError, ValueError):
    """Ошибка данных; line - номер строки CSV, если известен"""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ScheduleError(FedCOError, ValueError):
    pass


class NumericalError(FedCOError, ArithmeticError):
    pass


class VerificationError(FedCOError):
    pass


class LipschitzConstants(BaseModel):
    """Константы гладкости, дисперсии и неоднородности задачи"""
    model_config = ConfigDict(frozen=True)

    L_f: float = Field(default=0.0, ge=0, description="Smoothness of f")
    L_h: float = Field(default=0.0, ge=0, description="Smoothness of h_k")
    L_g: float = Field(default=0.0, ge=0, description="Smoothness of g_k")
    B_f: float = Field(default=0.0, ge=0, description="Lipschitz constant of f")
    B_g: float = Field(default=0.0, ge=0, description="Mean-squared Lipschitz constant of g_k")
    sigma_h: float = Field(default=0.0, ge=0, description="Variance bound of sampled grad h_k")
    sigma_g: float = Field(default=0.0, ge=0, description="Variance bound of sampled g_k")
    Delta_h: float = Field(default=0.0, ge=0, description="Heterogeneity bound of grad h_k")
    Delta_g: float = Field(default=0.0, ge=0, description="Heterogeneity bound of grad g_k")


class PartitionScheme(str, Enum):
    UNIFORM = "uniform-shard"
    LABEL_SKEW = "label-skew"


@dataclass
class ClientDataset:
    features: np.ndarray
    labels: np.ndarray
    # индексы строк в исходном наборе (заполняется при разбиении)
    source_index: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=float).reshape(-1)
        if self.features.ndim != 2:
            raise DatasetError(f"features must be a 2-d matrix, got shape {self.features.shape}")
        if self.features.shape[0] < 1:
            raise DatasetError("dataset holds no samples")
        if self.features.shape[0] != self.labels.shape[0]:
            raise DatasetError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels"
            )

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, index: np.ndarray) -> "ClientDataset":
        index = np.asarray(index, dtype=int)
        base = self.source_index if self.source_index is not None else np.arange(self.n_samples)
        return ClientDataset(self.features[index], self.labels[index], source_index=base[index])
