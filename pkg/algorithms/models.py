from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from estimators.estimators import BatchSpec
from harness.metrics import CommLedger, RunTrace
from problems.models import ScheduleError


@dataclass
class ClientState:
    k: int
    x: np.ndarray
    x_prev: np.ndarray
    y: np.ndarray
    rng: np.random.Generator


@dataclass
class HyperParams:
    eta_schedule: np.ndarray
    beta_schedule: np.ndarray
    I: int
    T: int
    batch: BatchSpec
    K: int

    def __post_init__(self):
        self.eta_schedule = np.asarray(self.eta_schedule, dtype=float).reshape(-1)
        self.beta_schedule = np.asarray(self.beta_schedule, dtype=float).reshape(-1)
        if self.T < 1:
            raise ScheduleError(f"horizon T must be >= 1, got {self.T}")
        if self.I < 1:
            raise ScheduleError(f"local-update period I must be >= 1, got {self.I}")
        if self.K < 1:
            raise ScheduleError(f"client count K must be >= 1, got {self.K}")
        if self.eta_schedule.shape[0] != self.T or self.beta_schedule.shape[0] != self.T:
            raise ScheduleError(
                f"schedules must have length T={self.T}, got eta={self.eta_schedule.shape[0]}, "
                f"beta={self.beta_schedule.shape[0]}"
            )
        if np.any(self.eta_schedule < 0) or not np.all(np.isfinite(self.eta_schedule)):
            raise ScheduleError("step sizes must be finite and non-negative")
        if np.any(self.beta_schedule < 0) or np.any(self.beta_schedule > 1):
            raise ScheduleError("momentum parameters must lie in [0, 1] after clamping")

    @classmethod
    def constant(cls, eta: float, T: int, I: int = 1, K: int = 1, beta: float = 1.0,
                 batch: Optional[BatchSpec] = None) -> "HyperParams":
        return cls(
            eta_schedule=np.full(T, float(eta)),
            beta_schedule=np.full(T, float(beta)),
            I=I, T=T, batch=batch or BatchSpec(), K=K,
        )


@dataclass
class FederatedRunResult:
    algorithm: str
    trace: RunTrace
    x_final: np.ndarray
    x_sampled: np.ndarray
    sampled_index: int
    comm: CommLedger
    sync_history: List[np.ndarray] = field(default_factory=list)
    iterates: Optional[np.ndarray] = None
    samples_consumed: int = 0
    embedding_projections: int = 0

    def summary(self) -> Dict[str, Any]:
        return {
            "algorithm": self.algorithm,
            "x_final": self.x_final.tolist(),
            "x_sampled": self.x_sampled.tolist(),
            "sampled_index": self.sampled_index,
            "comm": self.comm.as_dict(),
            "samples_consumed": self.samples_consumed,
            "sync_rounds": len(self.sync_history),
            "embedding_projections": self.embedding_projections,
        }
