from abc import ABC, abstractmethod
from typing import Dict

import numpy as np

from problems.models import ConfigError


class LossModel(ABC):
    """Семейство потерь линейной модели: l(x; a, b) = loss(a^T x, b)"""

    name: str = ""

    @abstractmethod
    def value(self, scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
        """Потери по каждому образцу"""

    @abstractmethod
    def derivative(self, scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
        """Производная потерь по score"""

    @abstractmethod
    def bounds(self, max_score: float, max_label: float) -> tuple[float, float, float]:
        """(sup loss, sup |loss'|, sup |loss''|) при |score| <= max_score"""


class LogisticLoss(LossModel):
    name = "logistic"

    @staticmethod
    def _signed(labels: np.ndarray) -> np.ndarray:
        # метки {0,1} переводятся в {-1,+1}
        return np.where(labels > 0, 1.0, -1.0)

    def value(self, scores, labels):
        return np.logaddexp(0.0, -self._signed(labels) * scores)

    def derivative(self, scores, labels):
        y = self._signed(labels)
        return -y * 0.5 * (1.0 - np.tanh(0.5 * y * scores))

    def bounds(self, max_score, max_label):
        return float(np.logaddexp(0.0, max_score)), 1.0, 0.25


class SquaredLoss(LossModel):
    name = "squared"

    def value(self, scores, labels):
        return 0.5 * (scores - labels) ** 2

    def derivative(self, scores, labels):
        return scores - labels

    def bounds(self, max_score, max_label):
        reach = max_score + max_label
        return 0.5 * reach ** 2, reach, 1.0


LOSSES: Dict[str, LossModel] = {
    LogisticLoss.name: LogisticLoss(),
    SquaredLoss.name: SquaredLoss(),
}


def get_loss(name: str) -> LossModel:
    if name not in LOSSES:
        raise ConfigError(f"Loss must be one of: {list(LOSSES)}")
    return LOSSES[name]
