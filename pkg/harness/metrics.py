from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from problems.losses import LossModel
from problems.models import ClientDataset
from problems.problems import CompositionalProblem, DROClient, eval_true_grad_phi, fixed_order_mean


@dataclass
class CommLedger:
    """Счётчики передач (в векторах). Загрузки клиент -> сервер и рассылки считаются отдельно"""
    dim_x: int
    dim_g: int
    highdim_up: int = 0
    highdim_down: int = 0
    lowdim_up: int = 0
    lowdim_down: int = 0

    def share_models(self, K: int):
        self.highdim_up += K
        self.highdim_down += K

    def share_embeddings(self, K: int):
        self.lowdim_up += K
        self.lowdim_down += K

    @property
    def reals_up(self) -> int:
        return self.highdim_up * self.dim_x + self.lowdim_up * self.dim_g

    @property
    def reals_down(self) -> int:
        return self.highdim_down * self.dim_x + self.lowdim_down * self.dim_g

    def as_dict(self) -> Dict[str, int]:
        out = {k: v for k, v in asdict(self).items() if k not in ("dim_x", "dim_g")}
        out.update(reals_up=self.reals_up, reals_down=self.reals_down)
        return out


@dataclass
class TraceRow:
    iter: int
    round: int
    grad_norm_sq: float
    drift: float
    embed_bias: float
    comm_highdim_up: int
    comm_lowdim_up: int
    comm_highdim_down: int
    comm_lowdim_down: int
    samples_consumed: int


TRACE_COLUMNS = [f.name for f in fields(TraceRow)]


@dataclass
class RunTrace:
    rows: List[TraceRow] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def append(self, row: TraceRow):
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.rows], columns=TRACE_COLUMNS)


def record_metrics(problem: CompositionalProblem, states: Sequence, t: int, sync_round: int,
                   ledger: CommLedger, samples_consumed: int) -> TraceRow:
    """Строка трассы в точке мгновенного среднего x_bar^t по точным Phi и g"""
    xs = [s.x for s in states]
    x_bar = fixed_order_mean(xs)
    grad = eval_true_grad_phi(problem, x_bar)
    drift = float(np.mean([np.sum((x - x_bar) ** 2) for x in xs]))
    y_bar = fixed_order_mean([s.y for s in states])
    bias = y_bar - problem.g(x_bar)
    # счётчики в трассе - в вещественных числах
    return TraceRow(
        iter=t,
        round=sync_round,
        grad_norm_sq=float(grad @ grad),
        drift=drift,
        embed_bias=float(bias @ bias),
        comm_highdim_up=ledger.highdim_up * ledger.dim_x,
        comm_lowdim_up=ledger.lowdim_up * ledger.dim_g,
        comm_highdim_down=ledger.highdim_down * ledger.dim_x,
        comm_lowdim_down=ledger.lowdim_down * ledger.dim_g,
        samples_consumed=samples_consumed,
    )


def classification_metrics(dataset: ClientDataset, loss: LossModel, x: np.ndarray) -> Dict[str, float]:
    """Точность линейного классификатора sign(a^T x): общая, по классу-меньшинству и худшая по классам потеря"""
    scores = dataset.features @ x
    positive = dataset.labels > 0
    correct = (scores > 0) == positive
    ell = loss.value(scores, dataset.labels)

    per_class = []
    for label in np.unique(dataset.labels):
        mask = dataset.labels == label
        per_class.append((int(mask.sum()), float(label), float(correct[mask].mean()), float(ell[mask].mean())))
    minority = min(per_class, key=lambda c: c[0])
    return {
        "accuracy": float(correct.mean()),
        "minority_label": minority[1],
        "minority_accuracy": minority[2],
        "worst_class_loss": max(c[3] for c in per_class),
    }


def evaluate_classifier(problem: CompositionalProblem, x: np.ndarray) -> Optional[Dict[str, Any]]:
    """Метрики на объединённых данных клиентов и на отложенной выборке; None для задач без логистических данных"""
    clients = problem.clients
    if not all(isinstance(c, DROClient) and c.loss.name == "logistic" for c in clients):
        return None
    x = problem.check_point(x)
    pooled = ClientDataset(np.vstack([c.dataset.features for c in clients]),
                           np.concatenate([c.dataset.labels for c in clients]))
    loss = clients[0].loss
    holdout = problem.holdout
    return {
        "train": classification_metrics(pooled, loss, x),
        "holdout": classification_metrics(holdout, loss, x) if holdout is not None else None,
    }
