import re
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from logger.sim_logger import get_logger
from problems.models import ClientDataset, ConfigError, DatasetError, PartitionScheme

logger = get_logger("datasets")

LABEL_SKEW_RETRIES = 100


def build_synthetic_logistic(n_total: int, dim: int, imbalance_ratio: float = 1.0, K: int = 1,
                             hetero_scheme: Union[str, PartitionScheme] = PartitionScheme.UNIFORM,
                             alpha: float = 0.5, seed: int = 0,
                             margin: float = 1.0) -> Tuple[ClientDataset, List[ClientDataset]]:
    """Бинарный набор: два гауссовых облака вдоль случайного направления.

    Класс 1 (меньшинство) содержит imbalance_ratio * (число образцов класса 0).
    Возвращает полный набор и его разбиение на K клиентов.
    """
    if K < 1:
        raise ConfigError(f"K must be >= 1, got {K}")
    if n_total < K:
        raise ConfigError(f"n_total={n_total} is smaller than the client count K={K}")
    if dim < 1:
        raise ConfigError(f"dim must be >= 1, got {dim}")
    if not 0 < imbalance_ratio <= 1:
        raise ConfigError(f"imbalance_ratio must lie in (0, 1], got {imbalance_ratio}")

    majority = int(round(n_total / (1.0 + imbalance_ratio)))
    minority = n_total - majority
    if minority < 1 and n_total >= 2:
        majority, minority = n_total - 1, 1

    rng = np.random.default_rng(seed)
    direction = rng.normal(size=dim)
    direction /= np.linalg.norm(direction)
    labels = np.concatenate([np.zeros(majority), np.ones(minority)])
    signs = np.where(labels > 0, 1.0, -1.0)
    features = signs[:, None] * margin * direction[None, :] + rng.normal(size=(n_total, dim))
    order = rng.permutation(n_total)
    dataset = ClientDataset(features[order], labels[order])

    shards = partition_dataset(dataset, K, hetero_scheme, alpha=alpha, seed=seed)
    logger.info(f"Synthetic logistic data: n={n_total}, majority={majority}, minority={minority}, K={K}")
    return dataset, shards


def partition_dataset(dataset: ClientDataset, K: int,
                      scheme: Union[str, PartitionScheme] = PartitionScheme.UNIFORM,
                      alpha: float = 0.5, seed: int = 0) -> List[ClientDataset]:
    """Разбиение на K непересекающихся непустых частей"""
    if K < 1:
        raise ConfigError(f"K must be >= 1, got {K}")
    try:
        scheme = PartitionScheme(scheme)
    except ValueError:
        raise ConfigError(f"Partition scheme must be one of: {[s.value for s in PartitionScheme]}")
    n = dataset.n_samples
    if n < K:
        raise DatasetError(f"cannot split {n} samples into {K} non-empty shards")

    rng = np.random.default_rng(seed)
    if scheme is PartitionScheme.UNIFORM:
        parts = np.array_split(rng.permutation(n), K)
    else:
        if alpha <= 0:
            raise ConfigError(f"Dirichlet alpha must be positive, got {alpha}")
        parts = _label_skew_split(dataset.labels, K, alpha, rng)

    return [dataset.subset(np.sort(p)) for p in parts]


def split_holdout(dataset: ClientDataset, fraction: float,
                  seed: int = 0) -> Tuple[ClientDataset, Optional[ClientDataset]]:
    """Стратифицированное отделение доли fraction каждого класса для оценки"""
    if not 0 <= fraction < 1:
        raise ConfigError(f"holdout fraction must lie in [0, 1), got {fraction}")
    if fraction == 0:
        return dataset, None

    rng = np.random.default_rng([seed, 1])
    held = []
    for c in np.unique(dataset.labels):
        members = rng.permutation(np.flatnonzero(dataset.labels == c))
        held.append(members[:int(round(fraction * members.shape[0]))])
    held = np.sort(np.concatenate(held))
    kept = np.setdiff1d(np.arange(dataset.n_samples), held)
    if held.shape[0] == 0 or kept.shape[0] == 0:
        raise DatasetError(f"holdout fraction {fraction} leaves an empty split of {dataset.n_samples} samples")
    logger.info(f"Holdout split: {kept.shape[0]} training, {held.shape[0]} held-out samples")
    return dataset.subset(kept), dataset.subset(held)


def _label_skew_split(labels: np.ndarray, K: int, alpha: float,
                      rng: np.random.Generator) -> List[np.ndarray]:
    classes = np.unique(labels)
    for attempt in range(1, LABEL_SKEW_RETRIES + 1):
        parts = [[] for _ in range(K)]
        for c in classes:
            members = rng.permutation(np.flatnonzero(labels == c))
            shares = rng.dirichlet(np.full(K, alpha))
            cuts = (np.cumsum(shares)[:-1] * members.shape[0]).astype(int)
            for k, piece in enumerate(np.split(members, cuts)):
                parts[k].append(piece)
        parts = [np.concatenate(p) for p in parts]
        if all(p.shape[0] > 0 for p in parts):
            return parts
        logger.warning(f"Label-skew draw {attempt} left an empty client, redrawing")
    raise DatasetError(f"label-skew partition produced an empty client after {LABEL_SKEW_RETRIES} draws")


def load_csv_dataset(path: Union[str, Path]) -> ClientDataset:
    """Чтение CSV: заголовок f0..f{d-1}, последний столбец label"""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset file not found: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise DatasetError(f"dataset file is empty: {path}", line=1)
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        raise DatasetError(f"malformed row: {e}", line=int(match.group(1)) if match else None)

    columns = list(frame.columns)
    if "label" not in columns:
        raise DatasetError("missing required column 'label'", line=1)
    if columns[-1] != "label":
        raise DatasetError("column 'label' must be the last column", line=1)
    expected = [f"f{i}" for i in range(len(columns) - 1)]
    if columns[:-1] != expected:
        raise DatasetError(f"feature columns must be {expected}, got {columns[:-1]}", line=1)
    if frame.shape[0] == 0:
        raise DatasetError("dataset holds no rows", line=2)

    numeric = frame.apply(lambda col: pd.to_numeric(col.str.strip(), errors="coerce"))
    bad = numeric.isna()
    if bad.to_numpy().any():
        row, col = np.argwhere(bad.to_numpy())[0]
        raise DatasetError(
            f"non-numeric or missing value {frame.iat[row, col]!r} in column {columns[col]!r}",
            line=int(row) + 2,
        )
    values = numeric.to_numpy(dtype=float)
    return ClientDataset(values[:, :-1], values[:, -1])


def save_csv_dataset(dataset: ClientDataset, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(dataset.features, columns=[f"f{i}" for i in range(dataset.dim)])
    frame["label"] = dataset.labels
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    logger.info(f"Dataset written: {path} (n={dataset.n_samples}, d={dataset.dim})")
    return path
