import json
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np
import pandas as pd

from harness.metrics import TRACE_COLUMNS, RunTrace
from logger.sim_logger import get_logger

logger = get_logger("storage")

TRACE_FILE = "trace.csv"
META_FILE = "meta.json"
WALLCLOCK_FILE = "wallclock.json"
SUMMARY_FILE = "summary.csv"
SUMMARY_BY_VALUE_FILE = "summary_by_value.csv"
FLOAT_FORMAT = "%.17g"


def _to_builtin(value: Any):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"cannot serialize {type(value).__name__}")


def dump_json(payload: Dict[str, Any]) -> str:
    """Стабильная сериализация: сортировка ключей, фиксированные отступы"""
    return json.dumps(payload, sort_keys=True, indent=2, default=_to_builtin) + "\n"


class RunStorage:
    """Репозиторий файлов одного запуска"""

    def __init__(self, run_dir: Union[str, Path]):
        self.run_dir = Path(run_dir)

    def _prepare(self):
        self.run_dir.mkdir(parents=True, exist_ok=True)

    @property
    def trace_path(self) -> Path:
        return self.run_dir / TRACE_FILE

    @property
    def meta_path(self) -> Path:
        return self.run_dir / META_FILE

    def write_trace(self, trace: RunTrace) -> Path:
        self._prepare()
        trace.to_frame().to_csv(self.trace_path, index=False, float_format=FLOAT_FORMAT,
                                lineterminator="\n")
        logger.info(f"Trace written: {self.trace_path} ({len(trace)} rows)")
        return self.trace_path

    def write_meta(self, meta: Dict[str, Any]) -> Path:
        self._prepare()
        self.meta_path.write_text(dump_json(meta), encoding="utf-8")
        return self.meta_path

    def write_wallclock(self, seconds: float) -> Path:
        # время выполнения хранится отдельно от детерминированных файлов
        self._prepare()
        path = self.run_dir / WALLCLOCK_FILE
        path.write_text(dump_json({"seconds": seconds}), encoding="utf-8")
        return path

    def read_trace(self) -> pd.DataFrame:
        frame = pd.read_csv(self.trace_path, float_precision="round_trip")
        missing = [c for c in TRACE_COLUMNS if c not in frame.columns]
        if missing:
            raise ValueError(f"{self.trace_path} lacks trace columns: {missing}")
        return frame

    def read_meta(self) -> Dict[str, Any]:
        return json.loads(self.meta_path.read_text(encoding="utf-8"))


class SweepStorage:
    """Каталог сетки: подкаталоги axis=value/seed=s и сводные таблицы"""

    def __init__(self, sweep_dir: Union[str, Path]):
        self.sweep_dir = Path(sweep_dir)

    def cell(self, axis: str, value, seed: int) -> RunStorage:
        return RunStorage(self.sweep_dir / f"{axis}={value}" / f"seed={seed}")

    def cells(self):
        """Пары (axis, value, seed, RunStorage) для всех завершённых ячеек"""
        found = []
        for meta in sorted(self.sweep_dir.glob(f"*=*/seed=*/{META_FILE}")):
            run_dir = meta.parent
            axis, value = run_dir.parent.name.split("=", 1)
            seed = int(run_dir.name.split("=", 1)[1])
            found.append((axis, value, seed, RunStorage(run_dir)))
        return found

    def write_summary(self, frame: pd.DataFrame, name: str = SUMMARY_FILE) -> Path:
        self.sweep_dir.mkdir(parents=True, exist_ok=True)
        path = self.sweep_dir / name
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        logger.info(f"Summary written: {path} ({len(frame)} rows)")
        return path

    def read_summary(self, name: str = SUMMARY_FILE) -> pd.DataFrame:
        return pd.read_csv(self.sweep_dir / name)
