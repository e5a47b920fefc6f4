"""
Оркестрация экспериментов: сборка задачи по конфигурации, запуск алгоритма,
сохранение трассы и метаданных, сетки параметров и сводные таблицы.
"""
import asyncio
import json
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError

from algorithms.algorithms import ALGORITHMS
from algorithms.models import FederatedRunResult, HyperParams
from config import load_config, load_int
from estimators.estimators import BatchSpec
from harness.metrics import TRACE_COLUMNS, evaluate_classifier, record_metrics
from harness.models import SWEEP_AXES, ProblemSpec, RunConfig
from harness.storage import SUMMARY_BY_VALUE_FILE, RunStorage, SweepStorage
from logger.sim_logger import get_logger
from problems.datasets import build_synthetic_logistic, load_csv_dataset, partition_dataset, split_holdout
from problems.models import ConfigError, FedCOError
from problems.problems import (
    CompositionalProblem,
    build_chi2_dro,
    build_counterexample,
    build_erm,
    build_kl_dro,
    build_pure_h,
    build_quadratic,
    eval_true_grad_phi,
    eval_true_phi,
    make_quadratic_samples,
)
from schedule.schedule import TheorySchedule, complexity_prediction, predicted_bound, theory_schedule

logger = get_logger("harness")

__all__ = [
    "build_problem", "hitting_iteration", "load_run_config", "record_metrics", "report",
    "resolve_hyperparams", "run_experiment", "seed_average", "sweep", "with_overrides",
]

INT_AXES = ("K", "I", "T")
AXIS_FIELDS = {"K": "problem.K", "I": "hyper.I", "eta": "hyper.eta", "T": "hyper.T"}


def load_run_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}")
    return validate_config(payload)


def validate_config(payload: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(payload)
    except ValidationError as e:
        raise ConfigError(f"invalid run config: {e}") from e


def with_overrides(config: RunConfig, **overrides) -> RunConfig:
    """Копия конфигурации с заменой полей; вложенные поля через точку ("hyper.I")"""
    payload = config.model_dump(mode="json")
    for dotted, value in overrides.items():
        node = payload
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node[key]
        node[leaf] = value
    return validate_config(payload)


def build_problem(spec: ProblemSpec) -> CompositionalProblem:
    """Задача по описанию: встроенный пример, DRO или ERM над данными, квадратичная"""
    if spec.kind == "counterexample":
        problem = build_counterexample()
    elif spec.kind == "quadratic":
        samples = make_quadratic_samples(spec.K, spec.n_per_client, spec.dim, hetero=spec.hetero,
                                         noise=spec.noise, seed=spec.data_seed)
        problem = build_quadratic(samples, gamma=spec.gamma, radius=spec.radius)
    else:
        if spec.dataset_path:
            dataset = load_csv_dataset(spec.dataset_path)
        else:
            dataset, _ = build_synthetic_logistic(spec.n_total, spec.dim, spec.imbalance_ratio,
                                                  seed=spec.data_seed)
        train, holdout = split_holdout(dataset, spec.holdout_fraction, seed=spec.data_seed)
        shards = partition_dataset(train, spec.K, spec.partition, alpha=spec.alpha, seed=spec.data_seed)
        if spec.kind == "kl-dro":
            problem = build_kl_dro(shards, spec.lam, spec.loss, radius=spec.radius)
        elif spec.kind == "erm":
            problem = build_erm(shards, spec.loss, radius=spec.radius)
        else:
            problem = build_chi2_dro(shards, spec.lam, spec.loss, variant=spec.chi2_variant, radius=spec.radius)
        problem.holdout = holdout
    return build_pure_h(problem) if spec.h_only else problem


def resolve_hyperparams(config: RunConfig,
                        problem: CompositionalProblem) -> Tuple[HyperParams, Optional[TheorySchedule]]:
    spec = config.hyper
    batch = BatchSpec(batch_h=spec.batch_h, batch_g=spec.batch_g, full=spec.full_batch)
    if spec.mode == "manual":
        hp = HyperParams.constant(spec.eta, T=spec.T, I=spec.I, K=problem.K, beta=spec.beta, batch=batch)
        return hp, None

    schedule = theory_schedule(problem.constants, b=spec.batch_g, K=problem.K, T=spec.T, I=spec.I,
                               variant=spec.L_bar_variant, eta_scale=spec.eta_scale)
    I = spec.I if spec.I is not None else schedule.I_max
    logger.info(f"Theory schedule: eta={schedule.eta:.6g}, beta={schedule.beta:.6g}, I={I}, "
                f"T_th={schedule.T_th:.6g}")
    hp = HyperParams.constant(schedule.eta, T=spec.T, I=I, K=problem.K, beta=schedule.beta, batch=batch)
    return hp, schedule


def default_output_dir(config: RunConfig) -> Path:
    if config.output_dir:
        return Path(config.output_dir)
    return Path(load_config("FEDCO_OUTPUT_DIR", "./runs")) / config.name


def _evolution(result: FederatedRunResult) -> Dict[str, Any]:
    """Сводка x_bar по раундам синхронизации (для одномерных задач)"""
    if not result.sync_history or result.x_final.shape[0] != 1:
        return {"sync_rounds": len(result.sync_history), "min_sync_xbar": None, "final_xbar": None}
    values = [float(x[0]) for x in result.sync_history]
    return {"sync_rounds": len(values), "min_sync_xbar": min(values), "final_xbar": values[-1]}


def _initial_point(config: RunConfig, problem: CompositionalProblem) -> np.ndarray:
    x0 = np.asarray(config.x0, dtype=float)
    return np.full(problem.dim_x, float(x0)) if x0.ndim == 0 else problem.check_point(x0)


def _prediction(config: RunConfig, problem: CompositionalProblem, hp: HyperParams,
                result: FederatedRunResult) -> Dict[str, Any]:
    """Теоретическая оценка и порядки сложности при фактических b, K, T, I.

    Phi* неизвестен: в init_gap вместо него берётся наименьшее наблюдённое значение Phi.
    """
    x0 = _initial_point(config, problem)
    phi0 = eval_true_phi(problem, x0)
    gap = phi0 - min(phi0, eval_true_phi(problem, result.x_final), eval_true_phi(problem, result.x_sampled))
    if config.y0 is not None:
        bias = np.asarray(config.y0, dtype=float) - problem.g(x0)
        gap += float(bias @ bias)
    b = config.hyper.batch_g
    bound = predicted_bound(problem.constants, b, problem.K, hp.T, hp.I, gap,
                            variant=config.hyper.L_bar_variant)
    return {
        "init_gap": gap,
        "init_gap_source": "observed minimum of Phi",
        "bound": bound,
        "complexity": (complexity_prediction(bound, b, problem.K, problem.dim_x, problem.dim_g)
                       if bound > 0 else None),
    }


def _classification(problem: CompositionalProblem, result: FederatedRunResult) -> Optional[Dict[str, Any]]:
    final = evaluate_classifier(problem, result.x_final)
    if final is None:
        return None
    return {"final": final, "sampled": evaluate_classifier(problem, result.x_sampled)}


def build_meta(config: RunConfig, problem: CompositionalProblem, hp: HyperParams,
               schedule: Optional[TheorySchedule], result: FederatedRunResult) -> Dict[str, Any]:
    final_grad = eval_true_grad_phi(problem, result.x_final)
    sampled_grad = eval_true_grad_phi(problem, result.x_sampled)
    summary = result.summary()
    summary.update(final_grad_norm_sq=float(final_grad @ final_grad),
                   sampled_grad_norm_sq=float(sampled_grad @ sampled_grad))
    return {
        "config": config.model_dump(mode="json", exclude={"output_dir"}),
        "problem": {
            "name": problem.name,
            "K": problem.K,
            "dim_x": problem.dim_x,
            "dim_g": problem.dim_g,
            "description": problem.description,
            "constants": problem.constants.model_dump(),
        },
        "hyperparams": {"I": hp.I, "T": hp.T, "eta": float(hp.eta_schedule[0]),
                        "beta": float(hp.beta_schedule[0]), "batch": hp.batch.model_dump()},
        "schedule": schedule.model_dump() if schedule is not None else None,
        "prediction": _prediction(config, problem, hp, result) if schedule is not None else None,
        "classification": _classification(problem, result),
        "result": summary,
        "evolution": _evolution(result),
        "trace": {"rows": len(result.trace), "cadence": config.cadence, "columns": TRACE_COLUMNS},
    }


def run_experiment(config: RunConfig, output_dir: Optional[Union[str, Path]] = None,
                   persist: bool = True) -> FederatedRunResult:
    """Один запуск: задача, гиперпараметры, алгоритм, файлы trace.csv и meta.json"""
    started = time.perf_counter()
    try:
        problem = build_problem(config.problem)
        hp, schedule = resolve_hyperparams(config, problem)
        kwargs = {"seed": config.seed, "cadence": config.cadence, "store_iterates": config.store_iterates}
        if config.algorithm == "feddro" and config.y0 is not None:
            kwargs["y0"] = np.asarray(config.y0, dtype=float)
        result = ALGORITHMS[config.algorithm](problem, hp, config.x0, **kwargs)
    except FedCOError as e:
        logger.error(f"Run {config.name!r} failed: {e}")
        raise

    if persist:
        storage = RunStorage(output_dir if output_dir is not None else default_output_dir(config))
        storage.write_trace(result.trace)
        storage.write_meta(build_meta(config, problem, hp, schedule, result))
        storage.write_wallclock(time.perf_counter() - started)
    return result


def _axis_value(axis: str, value) -> Union[int, float]:
    if axis in INT_AXES:
        number = float(value)
        if not number.is_integer():
            raise ConfigError(f"axis {axis} takes integers, got {value!r}")
        return int(number)
    return float(value)


def _cell_config(base: RunConfig, axis: str, value, seed: int) -> RunConfig:
    if axis == "K" and base.problem.kind == "counterexample":
        raise ConfigError("the counterexample has a fixed client count; axis K does not apply")
    if axis == "eta" and base.hyper.mode == "theory":
        raise ConfigError("axis eta needs hyper.mode = 'manual'")
    return with_overrides(base, **{AXIS_FIELDS[axis]: value, "seed": seed})


async def _run_cell(semaphore: asyncio.Semaphore, config: RunConfig, storage: RunStorage):
    async with semaphore:
        return await asyncio.to_thread(run_experiment, config, storage.run_dir)


async def _run_cells(cells: List[Tuple[RunConfig, RunStorage]], workers: int):
    semaphore = asyncio.Semaphore(workers)
    tasks = [
        asyncio.create_task(_run_cell(semaphore, config, storage), name=str(storage.run_dir))
        for config, storage in cells
    ]
    return await asyncio.gather(*tasks, return_exceptions=True)


def sweep(base: RunConfig, axis: str, values: Sequence, seeds: Sequence[int],
          output_dir: Optional[Union[str, Path]] = None, workers: Optional[int] = None) -> pd.DataFrame:
    """Сетка axis x seeds; ячейки независимы и выполняются параллельно"""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of: {list(SWEEP_AXES)}, got {axis!r}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    if not seeds:
        raise ConfigError("sweep needs at least one seed")
    workers = workers or load_int("FEDCO_SWEEP_WORKERS", 4)
    if workers < 1:
        raise ConfigError(f"sweep workers must be >= 1, got {workers}")

    sweep_storage = SweepStorage(output_dir if output_dir is not None else default_output_dir(base))
    # все ячейки проверяются до первого запуска
    cells = []
    for value in values:
        value = _axis_value(axis, value)
        for seed in seeds:
            cells.append((_cell_config(base, axis, value, int(seed)), sweep_storage.cell(axis, value, int(seed))))

    logger.info(f"Sweep {base.name!r}: axis={axis}, {len(values)} values x {len(seeds)} seeds, "
                f"workers={workers}")
    outcomes = asyncio.run(_run_cells(cells, workers))
    failures = [(storage, o) for (_, storage), o in zip(cells, outcomes) if isinstance(o, BaseException)]
    for storage, error in failures:
        logger.error(f"Sweep cell {storage.run_dir} failed: {error}")
    if failures:
        raise failures[0][1]
    return report(sweep_storage.sweep_dir)


CLASSIFICATION_COLUMNS = ("accuracy", "minority_accuracy", "worst_class_loss")


def _classification_columns(meta: Dict[str, Any]) -> Dict[str, float]:
    """Столбцы сводки по точности; NaN для задач без данных классификации"""
    report = meta.get("classification") or {}
    columns = {}
    for point in ("final", "sampled"):
        train = (report.get(point) or {}).get("train") or {}
        for name in CLASSIFICATION_COLUMNS:
            columns[f"{point}_{name}"] = float(train.get(name, np.nan))
    holdout = (report.get("final") or {}).get("holdout") or {}
    for name in CLASSIFICATION_COLUMNS:
        columns[f"holdout_{name}"] = float(holdout.get(name, np.nan))
    return columns


def _summary_row(axis: str, value: str, seed: int, storage: RunStorage) -> Dict[str, Any]:
    trace = storage.read_trace()
    meta = storage.read_meta()
    last = trace.iloc[-1]
    min_sync = meta.get("evolution", {}).get("min_sync_xbar")
    row = {
        "axis": axis,
        "value": _axis_value(axis, value),
        "seed": seed,
        "final_iter": int(last["iter"]),
        "final_grad_norm_sq": float(last["grad_norm_sq"]),
        "avg_grad_norm_sq": float(trace["grad_norm_sq"].mean()),
        "min_grad_norm_sq": float(trace["grad_norm_sq"].min()),
        "avg_drift": float(trace["drift"].mean()),
        "min_sync_xbar": np.nan if min_sync is None else float(min_sync),
        "comm_highdim_up": int(last["comm_highdim_up"]),
        "comm_lowdim_up": int(last["comm_lowdim_up"]),
        "samples_consumed": int(last["samples_consumed"]),
    }
    row.update(_classification_columns(meta))
    return row


def report(sweep_dir: Union[str, Path]) -> pd.DataFrame:
    """Пересчёт summary.csv и summary_by_value.csv по файлам ячеек"""
    storage = SweepStorage(sweep_dir)
    rows = [_summary_row(axis, value, seed, cell) for axis, value, seed, cell in storage.cells()]
    if not rows:
        raise ConfigError(f"no sweep cells found under {storage.sweep_dir}")
    summary = pd.DataFrame(rows).sort_values(["axis", "value", "seed"], kind="stable").reset_index(drop=True)
    storage.write_summary(summary)

    metrics = ["final_grad_norm_sq", "avg_grad_norm_sq", "min_sync_xbar",
               "final_accuracy", "final_minority_accuracy", "final_worst_class_loss"]
    grouped = summary.groupby(["axis", "value"], sort=True)[metrics]
    by_value = grouped.agg(["mean", "std"])
    by_value.columns = [f"{metric}_{stat}" for metric, stat in by_value.columns]
    by_value = by_value.reset_index()
    by_value.insert(2, "n_seeds", grouped.size().to_numpy())
    storage.write_summary(by_value, SUMMARY_BY_VALUE_FILE)
    return summary


def seed_average(traces: Sequence[pd.DataFrame], column: str = "grad_norm_sq") -> pd.Series:
    """Среднее столбца трассы по запускам с разными seed, по номеру итерации"""
    if not traces:
        raise ValueError("need at least one trace")
    stacked = pd.concat([t.set_index("iter")[column] for t in traces], axis=1)
    return stacked.mean(axis=1)


def hitting_iteration(series: pd.Series, eps: float) -> Optional[int]:
    """Первая итерация, на которой значение не превышает eps"""
    hits = series.index[series.to_numpy() <= eps]
    return int(hits[0]) if len(hits) else None
