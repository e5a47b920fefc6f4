from typing import List, Literal, Optional, Union

from pydantic import BaseModel, Field, field_validator, model_validator

from problems.models import PartitionScheme

ALGORITHM_TAGS = ("fedavg-case1", "fedavg-case2", "modified-fedavg", "feddro", "parallel-sgd")
PROBLEM_KINDS = ("counterexample", "kl-dro", "chi2-dro", "erm", "quadratic")
SWEEP_AXES = ("K", "I", "eta", "T")


class ProblemSpec(BaseModel):
    """Описание задачи: вид, параметры и источник данных"""
    kind: Literal["counterexample", "kl-dro", "chi2-dro", "erm", "quadratic"] = Field(description="Problem family")
    K: int = Field(default=2, ge=1, description="Number of clients (ignored by the counterexample)")
    lam: float = Field(default=1.0, gt=0, description="DRO penalty lambda")
    chi2_variant: Literal["printed", "oracle"] = "printed"
    loss: Literal["logistic", "squared"] = "logistic"
    radius: float = Field(default=1.0, gt=0, description="Domain radius for declared constants")
    dataset_path: Optional[str] = Field(default=None, description="CSV dataset; generated when absent")
    n_total: int = Field(default=200, ge=1)
    dim: int = Field(default=5, ge=1)
    imbalance_ratio: float = Field(default=1.0, gt=0, le=1)
    partition: PartitionScheme = PartitionScheme.UNIFORM
    alpha: float = Field(default=0.5, gt=0, description="Dirichlet concentration for label skew")
    data_seed: int = Field(default=0, ge=0, description="Seed of the data generator and partition")
    holdout_fraction: float = Field(default=0.0, ge=0, lt=1, description="Share of each class held out for evaluation")
    n_per_client: int = Field(default=32, ge=1)
    hetero: float = Field(default=1.0, ge=0)
    noise: float = Field(default=0.5, ge=0)
    gamma: float = Field(default=1.0)
    h_only: bool = Field(default=False, description="Drop the compositional part (f = 0), quadratic only")

    @model_validator(mode="after")
    def validate_data_options(self):
        # у остальных видов h не является потерей на данных: h = 0 или -mean l^2 / (2 lam)
        if self.h_only and self.kind != "quadratic":
            raise ValueError(f"h_only applies to the quadratic problem only, not {self.kind!r}; "
                             "use kind = 'erm' for the unweighted loss baseline")
        if self.holdout_fraction and self.kind in ("counterexample", "quadratic"):
            raise ValueError(f"holdout_fraction needs a classification dataset, not {self.kind!r}")
        return self


class HyperParamSpec(BaseModel):
    mode: Literal["manual", "theory"] = "manual"
    eta: float = Field(default=0.01, ge=0, description="Constant step size (manual mode)")
    beta: float = Field(default=1.0, ge=0, le=1, description="Constant momentum (manual mode)")
    I: Optional[int] = Field(default=1, ge=1, description="Local updates; theory mode uses I_max when null")
    T: int = Field(default=1000, ge=1)
    batch_h: int = Field(default=1, ge=1)
    batch_g: int = Field(default=1, ge=1)
    full_batch: bool = False
    eta_scale: float = Field(default=1.0, gt=0, le=1, description="Multiplier on the theory step size")
    L_bar_variant: Literal["printed", "alt"] = "printed"

    @model_validator(mode="after")
    def validate_period(self):
        if self.I is None and self.mode == "manual":
            raise ValueError("I is required in manual mode")
        if self.I is not None and self.I > self.T:
            raise ValueError(f"I={self.I} exceeds the horizon T={self.T}")
        return self


class RunConfig(BaseModel):
    """Полная конфигурация одного запуска"""
    name: str = Field(default="run", min_length=1)
    problem: ProblemSpec
    algorithm: Literal["fedavg-case1", "fedavg-case2", "modified-fedavg", "feddro", "parallel-sgd"]
    hyper: HyperParamSpec = Field(default_factory=HyperParamSpec)
    seed: int = Field(default=0, ge=0, description="Master seed")
    cadence: int = Field(default=1, ge=1, description="Record metrics every n iterations")
    output_dir: Optional[str] = None
    x0: Union[float, List[float]] = Field(default=0.0, description="Initial point (scalar is broadcast)")
    y0: Optional[List[float]] = Field(default=None, description="FedDRO embedding warm start")
    store_iterates: bool = True

    @field_validator("y0")
    def validate_y0(cls, v, info):
        if v is not None and info.data.get("algorithm") != "feddro":
            raise ValueError("y0 is only used by feddro")
        return v

    @model_validator(mode="after")
    def validate_algorithm(self):
        if self.algorithm == "parallel-sgd" and not (self.problem.h_only or self.problem.kind == "erm"):
            raise ValueError("parallel-sgd needs problem.kind = 'erm' or a quadratic problem with h_only = true")
        return self
