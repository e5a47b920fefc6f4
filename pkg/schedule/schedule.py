import math
from typing import Dict, List, Optional

from pydantic import BaseModel, Field

from estimators.estimators import clamp_beta
from logger.sim_logger import get_logger
from problems.models import LipschitzConstants, ScheduleError

logger = get_logger("schedule")

L_BAR_VARIANTS = ("printed", "alt")
L_BAR_NOTE = ("L_bar_fg uses 10 L_h^2 + B_f^2 L_g^2 + 40 B_g^4 L_f^2; neighbouring bounds carry "
              "20 B_f^2 L_g^2 (variant 'alt')")


class TheoryConstants(BaseModel):
    L_phi: float
    L_bar_fg: float
    c_beta: float
    C_sigma_h: float
    C_sigma_g: float
    C_Delta_h: float
    C_Delta_g: float
    L_bar_variant: str = "printed"
    note: str = L_BAR_NOTE


class TheorySchedule(BaseModel):
    """Гиперпараметры из теории и сопутствующие константы (поля сериализуются в meta.json)"""
    eta: float = Field(gt=0)
    beta: float = Field(ge=0)
    c_beta: float
    T_th: float
    I_max: int = Field(ge=1)
    L_phi: float
    L_bar_fg: float
    C_sigma_h: float
    C_sigma_g: float
    C_Delta_h: float
    C_Delta_g: float
    beta_clamped: bool = False
    below_threshold: bool = False
    warnings: List[str] = Field(default_factory=list)


def _check_nonnegative(**values):
    for name, value in values.items():
        if value < 0:
            raise ScheduleError(f"{name} must be non-negative, got {value}")


def compute_L_phi(c: LipschitzConstants) -> float:
    """L_Phi = L_h + B_f L_g + B_g^2 L_f"""
    _check_nonnegative(L_h=c.L_h, B_f=c.B_f, L_g=c.L_g, B_g=c.B_g, L_f=c.L_f)
    return c.L_h + c.B_f * c.L_g + c.B_g ** 2 * c.L_f


def derive_stepsize(b: int, K: int, T: int) -> float:
    """eta = sqrt(|b| K / T)"""
    for name, value in (("b", b), ("K", K), ("T", T)):
        if value < 1:
            raise ScheduleError(f"{name} must be >= 1, got {value}")
    return math.sqrt(b * K / T)


def derive_beta(c: LipschitzConstants, eta: float) -> float:
    """beta = min(1, 4 B_g^4 L_f^2 eta)"""
    if eta <= 0:
        raise ScheduleError(f"eta must be positive, got {eta}")
    beta, _ = clamp_beta(4.0 * c.B_g ** 4 * c.L_f ** 2 * eta)
    return beta


def compute_T_threshold(c: LipschitzConstants, b: int, K: int, I: int) -> float:
    """Минимальный горизонт T_th, начиная с которого действует оценка скорости"""
    for name, value in (("b", b), ("K", K), ("I", I)):
        if value < 1:
            raise ScheduleError(f"{name} must be >= 1, got {value}")
    if all(v == 0 for v in (c.L_h, c.B_f, c.L_g, c.B_g, c.L_f)):
        raise ScheduleError("degenerate constants: L_h, B_f, L_g, B_g and L_f are all zero")
    bK = b * K
    L_phi = compute_L_phi(c)
    first = 4.0 * (L_phi * bK + 8.0 * c.B_g ** 2) ** 2 / bK
    numerator = c.B_g ** 4 * (96.0 * c.L_h ** 2 + 96.0 * c.B_f ** 2 * c.L_g ** 2) ** 2
    denominator = bK * (c.L_h ** 2 + 2.0 * c.B_f ** 2 * c.L_g ** 2 + 4.0 * c.B_g ** 4 * c.L_f ** 2) ** 2
    # числитель обращается в ноль вместе со знаменателем
    second = numerator / denominator if denominator > 0 else 0.0
    third = (216.0 * c.L_h ** 2 + 216.0 * c.B_f ** 2 * c.L_g ** 2) * I ** 2 * bK
    return max(first, second, third)


def max_local_updates(T: int, b: int, K: int) -> int:
    """I_max = max(1, floor(T^{1/4} / (|b| K)^{3/4}))"""
    ratio = T ** 0.25 / (b * K) ** 0.75
    return max(1, math.floor(ratio + 1e-9))


def compute_theory_constants(c: LipschitzConstants, variant: str = "printed") -> TheoryConstants:
    if variant not in L_BAR_VARIANTS:
        raise ScheduleError(f"L_bar variant must be one of: {list(L_BAR_VARIANTS)}")
    L_phi = compute_L_phi(c)
    mid = 1.0 if variant == "printed" else 20.0
    L_bar = 10.0 * c.L_h ** 2 + mid * c.B_f ** 2 * c.L_g ** 2 + 40.0 * c.B_g ** 4 * c.L_f ** 2
    c_beta = 4.0 * c.B_g ** 4 * c.L_f ** 2
    return TheoryConstants(
        L_phi=L_phi,
        L_bar_fg=L_bar,
        c_beta=c_beta,
        C_sigma_h=2.0 * L_bar + 4.0 * L_phi + 8.0 * c.B_g ** 2,
        C_sigma_g=2.0 * c.B_f ** 2 * L_bar + 4.0 * L_phi * c.B_f ** 2 + 4.0 * c_beta ** 2
                  + 8.0 * c.B_f ** 2 * c.B_g ** 2,
        C_Delta_h=6.0 * L_bar + 96.0 * c.B_g ** 2,
        C_Delta_g=6.0 * c.B_f ** 2 * L_bar + 96.0 * c.B_f ** 2 * c.B_g ** 2,
        L_bar_variant=variant,
    )


def theory_schedule(c: LipschitzConstants, b: int, K: int, T: int, I: Optional[int] = None,
                    variant: str = "printed", eta_scale: float = 1.0) -> TheorySchedule:
    """Полный набор гиперпараметров для FedDRO по константам задачи"""
    if not 0 < eta_scale <= 1:
        raise ScheduleError(f"eta_scale must lie in (0, 1], got {eta_scale}")
    eta = eta_scale * derive_stepsize(b, K, T)
    raw_beta = 4.0 * c.B_g ** 4 * c.L_f ** 2 * eta
    beta = derive_beta(c, eta)
    I_max = max_local_updates(T, b, K)
    constants = compute_theory_constants(c, variant)
    warnings = []
    try:
        T_th = compute_T_threshold(c, b, K, I or I_max)
    except ScheduleError as e:
        logger.warning(f"T_th unavailable: {e}")
        T_th = 0.0
        warnings.append(str(e))
    if raw_beta > 1.0:
        warnings.append(f"beta clamped from {raw_beta:.6g} to 1")
    below = T < T_th
    if below:
        logger.warning(f"Horizon T={T} is below the threshold T_th={T_th:.6g}")
        warnings.append(f"T={T} below T_th={T_th:.6g}")
    if I is not None and I > I_max:
        warnings.append(f"I={I} exceeds I_max={I_max}")
    return TheorySchedule(
        eta=eta, beta=beta, c_beta=constants.c_beta, T_th=T_th, I_max=I_max,
        L_phi=constants.L_phi, L_bar_fg=constants.L_bar_fg,
        C_sigma_h=constants.C_sigma_h, C_sigma_g=constants.C_sigma_g,
        C_Delta_h=constants.C_Delta_h, C_Delta_g=constants.C_Delta_g,
        beta_clamped=raw_beta > 1.0, below_threshold=below, warnings=warnings,
    )


def predicted_bound(c: LipschitzConstants, b: int, K: int, T: int, I: int,
                    init_gap: float, variant: str = "printed") -> float:
    """Правая часть оценки E||grad Phi(x_bar^a)||^2 с явной зависимостью от I"""
    k = compute_theory_constants(c, variant)
    root = math.sqrt(b * K * T)
    drift = (I - 1) ** 2 / T
    return (
        2.0 * init_gap / root
        + K * drift * (2.0 * k.L_bar_fg * c.sigma_h ** 2 + 2.0 * c.B_f ** 2 * k.L_bar_fg * c.sigma_g ** 2)
        + ((4.0 * k.L_phi + 8.0 * c.B_g ** 2) * c.sigma_h ** 2
           + (4.0 * k.L_phi * c.B_f ** 2 + 4.0 * k.c_beta ** 2 + 8.0 * c.B_f ** 2 * c.B_g ** 2)
           * c.sigma_g ** 2) / root
        + b * K * drift * (6.0 * k.L_bar_fg * c.Delta_h ** 2 + 6.0 * c.B_f ** 2 * k.L_bar_fg * c.Delta_g ** 2)
        + (96.0 * c.B_g ** 2 * c.Delta_h ** 2 + 96.0 * c.B_f ** 2 * c.B_g ** 2 * c.Delta_g ** 2) / root
    )


def complexity_prediction(eps: float, b: int, K: int, dim_x: int, dim_g: int = 1) -> Dict[str, float]:
    """Порядки сложности для точности eps (без констант)"""
    if eps <= 0:
        raise ScheduleError(f"eps must be positive, got {eps}")
    T = 1.0 / (b * K * eps ** 2)
    I = max(1, math.floor(T ** 0.25 / (b * K) ** 0.75 + 1e-9))
    rounds = T / I
    return {
        "iterations": T,
        "samples_per_client": b * T,
        "local_updates": I,
        "highdim_rounds": rounds,
        "lowdim_shares": T,
        "reals_uploaded_per_client": rounds * dim_x + T * dim_g,
    }
