import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import List, Optional, Tuple

import numpy as np
from dotenv import load_dotenv

COMPLIANCE_RESET_MODES = ("none", "consume")
TRADE_COST_DT_MODES = ("dt", "no_dt")
GENERATION_MODES = ("stochastic", "threshold")


@dataclass(frozen=True)
class MarketConfig:
    compliance_dates: Tuple[float, ...] = (1.0, 2.0)
    steps_per_period: Tuple[int, ...] = (24, 24)
    penalty: float = 50.0
    friction: float = 2.0
    price_impact: float = 0.5
    volatility: float = 3.0
    initial_price: float = 50.0
    trade_bound: float = 50.0
    trade_cost_dt_mode: str = "dt"
    compliance_reset_mode: str = "none"

    def __post_init__(self):
        if len(self.compliance_dates) < 1:
            raise ValueError("at least one compliance date is required")
        if len(self.steps_per_period) != len(self.compliance_dates):
            raise ValueError("steps_per_period needs one entry per compliance period")
        previous = 0.0
        for date, steps in zip(self.compliance_dates, self.steps_per_period):
            if date <= previous:
                raise ValueError("compliance dates must be strictly increasing and positive")
            if steps < 1:
                raise ValueError("every period needs at least one step")
            previous = date
        if min(self.penalty, self.friction, self.price_impact, self.volatility) < 0:
            raise ValueError("penalty, friction, price_impact and volatility must be nonnegative")
        if self.trade_bound <= 0:
            raise ValueError("trade_bound must be positive")
        if self.trade_cost_dt_mode not in TRADE_COST_DT_MODES:
            raise ValueError(f"trade_cost_dt_mode must be one of {TRADE_COST_DT_MODES}")
        if self.compliance_reset_mode not in COMPLIANCE_RESET_MODES:
            raise ValueError(f"compliance_reset_mode must be one of {COMPLIANCE_RESET_MODES}")

    @property
    def num_periods(self) -> int:
        return len(self.compliance_dates)

    @property
    def num_steps(self) -> int:
        return int(sum(self.steps_per_period))

    @property
    def horizon(self) -> float:
        return float(self.compliance_dates[-1])

    @cached_property
    def grid(self) -> "MarketGrid":
        return MarketGrid.build(self)


@dataclass(frozen=True)
class MarketGrid:
    """Equally spaced time grid per period with compliance dates as exact grid points."""

    times: np.ndarray
    dt: np.ndarray
    period_index: np.ndarray
    next_compliance: np.ndarray
    period_start: np.ndarray
    is_compliance: np.ndarray

    @classmethod
    def build(cls, cfg: MarketConfig) -> "MarketGrid":
        times = [0.0]
        period_index = []
        start = 0.0
        for l, (date, steps) in enumerate(zip(cfg.compliance_dates, cfg.steps_per_period)):
            points = np.linspace(start, date, steps + 1)
            points[-1] = date
            times.extend(points[1:].tolist())
            period_index.extend([l] * steps)
            start = date
        times_arr = np.asarray(times, dtype=np.float64)
        period_arr = np.asarray(period_index, dtype=np.int64)
        dates = np.asarray(cfg.compliance_dates, dtype=np.float64)
        starts = np.concatenate([[0.0], dates[:-1]])
        # index K reuses the last period so features stay defined on terminal states
        period_full = np.concatenate([period_arr, [cfg.num_periods - 1]])
        is_compliance = np.isin(times_arr, dates)
        is_compliance[0] = False
        return cls(
            times=times_arr,
            dt=np.diff(times_arr),
            period_index=period_full,
            next_compliance=dates[period_full],
            period_start=starts[period_full],
            is_compliance=is_compliance,
        )


@dataclass(frozen=True)
class AgentClassSpec:
    label: str
    population: int = 1
    requirement: float = 25.0
    gen_size: float = 1.0
    gen_cost: float = 50.0

    def __post_init__(self):
        if self.population < 1:
            raise ValueError(f"class {self.label}: population must be at least 1")
        if min(self.requirement, self.gen_size, self.gen_cost) < 0:
            raise ValueError(f"class {self.label}: requirement, gen_size and gen_cost must be nonnegative")


@dataclass(frozen=True)
class NetConfig:
    input_dim: Optional[int] = None
    hidden_layers: int = 5
    nodes_per_layer: int = 200
    activation: str = "silu"
    output_scale: float = 1000.0
    seed: int = 0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20000
    batch_size: int = 256
    lr: float = 0.001
    lr_decay_every: int = 25
    lr_decay_factor: float = 0.999
    lr_floor: float = 1e-5
    gamma: float = 1.0
    phi_V: float = 0.05
    phi_L: float = 0.25
    varphi0: float = 50.0
    c_nu: Optional[float] = None
    c_p: float = 0.5
    eps0: float = 1.0
    eps_min: float = 0.02
    eps_decay_fraction: float = 0.8
    max_param_norm: float = 1e8
    log_every: int = 500
    seed: int = 0


@dataclass(frozen=True)
class EvalConfig:
    num_paths: int = 10000
    seed: int = 1
    generation_mode: str = "stochastic"
    out_dir: Optional[str] = None


@dataclass(frozen=True)
class OracleConfig:
    trade_points: int = 3
    price_points: int = 9
    inventory_points: int = 21
    quadrature_nodes: int = 7
    max_profiles: int = 4096
    max_nodes: int = 200000
    refinement_tolerance: float = 0.05
    nash_tolerance: float = 1e-9


@dataclass
class ExperimentConfig:
    market: MarketConfig
    classes: List[AgentClassSpec]
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    preset: Optional[str] = None

    @property
    def num_agents(self) -> int:
        return sum(c.population for c in self.classes)


class Settings:
    """Process-level runtime settings, read from the environment (and a .env file if present)."""

    def __init__(self):
        load_dotenv()
        self.output_dir = os.getenv("OCM_OUTPUT_DIR", "./runs")
        self.threads = int(os.getenv("OCM_THREADS", "1"))
        self.log_level = os.getenv("OCM_LOG_LEVEL", "INFO").upper()
        self.default_preset = os.getenv("OCM_PRESET", "four_agent")


# Global settings instance
settings = Settings()
