import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

from config import AgentClassSpec, MarketConfig

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]


class MarketError(Exception):
    pass


@dataclass(frozen=True)
class AgentTable:
    """Per-agent parameter arrays, expanded from the class list in canonical order."""

    labels: Tuple[str, ...]
    class_index: np.ndarray
    requirement: np.ndarray
    gen_size: np.ndarray
    gen_cost: np.ndarray
    num_classes: int

    @classmethod
    def from_classes(cls, classes: Sequence[AgentClassSpec]) -> "AgentTable":
        if not classes:
            raise MarketError("at least one agent class is required")
        labels, class_index, requirement, gen_size, gen_cost = [], [], [], [], []
        for c, spec in enumerate(classes):
            for member in range(spec.population):
                labels.append(spec.label if spec.population == 1 else f"{spec.label}{member + 1}")
                class_index.append(c)
                requirement.append(spec.requirement)
                gen_size.append(spec.gen_size)
                gen_cost.append(spec.gen_cost)
        return cls(
            labels=tuple(labels),
            class_index=np.asarray(class_index, dtype=np.int64),
            requirement=np.asarray(requirement, dtype=np.float64),
            gen_size=np.asarray(gen_size, dtype=np.float64),
            gen_cost=np.asarray(gen_cost, dtype=np.float64),
            num_classes=len(classes),
        )

    @property
    def num_agents(self) -> int:
        return len(self.labels)


@dataclass
class MarketState:
    """Batch of MDP states: grid index, OC price and every agent's inventory."""

    time_index: np.ndarray
    price: np.ndarray
    inventories: np.ndarray

    def __post_init__(self):
        self.time_index = np.atleast_1d(np.asarray(self.time_index, dtype=np.int64))
        self.price = np.atleast_1d(np.asarray(self.price, dtype=np.float64))
        self.inventories = np.atleast_2d(np.asarray(self.inventories, dtype=np.float64))
        if not (len(self.time_index) == len(self.price) == len(self.inventories)):
            raise MarketError("time_index, price and inventories must share the batch dimension")

    @classmethod
    def single(cls, time_index: int, price: float, inventories: Sequence[float]) -> "MarketState":
        return cls(np.array([time_index]), np.array([price]), np.asarray(inventories, dtype=np.float64)[None, :])

    @property
    def batch_size(self) -> int:
        return len(self.time_index)

    def take(self, rows: np.ndarray) -> "MarketState":
        return MarketState(self.time_index[rows], self.price[rows], self.inventories[rows])


@dataclass
class JointAction:
    trade_rates: np.ndarray
    gen_probs: np.ndarray

    def __post_init__(self):
        self.trade_rates = np.atleast_2d(np.asarray(self.trade_rates, dtype=np.float64))
        self.gen_probs = np.atleast_2d(np.asarray(self.gen_probs, dtype=np.float64))
        if self.trade_rates.shape != self.gen_probs.shape:
            raise MarketError("trade_rates and gen_probs must have the same shape")

    def stacked(self) -> np.ndarray:
        """(batch, N, 2) array of (trade rate, generation probability) pairs."""
        return np.stack([self.trade_rates, self.gen_probs], axis=-1)

    @classmethod
    def from_stacked(cls, actions: np.ndarray) -> "JointAction":
        return cls(actions[..., 0], actions[..., 1])


@dataclass
class NoiseDraw:
    price_shock: np.ndarray
    uniforms: np.ndarray


@dataclass
class TransitionOutcome:
    next_state: MarketState
    rewards: np.ndarray
    gen_flags: np.ndarray
    noise: NoiseDraw


Policy = Callable[[MarketState], JointAction]


class ConstantPolicy:
    """Same (trade rate, generation probability) for every state; per-agent arrays allowed."""

    def __init__(self, trade_rate: ArrayLike = 0.0, gen_prob: ArrayLike = 0.0):
        self.trade_rate = np.asarray(trade_rate, dtype=np.float64)
        self.gen_prob = np.asarray(gen_prob, dtype=np.float64)

    def __call__(self, state: MarketState) -> JointAction:
        shape = state.inventories.shape
        return JointAction(np.broadcast_to(self.trade_rate, shape).copy(), np.broadcast_to(self.gen_prob, shape).copy())


def _requirement(requirement: Union[AgentClassSpec, ArrayLike]) -> ArrayLike:
    if isinstance(requirement, AgentClassSpec):
        return requirement.requirement
    return requirement


def penalty_cost(x: ArrayLike, requirement: Union[AgentClassSpec, ArrayLike], cfg: MarketConfig) -> ArrayLike:
    """Compliance-date cost p * (R - x)+."""
    return cfg.penalty * np.maximum(_requirement(requirement) - x, 0.0)


def partial_penalty(x: ArrayLike, x_next: ArrayLike, requirement: Union[AgentClassSpec, ArrayLike], cfg: MarketConfig) -> ArrayLike:
    """Change in shortfall cost between two consecutive inventories."""
    req = _requirement(requirement)
    return cfg.penalty * (np.maximum(req - x_next, 0.0) - np.maximum(req - x, 0.0))


def compliance_multiplier(k: ArrayLike, cfg: MarketConfig) -> ArrayLike:
    """Number of compliance dates still ahead of t_k (counting the current period)."""
    k_arr = np.asarray(k)
    if np.any(k_arr < 0) or np.any(k_arr >= cfg.num_steps):
        raise MarketError(f"grid index out of range [0, {cfg.num_steps})")
    return cfg.num_periods - cfg.grid.period_index[k_arr]


def penalty_offset(k: ArrayLike, x: np.ndarray, cfg: MarketConfig, agents: AgentTable) -> np.ndarray:
    """Penalty not carried by telescoped rewards from state (k, x) onwards; zero when inventories are consumed."""
    k_arr = np.asarray(k)
    if cfg.compliance_reset_mode == "consume":
        return np.zeros_like(np.asarray(x, dtype=np.float64))
    remaining = np.where(k_arr < cfg.num_steps, cfg.num_periods - cfg.grid.period_index[k_arr], 0)
    remaining = np.asarray(remaining, dtype=np.float64)
    if np.ndim(x) > np.ndim(remaining):
        remaining = remaining[..., None]
    return remaining * penalty_cost(x, agents.requirement, cfg)


def price_step(
    price: ArrayLike, k: ArrayLike, gen_flags: np.ndarray, shock: ArrayLike, cfg: MarketConfig, agents: AgentTable
) -> np.ndarray:
    """One step of the Brownian bridge pinned to the penalty at the next compliance date."""
    grid = cfg.grid
    k_arr = np.asarray(k)
    t_now = grid.times[k_arr]
    t_next = grid.times[k_arr + 1]
    target_date = grid.next_compliance[k_arr]
    dt = t_next - t_now
    remaining = target_date - t_now
    ratio = (target_date - t_next) / remaining
    impact = cfg.price_impact * (np.asarray(gen_flags, dtype=np.float64) @ agents.gen_size)
    return (price - impact) * ratio + cfg.penalty * dt / remaining + cfg.volatility * np.sqrt(dt * ratio) * shock


def _check_action(action: JointAction, cfg: MarketConfig, num_agents: int):
    if action.trade_rates.shape[-1] != num_agents:
        raise MarketError(f"expected actions for {num_agents} agents, got {action.trade_rates.shape[-1]}")
    bound = cfg.trade_bound * (1.0 + 1e-12)
    if np.any(np.abs(action.trade_rates) > bound):
        raise MarketError("trade rate outside [-trade_bound, trade_bound]")
    if np.any(action.gen_probs < 0.0) or np.any(action.gen_probs > 1.0):
        raise MarketError("generation probability outside [0, 1]")


def transition(
    state: MarketState,
    action: JointAction,
    gen_flags: np.ndarray,
    shock: np.ndarray,
    cfg: MarketConfig,
    agents: AgentTable,
) -> Tuple[MarketState, np.ndarray]:
    """Deterministic part of a step given realized generation flags and price shock."""
    k = state.time_index
    if np.any(k >= cfg.num_steps) or np.any(k < 0):
        raise MarketError("cannot step from a terminal state")
    grid = cfg.grid
    dt = grid.dt[k][:, None]
    nu = action.trade_rates
    generated = np.asarray(gen_flags, dtype=np.float64)

    x = state.inventories
    x_next = x + agents.gen_size * generated + nu * dt
    price_next = price_step(state.price, k, generated, shock, cfg, agents)

    cost_scale = dt if cfg.trade_cost_dt_mode == "dt" else 1.0
    trading_cost = (state.price[:, None] * nu + 0.5 * cfg.friction * nu**2) * cost_scale
    generation_cost = agents.gen_cost * generated

    if cfg.compliance_reset_mode == "consume":
        due = grid.is_compliance[k + 1][:, None]
        penalty = np.where(due, penalty_cost(x_next, agents.requirement, cfg), 0.0)
        rewards = -penalty - trading_cost - generation_cost
        x_next = np.where(due, np.maximum(x_next - agents.requirement, 0.0), x_next)
    else:
        multiplier = (cfg.num_periods - grid.period_index[k])[:, None]
        rewards = -multiplier * partial_penalty(x, x_next, agents.requirement, cfg) - trading_cost - generation_cost

    return MarketState(k + 1, price_next, x_next), rewards


def step(
    state: MarketState,
    action: JointAction,
    cfg: MarketConfig,
    agents: AgentTable,
    noise: Optional[NoiseDraw] = None,
    rng: Optional[np.random.Generator] = None,
) -> TransitionOutcome:
    """Advance every state in the batch by one grid step."""
    _check_action(action, cfg, agents.num_agents)
    if noise is None:
        if rng is None:
            raise MarketError("either explicit noise or an rng is required")
        noise = NoiseDraw(
            price_shock=rng.standard_normal(state.batch_size),
            uniforms=rng.random((state.batch_size, agents.num_agents)),
        )
    gen_flags = action.gen_probs > noise.uniforms
    next_state, rewards = transition(state, action, gen_flags, noise.price_shock, cfg, agents)
    return TransitionOutcome(next_state=next_state, rewards=rewards, gen_flags=gen_flags, noise=noise)


def price_sampling_range(cfg: MarketConfig) -> Tuple[float, float]:
    return max(0.0, cfg.penalty - 4.0 * cfg.volatility), cfg.penalty + 4.0 * cfg.volatility


def inventory_sampling_bound(cfg: MarketConfig, agents: AgentTable) -> np.ndarray:
    return 1.5 * agents.requirement * cfg.num_periods


def sample_states(batch_size: int, rng: np.random.Generator, cfg: MarketConfig, agents: AgentTable) -> MarketState:
    """Training states drawn uniformly over non-terminal times, a price band and inventory boxes."""
    if batch_size < 1:
        raise MarketError("batch_size must be at least 1")
    time_index = rng.integers(0, cfg.num_steps, size=batch_size)
    low, high = price_sampling_range(cfg)
    price = rng.uniform(low, high, size=batch_size)
    inventories = rng.uniform(0.0, inventory_sampling_bound(cfg, agents), size=(batch_size, agents.num_agents))
    return MarketState(time_index, price, inventories)


def initial_state(cfg: MarketConfig, agents: AgentTable, batch_size: int = 1) -> MarketState:
    return MarketState(
        np.zeros(batch_size, dtype=np.int64),
        np.full(batch_size, cfg.initial_price),
        np.zeros((batch_size, agents.num_agents)),
    )
