import itertools
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from numpy.polynomial.hermite_e import hermegauss
from scipy.interpolate import RegularGridInterpolator

from config import AgentClassSpec, MarketConfig, OracleConfig
from market_env import AgentTable, JointAction, MarketState, Policy, initial_state, penalty_offset, transition

logger = logging.getLogger(__name__)

MAX_ORACLE_AGENTS = 4
GEN_GRID = np.array([0.0, 1.0])


class OracleBudgetError(Exception):
    pass


class NoPureNashError(Exception):
    pass


class GridTooCoarseError(Exception):
    pass


def _with_points(axis: np.ndarray, *points: float) -> np.ndarray:
    return np.unique(np.concatenate([axis, np.asarray(points, dtype=np.float64)]))


@dataclass
class DiscreteGameSpec:
    """Finite-action, grid-state version of a small market, valued by backward induction."""

    market: MarketConfig
    agents: AgentTable
    oracle: OracleConfig
    trade_grid: np.ndarray
    axes: Tuple[np.ndarray, ...]
    quad_nodes: np.ndarray
    quad_weights: np.ndarray
    node_prices: np.ndarray = field(init=False, repr=False)
    node_inventories: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        mesh = np.meshgrid(*self.axes, indexing="ij")
        self.node_prices = mesh[0].ravel()
        self.node_inventories = np.stack([m.ravel() for m in mesh[1:]], axis=-1)

    @classmethod
    def build(
        cls,
        market: MarketConfig,
        classes: Sequence[AgentClassSpec],
        oracle: OracleConfig,
        state: Optional[MarketState] = None,
    ) -> "DiscreteGameSpec":
        agents = AgentTable.from_classes(classes)
        n = agents.num_agents
        if n > MAX_ORACLE_AGENTS:
            raise OracleBudgetError(f"oracle games support at most {MAX_ORACLE_AGENTS} agents, got {n}")
        if oracle.trade_points < 1 or oracle.trade_points % 2 == 0:
            raise ValueError("trade_points must be a positive odd number")
        if oracle.price_points < 2 or oracle.inventory_points < 2 or oracle.quadrature_nodes < 1:
            raise ValueError("need at least 2 price and inventory points and 1 quadrature node")

        num_actions = oracle.trade_points * len(GEN_GRID)
        if num_actions**n > oracle.max_profiles:
            raise OracleBudgetError(f"{num_actions ** n} action profiles per stage exceed the budget of {oracle.max_profiles}")

        state = state or initial_state(market, agents)
        k0 = int(state.time_index[0])
        s0 = float(state.price[0])
        x0 = state.inventories[0]
        remaining_time = market.horizon - market.grid.times[k0]
        remaining_steps = market.num_steps - k0

        half_width = max(4.0 * market.volatility, 1.0)
        price_axis = np.linspace(max(0.0, market.penalty - half_width), market.penalty + half_width, oracle.price_points)
        axes = [_with_points(price_axis, market.penalty, s0)]
        for i in range(n):
            reach = market.trade_bound * remaining_time
            low = min(0.0, x0[i]) - reach
            high = max(agents.requirement[i], x0[i] + agents.gen_size[i] * remaining_steps + reach)
            axes.append(_with_points(np.linspace(low, high, oracle.inventory_points), 0.0, agents.requirement[i], x0[i]))

        num_nodes = int(np.prod([len(a) for a in axes]))
        if num_nodes > oracle.max_nodes:
            raise OracleBudgetError(f"{num_nodes} grid nodes exceed the budget of {oracle.max_nodes}")

        quad_nodes, quad_weights = hermegauss(oracle.quadrature_nodes)
        logger.info(f"Discrete game: {n} agents, {num_nodes} nodes, {num_actions ** n} profiles, {remaining_steps} stages")
        return cls(
            market=market,
            agents=agents,
            oracle=oracle,
            trade_grid=np.linspace(-market.trade_bound, market.trade_bound, oracle.trade_points)
            if oracle.trade_points > 1
            else np.zeros(1),
            axes=tuple(axes),
            quad_nodes=quad_nodes,
            quad_weights=quad_weights / quad_weights.sum(),
        )

    @property
    def num_agents(self) -> int:
        return self.agents.num_agents

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(len(a) for a in self.axes)

    @property
    def num_nodes(self) -> int:
        return len(self.node_prices)

    def agent_actions(self) -> np.ndarray:
        """(A, 2) grid of one agent's actions, trade rate major."""
        return np.array([(nu, g) for nu in self.trade_grid for g in GEN_GRID])

    def profiles(self) -> np.ndarray:
        """(A^N, N, 2) joint action profiles in lexicographic order."""
        single = self.agent_actions()
        index = np.array(list(itertools.product(range(len(single)), repeat=self.num_agents)), dtype=np.int64)
        return single[index]

    def node_states(self, k: int) -> MarketState:
        return MarketState(np.full(self.num_nodes, k), self.node_prices, self.node_inventories)

    def node_index(self, state: MarketState) -> Tuple[int, ...]:
        coords = [state.price[0], *state.inventories[0]]
        index = []
        for axis, value in zip(self.axes, coords):
            hits = np.flatnonzero(np.isclose(axis, value, rtol=0.0, atol=1e-12))
            if len(hits) == 0:
                raise ValueError(f"state coordinate {value} is not a grid point")
            index.append(int(hits[0]))
        return tuple(index)

    def _clip(self, state: MarketState) -> np.ndarray:
        points = np.column_stack([state.price, state.inventories])
        low = np.array([a[0] for a in self.axes])
        high = np.array([a[-1] for a in self.axes])
        clipped = np.clip(points, low, high)
        if logger.isEnabledFor(logging.DEBUG):
            outside = np.any(clipped != points, axis=1).mean()
            if outside > 0:
                logger.debug(f"{outside:.1%} of next states clipped to the grid box")
        return clipped

    def backup(self, k: int, actions: np.ndarray, next_values: Optional[np.ndarray]) -> np.ndarray:
        """Expected reward plus interpolated continuation for (nodes, C, N, 2) actions; returns (nodes, C, N)."""
        nodes, candidates, n = actions.shape[:3]
        batch = nodes * candidates
        state = MarketState(
            np.full(batch, k),
            np.repeat(self.node_prices, candidates),
            np.repeat(self.node_inventories, candidates, axis=0),
        )
        flat = actions.reshape(batch, n, 2)
        trade_rates, gen_probs = flat[..., 0], flat[..., 1]
        interpolate = None if next_values is None else RegularGridInterpolator(self.axes, next_values, method="linear")

        expected = np.zeros((batch, n))
        for branch in itertools.product((False, True), repeat=n):
            flags = np.array(branch)
            prob = np.prod(np.where(flags, gen_probs, 1.0 - gen_probs), axis=1)
            rows = np.flatnonzero(prob > 0.0)
            if len(rows) == 0:
                continue
            sub_state = state.take(rows)
            sub_action = JointAction(trade_rates[rows], gen_probs[rows])
            sub_flags = np.broadcast_to(flags, (len(rows), n))
            for z, w in zip(self.quad_nodes, self.quad_weights):
                next_state, rewards = transition(sub_state, sub_action, sub_flags, np.full(len(rows), z), self.market, self.agents)
                continuation = 0.0 if interpolate is None else interpolate(self._clip(next_state))
                expected[rows] += (prob[rows] * w)[:, None] * (rewards + continuation)
        return expected.reshape(nodes, candidates, n)


class GridPolicy:
    """Feedback policy table from backward induction; states snap to the nearest grid node."""

    def __init__(self, spec: DiscreteGameSpec, tables: Optional[Dict[int, np.ndarray]] = None):
        self.spec = spec
        self.tables: Dict[int, np.ndarray] = tables if tables is not None else {}

    def __call__(self, state: MarketState) -> JointAction:
        n = self.spec.num_agents
        out = np.zeros((state.batch_size, n, 2))
        coords = np.column_stack([state.price, state.inventories])
        index = tuple(np.abs(axis[None, :] - coords[:, j : j + 1]).argmin(axis=1) for j, axis in enumerate(self.spec.axes))
        for k in np.unique(state.time_index):
            if int(k) not in self.tables:
                raise KeyError(f"no policy table for stage {k}")
            rows = state.time_index == k
            out[rows] = self.tables[int(k)][tuple(i[rows] for i in index)]
        return JointAction.from_stacked(out)


@dataclass
class NashSolution:
    spec: DiscreteGameSpec
    policy: GridPolicy
    values: Dict[int, np.ndarray]
    profile: np.ndarray
    value: np.ndarray
    objective: np.ndarray
    equilibria: List[np.ndarray]
    fallback_nodes: int = 0


def _regret(q: np.ndarray, num_agents: int, num_actions: int) -> np.ndarray:
    """Largest unilateral gain over agents for every profile; q is (nodes, A^N, N)."""
    nodes = q.shape[0]
    grid = q.reshape(nodes, *([num_actions] * num_agents), num_agents)
    gains = []
    for i in range(num_agents):
        own = grid[..., i]
        gains.append(own.max(axis=1 + i, keepdims=True) - own)
    return np.max(np.stack(gains, axis=-1), axis=-1).reshape(nodes, -1)


def brute_force_nash(spec: DiscreteGameSpec, state: MarketState) -> NashSolution:
    """Backward induction with an exhaustive pure-equilibrium search at every stage and node."""
    k0 = int(state.time_index[0])
    query = spec.node_index(state)
    flat_query = int(np.ravel_multi_index(query, spec.shape))
    n = spec.num_agents
    num_actions = len(spec.agent_actions())
    profiles = spec.profiles()

    policy = GridPolicy(spec)
    values: Dict[int, np.ndarray] = {}
    next_values = None
    fallback = 0
    equilibria: List[np.ndarray] = []
    for k in range(spec.market.num_steps - 1, k0 - 1, -1):
        actions = np.broadcast_to(profiles, (spec.num_nodes, *profiles.shape))
        q = spec.backup(k, actions, next_values)
        regret = _regret(q, n, num_actions)
        tolerance = spec.oracle.nash_tolerance * np.maximum(1.0, np.abs(q).max(axis=(1, 2)))
        is_nash = regret <= tolerance[:, None]
        has_nash = is_nash.any(axis=1)
        chosen = np.where(has_nash, is_nash.argmax(axis=1), regret.argmin(axis=1))

        if k == k0:
            equilibria = [profiles[j] for j in np.flatnonzero(is_nash[flat_query])]
            if not has_nash[flat_query]:
                raise NoPureNashError(f"no pure grid Nash equilibrium at stage {k}, state {query}")
        missing = int((~has_nash).sum())
        if missing:
            fallback += missing
            logger.warning(f"Stage {k}: {missing} nodes without a pure grid Nash equilibrium, using least-regret profiles")

        node_values = q[np.arange(spec.num_nodes), chosen]
        next_values = node_values.reshape(*spec.shape, n)
        values[k] = next_values
        policy.tables[k] = profiles[chosen].reshape(*spec.shape, n, 2)

    value = values[k0][query]
    offset = penalty_offset(state.time_index, state.inventories, spec.market, spec.agents)[0]
    if len(equilibria) > 1:
        logger.info(f"{len(equilibria)} pure grid equilibria at the query state; keeping the lexicographically first")
    return NashSolution(
        spec=spec,
        policy=policy,
        values=values,
        profile=policy.tables[k0][query],
        value=value,
        objective=value - offset,
        equilibria=equilibria,
        fallback_nodes=fallback,
    )


@dataclass
class ExploitabilityReport:
    policy_value: np.ndarray
    best_response_value: np.ndarray
    exploitability: np.ndarray
    profile: np.ndarray


def policy_values(policy: Policy, spec: DiscreteGameSpec, k0: int) -> Dict[int, np.ndarray]:
    values: Dict[int, np.ndarray] = {}
    next_values = None
    for k in range(spec.market.num_steps - 1, k0 - 1, -1):
        actions = policy(spec.node_states(k)).stacked()
        next_values = spec.backup(k, actions[:, None], next_values)[:, 0].reshape(*spec.shape, spec.num_agents)
        values[k] = next_values
    return values


def best_response_values(policy: Policy, spec: DiscreteGameSpec, agent: int, k0: int) -> Dict[int, np.ndarray]:
    """Agent's optimal values over its grid actions and the policy's own action, others fixed to the policy."""
    grid_actions = spec.agent_actions()
    values: Dict[int, np.ndarray] = {}
    next_values = None
    for k in range(spec.market.num_steps - 1, k0 - 1, -1):
        played = policy(spec.node_states(k)).stacked()
        candidates = np.repeat(played[:, None], len(grid_actions) + 1, axis=1)
        candidates[:, :-1, agent] = grid_actions
        best = spec.backup(k, candidates, next_values)[..., agent].max(axis=1)
        next_values = np.repeat(best[:, None], spec.num_agents, axis=1).reshape(*spec.shape, spec.num_agents)
        values[k] = next_values[..., agent]
    return values


def exploitability(policy: Policy, spec: DiscreteGameSpec, state: MarketState) -> ExploitabilityReport:
    """Best-response gain of each agent against the others' fixed policy, by exact backward induction."""
    k0 = int(state.time_index[0])
    query = spec.node_index(state)
    own = policy_values(policy, spec, k0)[k0][query]
    best = np.array([best_response_values(policy, spec, i, k0)[k0][query] for i in range(spec.num_agents)])
    gain = best - own
    logger.info(f"Exploitability at stage {k0}: {np.array2string(gain, precision=4)}")
    return ExploitabilityReport(policy_value=own, best_response_value=best, exploitability=gain, profile=policy(state).stacked()[0])


@dataclass
class DPResult:
    value: float
    objective: float
    policy: GridPolicy
    spec: DiscreteGameSpec
    action: np.ndarray


def single_agent_dp(market: MarketConfig, spec_class: AgentClassSpec, oracle: OracleConfig) -> DPResult:
    """Value iteration for one agent from the initial state; the objective adds back the untelescoped penalty."""
    single = replace(spec_class, population=1)
    game = DiscreteGameSpec.build(market, [single], oracle)
    state = initial_state(market, game.agents)
    solution = brute_force_nash(game, state)
    return DPResult(
        value=float(solution.value[0]),
        objective=float(solution.objective[0]),
        policy=solution.policy,
        spec=game,
        action=solution.profile[0],
    )


def refine(oracle: OracleConfig) -> OracleConfig:
    return replace(
        oracle,
        trade_points=2 * oracle.trade_points - 1,
        price_points=2 * oracle.price_points - 1,
        inventory_points=2 * oracle.inventory_points - 1,
    )


def dp_refinement_check(market: MarketConfig, spec_class: AgentClassSpec, oracle: OracleConfig) -> Tuple[DPResult, DPResult]:
    """Solve at two resolutions; raises GridTooCoarseError when the objective or the greedy initial action moves beyond tolerance.

    Trade rates may move by up to one coarse trade-grid spacing.
    """
    coarse = single_agent_dp(market, spec_class, oracle)
    fine = single_agent_dp(market, spec_class, refine(oracle))
    tolerance = oracle.refinement_tolerance
    gap = abs(coarse.objective - fine.objective)
    scale = max(1.0, abs(fine.objective))
    if gap > tolerance * scale:
        raise GridTooCoarseError(
            f"DP objective moved from {coarse.objective:.4f} to {fine.objective:.4f} under refinement (tolerance {tolerance:.2%})"
        )

    spacing = 2.0 / (oracle.trade_points - 1) if oracle.trade_points > 1 else 0.0
    trade_shift = abs(coarse.action[0] - fine.action[0]) / market.trade_bound
    gen_shift = abs(coarse.action[1] - fine.action[1])
    if trade_shift > max(tolerance, spacing) + 1e-12 or gen_shift > tolerance:
        raise GridTooCoarseError(f"Greedy initial action moved from {coarse.action} to {fine.action} under refinement")
    if not np.allclose(coarse.action, fine.action):
        logger.warning(f"Greedy initial action changed under refinement: {coarse.action} -> {fine.action}")
    return coarse, fine


def write_oracle_report(path: str, spec: DiscreteGameSpec, state: MarketState, report: ExploitabilityReport, header: str = "") -> str:
    rows = []
    for i, label in enumerate(spec.agents.labels):
        rows.append(
            {
                "agent": label,
                "time_index": int(state.time_index[0]),
                "price": float(state.price[0]),
                "inventory": float(state.inventories[0, i]),
                "trade_rate": float(report.profile[i, 0]),
                "gen_prob": float(report.profile[i, 1]),
                "policy_value": float(report.policy_value[i]),
                "best_response_value": float(report.best_response_value[i]),
                "exploitability": float(report.exploitability[i]),
            }
        )
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(f"# {header}\n")
        pd.DataFrame(rows).to_csv(f, index=False, float_format="%.17g", lineterminator="\n")
    logger.info(f"Oracle report written to {path}")
    return path
