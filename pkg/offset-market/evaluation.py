import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Sequence, Union

import numpy as np
import pandas as pd
import torch

from config import GENERATION_MODES, AgentClassSpec, MarketConfig
from market_env import AgentTable, NoiseDraw, Policy, initial_state, penalty_offset, step
from nets import NashDQN, NetworkPolicy

logger = logging.getLogger(__name__)

TAIL_FRACTION = 0.05
BAND_QUANTILES = (0.05, 0.95)
FLOAT_FORMAT = "%.17g"
ENSEMBLE_FILE = "ensemble.pt"


class CheckpointMismatchError(Exception):
    pass


@dataclass
class PathEnsemble:
    """Simulated paths; per-step arrays are (paths, K, N), state arrays (paths, K + 1[, N])."""

    times: np.ndarray
    prices: np.ndarray
    inventories: np.ndarray
    trade_rates: np.ndarray
    gen_probs: np.ndarray
    gen_flags: np.ndarray
    rewards: np.ndarray
    initial_offset: np.ndarray
    dt: np.ndarray
    labels: List[str]
    gen_size: np.ndarray
    benchmark: np.ndarray
    seed: int
    generation_mode: str
    # checkpoint digest and eval settings that produced the paths
    provenance: Dict[str, Any] = field(default_factory=dict)

    @property
    def num_paths(self) -> int:
        return self.prices.shape[0]

    @property
    def terminal_pnl(self) -> np.ndarray:
        return self.rewards.sum(axis=1) - self.initial_offset

    @property
    def traded(self) -> np.ndarray:
        return (self.trade_rates * self.dt[None, :, None]).sum(axis=1)

    @property
    def generated(self) -> np.ndarray:
        return (self.gen_flags * self.gen_size).sum(axis=1)

    def to_payload(self) -> Dict[str, Any]:
        payload: Dict[str, Any] = {}
        for key, value in asdict(self).items():
            payload[key] = torch.from_numpy(np.ascontiguousarray(value)) if isinstance(value, np.ndarray) else value
        return payload

    @classmethod
    def from_payload(cls, payload: Dict[str, Any]) -> "PathEnsemble":
        values = {key: value.numpy() if isinstance(value, torch.Tensor) else value for key, value in payload.items()}
        return cls(**values)


@dataclass
class AgentMetrics:
    agent: str
    mean_pnl: float
    tail_expectation: float
    mean_traded: float
    mean_generated: float
    benchmark: float


def check_checkpoint(payload: Dict[str, Any], market: MarketConfig, classes: Sequence[AgentClassSpec]):
    expected_market = asdict(market)
    stored_market = {k: tuple(v) if isinstance(v, list) else v for k, v in payload["market"].items()}
    if stored_market != expected_market:
        raise CheckpointMismatchError("checkpoint was trained on a different market configuration")
    if payload["classes"] != [asdict(c) for c in classes]:
        raise CheckpointMismatchError("checkpoint was trained on a different set of agent classes")


def simulate_paths(
    policy: Union[Policy, NashDQN],
    cfg: MarketConfig,
    agents: AgentTable,
    num_paths: int,
    seed: int,
    generation_mode: str = "stochastic",
) -> PathEnsemble:
    """Roll the policy forward from the initial state on every path, without exploration."""
    if num_paths < 1:
        raise ValueError("num_paths must be at least 1")
    if generation_mode not in GENERATION_MODES:
        raise ValueError(f"generation_mode must be one of {GENERATION_MODES}")
    if isinstance(policy, NashDQN):
        policy = NetworkPolicy(policy)

    k_steps, n = cfg.num_steps, agents.num_agents
    rng = np.random.default_rng(seed)
    state = initial_state(cfg, agents, num_paths)

    prices = np.empty((num_paths, k_steps + 1))
    inventories = np.empty((num_paths, k_steps + 1, n))
    trade_rates = np.empty((num_paths, k_steps, n))
    gen_probs = np.empty((num_paths, k_steps, n))
    gen_flags = np.empty((num_paths, k_steps, n), dtype=bool)
    rewards = np.empty((num_paths, k_steps, n))
    prices[:, 0] = state.price
    inventories[:, 0] = state.inventories
    initial_offset = penalty_offset(state.time_index, state.inventories, cfg, agents)

    for k in range(k_steps):
        action = policy(state)
        noise = NoiseDraw(price_shock=rng.standard_normal(num_paths), uniforms=rng.random((num_paths, n)))
        if generation_mode == "threshold":
            noise.uniforms = np.full((num_paths, n), 0.5)
        outcome = step(state, action, cfg, agents, noise=noise)
        trade_rates[:, k] = action.trade_rates
        gen_probs[:, k] = action.gen_probs
        gen_flags[:, k] = outcome.gen_flags
        rewards[:, k] = outcome.rewards
        state = outcome.next_state
        prices[:, k + 1] = state.price
        inventories[:, k + 1] = state.inventories

    logger.info(f"Simulated {num_paths} paths over {k_steps} steps (seed {seed}, {generation_mode} generation)")
    return PathEnsemble(
        times=cfg.grid.times.copy(),
        prices=prices,
        inventories=inventories,
        trade_rates=trade_rates,
        gen_probs=gen_probs,
        gen_flags=gen_flags,
        rewards=rewards,
        initial_offset=initial_offset,
        dt=cfg.grid.dt.copy(),
        labels=list(agents.labels),
        gen_size=agents.gen_size.copy(),
        benchmark=-cfg.num_periods * cfg.penalty * agents.requirement,
        seed=seed,
        generation_mode=generation_mode,
    )


def tail_expectation(samples: np.ndarray, fraction: float = TAIL_FRACTION) -> np.ndarray:
    """Mean of the lowest ceil(fraction * paths) samples along axis 0."""
    count = max(1, math.ceil(fraction * samples.shape[0]))
    return np.sort(samples, axis=0)[:count].mean(axis=0)


def metrics(ensemble: PathEnsemble) -> List[AgentMetrics]:
    if ensemble.num_paths < 1:
        raise ValueError("empty ensemble")
    pnl = ensemble.terminal_pnl
    mean_pnl = pnl.mean(axis=0)
    tail = tail_expectation(pnl)
    traded = ensemble.traded.mean(axis=0)
    generated = ensemble.generated.mean(axis=0)
    return [
        AgentMetrics(
            agent=label,
            mean_pnl=float(mean_pnl[i]),
            tail_expectation=float(tail[i]),
            mean_traded=float(traded[i]),
            mean_generated=float(generated[i]),
            benchmark=float(ensemble.benchmark[i]),
        )
        for i, label in enumerate(ensemble.labels)
    ]


def summary_frame(agent_metrics: Sequence[AgentMetrics]) -> pd.DataFrame:
    return pd.DataFrame([asdict(m) for m in agent_metrics])


def _bands(values: np.ndarray) -> Dict[str, np.ndarray]:
    low, high = np.quantile(values, BAND_QUANTILES, axis=0, method="inverted_cdf")
    return {"mean": values.mean(axis=0), "q05": low, "q95": high}


def display_inventories(ensemble: PathEnsemble, cfg: MarketConfig, requirement: np.ndarray) -> np.ndarray:
    """Inventory paths with min(X, R) submitted at each compliance date, for plotting only."""
    if cfg.compliance_reset_mode == "consume":
        return ensemble.inventories.copy()
    shown = ensemble.inventories.copy()
    submitted = np.zeros_like(shown[:, 0])
    compliance = cfg.grid.is_compliance
    for k in range(shown.shape[1]):
        shown[:, k] -= submitted
        if compliance[k]:
            drop = np.clip(shown[:, k], 0.0, requirement)
            shown[:, k] -= drop
            submitted += drop
    return shown


def _write_frame(path: str, frame: pd.DataFrame, header: str):
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(f"# {header}\n")
        frame.to_csv(f, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def emit_csv(
    ensemble: PathEnsemble,
    agent_metrics: Sequence[AgentMetrics],
    out_dir: str,
    config_hash: str = "",
    inventories: Union[np.ndarray, None] = None,
) -> Dict[str, str]:
    """Write band, action, P&L sample and summary tables; returns file paths by table name."""
    os.makedirs(out_dir, exist_ok=True)
    header = f"config_hash={config_hash} seed={ensemble.seed}"
    inventories = ensemble.inventories if inventories is None else inventories
    times = ensemble.times
    action_times = times[:-1]

    tables: Dict[str, pd.DataFrame] = {}
    tables["price_bands"] = pd.DataFrame({"time": times, **_bands(ensemble.prices)})

    inventory_rows, action_rows = [], []
    for i, label in enumerate(ensemble.labels):
        inventory_rows.append(pd.DataFrame({"time": times, "agent": label, **_bands(inventories[:, :, i])}))
        action_rows.append(
            pd.DataFrame(
                {
                    "time": action_times,
                    "agent": label,
                    "mean_trade_rate": ensemble.trade_rates[:, :, i].mean(axis=0),
                    "mean_gen_prob": ensemble.gen_probs[:, :, i].mean(axis=0),
                }
            )
        )
    tables["inventory_bands"] = pd.concat(inventory_rows, ignore_index=True)
    tables["actions"] = pd.concat(action_rows, ignore_index=True)

    pnl = pd.DataFrame(ensemble.terminal_pnl, columns=ensemble.labels)
    pnl.insert(0, "path", np.arange(ensemble.num_paths))
    tables["pnl_hist"] = pnl
    tables["summary"] = summary_frame(agent_metrics)

    paths = {}
    for name, frame in tables.items():
        paths[name] = os.path.join(out_dir, f"{name}.csv")
        _write_frame(paths[name], frame, header)
    logger.info(f"Wrote {len(paths)} CSV files to {out_dir}")
    return paths


def save_ensemble(path: str, ensemble: PathEnsemble):
    tmp_path = f"{path}.tmp"
    torch.save(ensemble.to_payload(), tmp_path)
    os.replace(tmp_path, path)
    logger.info(f"Ensemble of {ensemble.num_paths} paths written to {path}")


def load_ensemble(path: str) -> PathEnsemble:
    if not os.path.exists(path):
        raise FileNotFoundError(f"ensemble not found: {path}")
    return PathEnsemble.from_payload(torch.load(path, map_location="cpu", weights_only=True))
