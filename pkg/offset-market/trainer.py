import logging
from dataclasses import asdict, dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from torch.optim.lr_scheduler import LambdaLR

from config import AgentClassSpec, MarketConfig, NetConfig, TrainConfig
from market_env import JointAction, MarketState, sample_states, step
from nets import NashDQN, NashHeads, adam_step, advantage, make_optimizer, save_checkpoint, soft_update

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ["epoch", "q_loss", "clearing_loss", "varphi", "lr", "eps"]
CLEARING_GUARD = 1e-12


class NonFiniteLossError(Exception):
    pass


class TrainingDivergedError(Exception):
    pass


@dataclass
class LossReport:
    q_loss: float
    clearing_loss: float
    total: float
    varphi: float
    epoch: int = 0


@dataclass
class TransitionBatch:
    """One epoch of (state, action, reward, next state) samples; actions are (M, N, 2)."""

    states: MarketState
    actions: np.ndarray
    rewards: np.ndarray
    next_states: MarketState


@dataclass
class TrainingResult:
    model: NashDQN
    history: pd.DataFrame
    varphi: float


def validate_train_config(cfg: TrainConfig):
    if not 0.0 < cfg.gamma <= 1.0:
        raise ValueError(f"gamma must lie in (0, 1], got {cfg.gamma}")
    if not 0.0 < cfg.phi_V < 1.0 or not 0.0 < cfg.phi_L < 1.0:
        raise ValueError("phi_V and phi_L must lie in (0, 1)")
    if cfg.varphi0 <= 0:
        raise ValueError("varphi0 must be positive")
    if cfg.batch_size < 1 or cfg.epochs < 1:
        raise ValueError("batch_size and epochs must be at least 1")
    if cfg.eps_min > cfg.eps0 or cfg.eps_min < 0:
        raise ValueError("need 0 <= eps_min <= eps0")


def exploration_epsilon(epoch: int, cfg: TrainConfig) -> float:
    """Linear decay from eps0 to eps_min over the first eps_decay_fraction of epochs, flat afterwards."""
    horizon = max(1, int(round(cfg.eps_decay_fraction * cfg.epochs)))
    fraction = min(epoch / horizon, 1.0)
    return cfg.eps0 + (cfg.eps_min - cfg.eps0) * fraction


def exploration_scales(cfg: TrainConfig, trade_bound: float) -> Tuple[float, float]:
    c_nu = 0.5 * trade_bound if cfg.c_nu is None else cfg.c_nu
    return c_nu, cfg.c_p


def apply_exploration(
    action: JointAction, eps: float, c_nu: float, c_p: float, rng: np.random.Generator, nu_bar: float
) -> JointAction:
    """Gaussian action noise scaled by eps, clipped back to the action box."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    shape = action.trade_rates.shape
    z_nu = rng.standard_normal(shape)
    z_p = rng.standard_normal(shape)
    trade_rates = np.clip(action.trade_rates + c_nu * eps * z_nu, -nu_bar, nu_bar)
    gen_probs = np.clip(action.gen_probs + c_p * eps * z_p, 0.0, 1.0)
    return JointAction(trade_rates, gen_probs)


def clearing_loss(trade_rates: torch.Tensor) -> torch.Tensor:
    """Batch mean of the squared net trade rate across agents."""
    return (trade_rates.sum(dim=-1) ** 2).mean()


def nash_bellman_loss(
    heads: NashHeads,
    actions: torch.Tensor,
    rewards: torch.Tensor,
    next_values: torch.Tensor,
    terminal: torch.Tensor,
    gamma: float,
) -> torch.Tensor:
    """Squared Nash-Bellman residual summed over agents, averaged over the batch."""
    bootstrap = torch.where(terminal[:, None], torch.zeros_like(next_values), next_values)
    target = rewards + gamma * bootstrap.detach()
    residual = heads.value + advantage(heads, actions) - target
    return (residual**2).sum(dim=-1).mean()


def loss_terms(
    heads: NashHeads,
    actions: torch.Tensor,
    rewards: torch.Tensor,
    next_values: torch.Tensor,
    terminal: torch.Tensor,
    gamma: float,
    varphi: float,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    q_loss = nash_bellman_loss(heads, actions, rewards, next_values, terminal, gamma)
    clear = clearing_loss(heads.nash_action[..., 0])
    return q_loss, clear, q_loss + varphi * clear


def total_loss(model: NashDQN, batch: TransitionBatch, gamma: float, varphi: float, epoch: int = 0) -> LossReport:
    """Evaluate the full loss on a batch and accumulate gradients into the online parameters."""
    heads = model.heads(batch.states)
    with torch.no_grad():
        next_values = model.heads(batch.next_states, target=True).value
    terminal = torch.from_numpy(batch.next_states.time_index >= model.market.num_steps)
    q_loss, clear, total = loss_terms(
        heads,
        torch.from_numpy(batch.actions),
        torch.from_numpy(batch.rewards),
        next_values,
        terminal,
        gamma,
        varphi,
    )
    if not torch.isfinite(total):
        raise NonFiniteLossError(f"non-finite loss at epoch {epoch}: q_loss={q_loss.item()}, clearing={clear.item()}")
    total.backward()
    return LossReport(q_loss=q_loss.item(), clearing_loss=clear.item(), total=total.item(), varphi=varphi, epoch=epoch)


def update_clearing_weight(varphi: float, q_loss: float, clearing_loss_weighted: float, phi_L: float) -> float:
    """Move varphi so the weighted clearing loss tracks half the Nash-Bellman loss."""
    if clearing_loss_weighted < CLEARING_GUARD:
        return varphi
    return (1.0 - phi_L) * varphi + phi_L * varphi * q_loss / (2.0 * clearing_loss_weighted)


def lr_multiplier(cfg: TrainConfig) -> Callable[[int], float]:
    floor = cfg.lr_floor / cfg.lr

    def multiplier(epoch: int) -> float:
        return max(cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every), floor)

    return multiplier


class NashDQNTrainer:
    """Runs the Nash-DQN loop: sample, explore, step, fit, soft-update, reweight."""

    def __init__(
        self,
        market: MarketConfig,
        classes: Sequence[AgentClassSpec],
        net_cfg: NetConfig,
        train_cfg: TrainConfig,
        model: Optional[NashDQN] = None,
    ):
        validate_train_config(train_cfg)
        self.market = market
        self.train_cfg = train_cfg
        self.model = model or NashDQN(market, classes, net_cfg)
        self.agents = self.model.agents
        self.rng = np.random.default_rng(train_cfg.seed)
        self.optimizer = make_optimizer(self.model.online.parameters(), train_cfg.lr)
        self.scheduler = LambdaLR(self.optimizer, lr_multiplier(train_cfg))
        self.c_nu, self.c_p = exploration_scales(train_cfg, market.trade_bound)
        self.varphi = train_cfg.varphi0

    def sample_batch(self, eps: float) -> TransitionBatch:
        cfg = self.train_cfg
        states = sample_states(cfg.batch_size, self.rng, self.market, self.agents)
        with torch.no_grad():
            mu = self.model.heads(states).nash_action.numpy()
        action = apply_exploration(JointAction.from_stacked(mu), eps, self.c_nu, self.c_p, self.rng, self.market.trade_bound)
        outcome = step(states, action, self.market, self.agents, rng=self.rng)
        return TransitionBatch(states, action.stacked(), outcome.rewards, outcome.next_state)

    def train_epoch(self, epoch: int) -> Tuple[LossReport, float, float]:
        cfg = self.train_cfg
        eps = exploration_epsilon(epoch, cfg)
        lr = self.optimizer.param_groups[0]["lr"]
        batch = self.sample_batch(eps)

        self.optimizer.zero_grad(set_to_none=True)
        try:
            report = total_loss(self.model, batch, cfg.gamma, self.varphi, epoch)
        except NonFiniteLossError as e:
            raise TrainingDivergedError(str(e)) from e
        adam_step(self.optimizer)
        soft_update(self.model.target, self.model.online, cfg.phi_V)
        self.varphi = update_clearing_weight(self.varphi, report.q_loss, self.varphi * report.clearing_loss, cfg.phi_L)
        self.scheduler.step()

        norm = self.model.parameter_norm()
        if not np.isfinite(norm) or norm > cfg.max_param_norm:
            raise TrainingDivergedError(f"parameter norm {norm:.3e} exceeds {cfg.max_param_norm:.1e} at epoch {epoch}")
        return report, lr, eps

    def run(self, checkpoint_path: Optional[str] = None) -> TrainingResult:
        cfg = self.train_cfg
        logger.info(f"Training {self.agents.num_agents} agents for {cfg.epochs} epochs (batch {cfg.batch_size}, seed {cfg.seed})")
        rows: List[dict] = []
        for epoch in range(cfg.epochs):
            report, lr, eps = self.train_epoch(epoch)
            rows.append(
                {
                    "epoch": epoch,
                    "q_loss": report.q_loss,
                    "clearing_loss": report.clearing_loss,
                    "varphi": report.varphi,
                    "lr": lr,
                    "eps": eps,
                }
            )
            if cfg.log_every and (epoch % cfg.log_every == 0 or epoch == cfg.epochs - 1):
                logger.info(
                    f"epoch {epoch}: q_loss={report.q_loss:.4g} clearing={report.clearing_loss:.4g} "
                    f"varphi={report.varphi:.4g} lr={lr:.3g} eps={eps:.3f}"
                )

        history = pd.DataFrame(rows, columns=HISTORY_COLUMNS)
        if checkpoint_path:
            save_checkpoint(checkpoint_path, self.model, extra={"train": asdict(cfg), "varphi": self.varphi})
        return TrainingResult(model=self.model, history=history, varphi=self.varphi)


def train(
    market: MarketConfig,
    classes: Sequence[AgentClassSpec],
    net_cfg: NetConfig,
    train_cfg: TrainConfig,
    checkpoint_path: Optional[str] = None,
) -> TrainingResult:
    return NashDQNTrainer(market, classes, net_cfg, train_cfg).run(checkpoint_path)
