import copy
import logging
import os
from dataclasses import asdict, dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from config import AgentClassSpec, MarketConfig, NetConfig
from market_env import AgentTable, JointAction, MarketState

logger = logging.getLogger(__name__)

ACTIVATIONS = {
    "silu": nn.SiLU,
    "tanh": nn.Tanh,
    "softplus": nn.Softplus,
    "elu": nn.ELU,
}
CHOLESKY_JITTER = 1e-3
CHECKPOINT_VERSION = 1
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class NetError(Exception):
    pass


@dataclass
class NashHeads:
    """Per-agent outputs for a batch: shapes (B, N), (B, N, 2), (B, N, 2, 2), (B, N, 2, d), (B, N, d, d), (B, N, d)."""

    value: torch.Tensor
    nash_action: torch.Tensor
    chol: torch.Tensor
    cross: torch.Tensor
    other: torch.Tensor
    psi: torch.Tensor

    @property
    def own_block(self) -> torch.Tensor:
        return self.chol @ self.chol.transpose(-1, -2)

    @property
    def num_agents(self) -> int:
        return self.value.shape[1]


def feature_dim(num_agents: int) -> int:
    return num_agents + 3


def build_features(state: MarketState, agents: AgentTable, cfg: MarketConfig) -> torch.Tensor:
    """Normalized features for every (state, agent) pair, own inventory first, others in index order."""
    grid = cfg.grid
    k = state.time_index
    n = agents.num_agents
    t = grid.times[k]
    t_next = grid.next_compliance[k]
    t_start = grid.period_start[k]

    price_scale = cfg.penalty if cfg.penalty > 0 else 1.0
    req_scale = np.where(agents.requirement > 0, agents.requirement, 1.0)
    scaled_inv = state.inventories / req_scale

    common = np.stack([t / cfg.horizon, (t_next - t) / (t_next - t_start), state.price / price_scale], axis=-1)
    own = scaled_inv[:, :, None]
    others = scaled_inv[:, other_agent_index(n)]
    features = np.concatenate([np.repeat(common[:, None, :], n, axis=1), own, others], axis=-1)
    return torch.from_numpy(np.ascontiguousarray(features))


def other_agent_index(num_agents: int) -> np.ndarray:
    """(N, N-1) table: row i lists every agent except i, in index order."""
    return np.array([[j for j in range(num_agents) if j != i] for i in range(num_agents)], dtype=np.int64).reshape(
        num_agents, max(num_agents - 1, 0)
    )


class NashNetwork(nn.Module):
    """Shared trunk with value, Nash-action and advantage-coefficient heads for one agent class."""

    def __init__(self, net_cfg: NetConfig, num_agents: int, trade_bound: float):
        super().__init__()
        if net_cfg.hidden_layers < 1 or net_cfg.nodes_per_layer < 1:
            raise NetError("need at least one hidden layer with at least one node")
        if net_cfg.activation not in ACTIVATIONS:
            raise NetError(f"unknown activation '{net_cfg.activation}', choose from {sorted(ACTIVATIONS)}")
        self.num_agents = num_agents
        self.others_dim = 2 * (num_agents - 1)
        self.trade_bound = trade_bound
        self.output_scale = net_cfg.output_scale

        width = net_cfg.nodes_per_layer
        layers: List[nn.Module] = []
        in_dim = feature_dim(num_agents)
        for _ in range(net_cfg.hidden_layers):
            layers += [nn.Linear(in_dim, width), ACTIVATIONS[net_cfg.activation]()]
            in_dim = width
        self.trunk = nn.Sequential(*layers)

        d = self.others_dim
        self.value_head = nn.Linear(width, 1)
        self.action_head = nn.Linear(width, 2)
        self.chol_head = nn.Linear(width, 3)
        if d > 0:
            self.cross_head = nn.Linear(width, 2 * d)
            self.other_head = nn.Linear(width, d * d)
            self.psi_head = nn.Linear(width, d)

        # deviations are measured against action ranges (trade_bound for rates, 1 for probabilities)
        own_scale = torch.tensor([1.0 / trade_bound, 1.0], dtype=torch.float64)
        self.register_buffer("own_scale", own_scale, persistent=False)
        self.register_buffer("others_scale", own_scale.repeat(num_agents - 1), persistent=False)

    def forward(self, features: torch.Tensor) -> NashHeads:
        h = self.trunk(features)
        s = self.output_scale
        lead = features.shape[:-1]
        d = self.others_dim

        value = s * self.value_head(h).squeeze(-1)

        raw_action = self.action_head(h)
        nash_action = torch.stack([self.trade_bound * torch.tanh(raw_action[..., 0]), torch.sigmoid(raw_action[..., 1])], dim=-1)

        raw_chol = self.chol_head(h)
        diag = F.softplus(raw_chol[..., :2]) + CHOLESKY_JITTER
        zero = torch.zeros_like(raw_chol[..., 0])
        chol_raw = torch.stack(
            [torch.stack([diag[..., 0], zero], dim=-1), torch.stack([raw_chol[..., 2], diag[..., 1]], dim=-1)],
            dim=-2,
        )
        chol = (s**0.5) * self.own_scale[:, None] * chol_raw

        if d > 0:
            cross = s * self.cross_head(h).reshape(*lead, 2, d) * self.own_scale[:, None] * self.others_scale[None, :]
            raw_other = self.other_head(h).reshape(*lead, d, d)
            other = s * 0.5 * (raw_other + raw_other.transpose(-1, -2)) * self.others_scale[:, None] * self.others_scale[None, :]
            psi = s * self.psi_head(h) * self.others_scale
        else:
            cross = features.new_zeros(*lead, 2, 0)
            other = features.new_zeros(*lead, 0, 0)
            psi = features.new_zeros(*lead, 0)

        return NashHeads(value=value, nash_action=nash_action, chol=chol, cross=cross, other=other, psi=psi)


def _cat_heads(parts: Sequence[NashHeads]) -> NashHeads:
    if len(parts) == 1:
        return parts[0]
    return NashHeads(
        value=torch.cat([p.value for p in parts], dim=1),
        nash_action=torch.cat([p.nash_action for p in parts], dim=1),
        chol=torch.cat([p.chol for p in parts], dim=1),
        cross=torch.cat([p.cross for p in parts], dim=1),
        other=torch.cat([p.other for p in parts], dim=1),
        psi=torch.cat([p.psi for p in parts], dim=1),
    )


def eval_heads(networks: nn.ModuleList, state: MarketState, agents: AgentTable, cfg: MarketConfig) -> NashHeads:
    """Evaluate each agent's class network on its own features; agents of a class are contiguous."""
    features = build_features(state, agents, cfg)
    parts = []
    for c, network in enumerate(networks):
        members = np.flatnonzero(agents.class_index == c)
        parts.append(network(features[:, members[0] : members[-1] + 1]))
    return _cat_heads(parts)


def advantage(heads: NashHeads, actions: torch.Tensor, agent_index: Optional[int] = None) -> torch.Tensor:
    """Quadratic advantage of a joint action (B, N, 2); returns (B, N), or (B,) for one agent."""
    n = heads.num_agents
    deviation = actions - heads.nash_action
    others_idx = torch.from_numpy(other_agent_index(n))
    others = deviation[:, others_idx].reshape(deviation.shape[0], n, 2 * (n - 1))

    quadratic = (
        torch.einsum("bni,bnij,bnj->bn", deviation, heads.own_block, deviation)
        + 2.0 * torch.einsum("bni,bnij,bnj->bn", deviation, heads.cross, others)
        + torch.einsum("bni,bnij,bnj->bn", others, heads.other, others)
    )
    linear = torch.einsum("bni,bni->bn", others, heads.psi)
    result = -quadratic + linear
    return result if agent_index is None else result[:, agent_index]


def q_value(heads: NashHeads, actions: torch.Tensor, agent_index: Optional[int] = None) -> torch.Tensor:
    values = heads.value if agent_index is None else heads.value[:, agent_index]
    return values + advantage(heads, actions, agent_index)


class NashDQN:
    """Online and target class networks for one market."""

    def __init__(self, market: MarketConfig, classes: Sequence[AgentClassSpec], net_cfg: NetConfig):
        self.market = market
        self.classes = list(classes)
        self.agents = AgentTable.from_classes(self.classes)
        n = self.agents.num_agents
        if net_cfg.input_dim is not None and net_cfg.input_dim != feature_dim(n):
            raise NetError(f"input_dim {net_cfg.input_dim} does not match {feature_dim(n)} features for {n} agents")
        self.net_cfg = net_cfg

        torch.manual_seed(net_cfg.seed)
        self.online = nn.ModuleList([NashNetwork(net_cfg, n, market.trade_bound) for _ in self.classes]).double()
        self.target = copy.deepcopy(self.online)
        for p in self.target.parameters():
            p.requires_grad_(False)
        logger.info(f"Initialized {len(self.classes)} class networks for {n} agents ({self.num_parameters():,} parameters each copy)")

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.online.parameters())

    def heads(self, state: MarketState, target: bool = False) -> NashHeads:
        return eval_heads(self.target if target else self.online, state, self.agents, self.market)

    def check_finite(self):
        for name, p in self.online.named_parameters():
            if not torch.isfinite(p).all():
                raise NetError(f"non-finite parameter values in {name}")

    def parameter_norm(self) -> float:
        with torch.no_grad():
            return float(torch.sqrt(sum((p**2).sum() for p in self.online.parameters())))


class NetworkPolicy:
    """Nash actions of the online (or target) networks, without exploration."""

    def __init__(self, model: NashDQN, target: bool = False):
        self.model = model
        self.target = target

    def __call__(self, state: MarketState) -> JointAction:
        with torch.no_grad():
            mu = self.model.heads(state, target=self.target).nash_action.numpy()
        return JointAction.from_stacked(mu)


def value_at(model: NashDQN, state: MarketState, target: bool = False) -> np.ndarray:
    with torch.no_grad():
        return model.heads(state, target=target).value.numpy()


def make_optimizer(parameters, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(parameters, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def adam_step(optimizer: torch.optim.Optimizer) -> bool:
    """Apply one Adam update from the accumulated gradients; skipped when any gradient is non-finite."""
    params = [p for group in optimizer.param_groups for p in group["params"] if p.grad is not None]
    for p in params:
        if not torch.isfinite(p.grad).all():
            logger.warning("Non-finite gradient encountered, skipping Adam step")
            optimizer.zero_grad(set_to_none=True)
            return False
    optimizer.step()
    return True


def soft_update(target: nn.Module, online: nn.Module, phi_V: float):
    """target <- phi_V * online + (1 - phi_V) * target, in place."""
    if not 0.0 <= phi_V <= 1.0:
        raise NetError(f"soft update rate must lie in [0, 1], got {phi_V}")
    target_params = list(target.parameters())
    online_params = list(online.parameters())
    if len(target_params) != len(online_params):
        raise NetError("target and online networks have different parameter lists")
    with torch.no_grad():
        for t, o in zip(target_params, online_params):
            if t.shape != o.shape:
                raise NetError(f"shape mismatch in soft update: {tuple(t.shape)} vs {tuple(o.shape)}")
            t.lerp_(o, phi_V)


def grad_check(
    params: Sequence[torch.Tensor],
    loss_fn: Callable[[], torch.Tensor],
    tolerance: float = 1e-4,
    num_samples: int = 500,
    h: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max relative error between reverse-mode gradients and central differences on sampled entries."""
    params = list(params)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, grads)]
    floor = 1e-6 * max(1.0, abs(float(loss)))

    sizes = np.array([p.numel() for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(offsets[-1], size=min(num_samples, int(offsets[-1])), replace=False))

    worst = 0.0
    with torch.no_grad():
        for flat in picks:
            which = int(np.searchsorted(offsets, flat, side="right") - 1)
            pos = int(flat - offsets[which])
            view = params[which].view(-1)
            original = view[pos].item()
            view[pos] = original + h
            upper = float(loss_fn())
            view[pos] = original - h
            lower = float(loss_fn())
            view[pos] = original
            numeric = (upper - lower) / (2.0 * h)
            analytic = float(grads[which].view(-1)[pos])
            error = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            worst = max(worst, error)
    if worst > tolerance:
        logger.warning(f"Gradient check failed: max relative error {worst:.3e} > {tolerance:.1e}")
    else:
        logger.debug(f"Gradient check passed: max relative error {worst:.3e} over {len(picks)} entries")
    return worst


def save_checkpoint(path: str, model: NashDQN, extra: Optional[Dict[str, Any]] = None):
    """Atomically write parameters and configs (write to a temp file, then rename)."""
    payload: Dict[str, Any] = {
        "format_version": CHECKPOINT_VERSION,
        "market": asdict(model.market),
        "classes": [asdict(c) for c in model.classes],
        "net": asdict(model.net_cfg),
        "online": [net.state_dict() for net in model.online],
        "target": [net.state_dict() for net in model.target],
    }
    payload.update(extra or {})
    tmp_path = f"{path}.tmp"
    torch.save(payload, tmp_path)
    os.replace(tmp_path, path)
    logger.info(f"Checkpoint written to {path}")


def load_checkpoint(path: str) -> Dict[str, Any]:
    if not os.path.exists(path):
        raise NetError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise NetError(f"unsupported checkpoint version {payload.get('format_version')}")
    return payload


def model_from_checkpoint(payload: Dict[str, Any]) -> NashDQN:
    market = MarketConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in payload["market"].items()})
    classes = [AgentClassSpec(**c) for c in payload["classes"]]
    model = NashDQN(market, classes, NetConfig(**payload["net"]))
    for net, state in zip(model.online, payload["online"]):
        net.load_state_dict(state)
    for net, state in zip(model.target, payload["target"]):
        net.load_state_dict(state)
    return model
