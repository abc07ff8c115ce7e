from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
import torch
from scipy.stats import norm

import trainer
from config import AgentClassSpec, MarketConfig, NetConfig, TrainConfig
from market_env import AgentTable, JointAction, sample_states
from nets import NashHeads, grad_check
from presets import load_preset
from trainer import (
    NashDQNTrainer,
    TrainingDivergedError,
    apply_exploration,
    exploration_epsilon,
    loss_terms,
    lr_multiplier,
    update_clearing_weight,
    validate_train_config,
)

TWO_CLASSES = [
    AgentClassSpec("Big", requirement=5.0, gen_size=2.0, gen_cost=60.0),
    AgentClassSpec("Small", requirement=5.0, gen_size=1.0, gen_cost=20.0),
]
SHORT_MARKET = MarketConfig(compliance_dates=(1.0,), steps_per_period=(4,), trade_bound=10.0)
TINY_NET = NetConfig(hidden_layers=2, nodes_per_layer=16, seed=3)


def fitted_heads(values, trades):
    """Heads whose Nash action is (trade, 0.5) with identity P blocks."""
    values = torch.tensor([values], dtype=torch.float64)
    n = values.shape[1]
    d = 2 * (n - 1)
    nash = torch.stack([torch.tensor([trades], dtype=torch.float64), torch.full((1, n), 0.5, dtype=torch.float64)], dim=-1)
    return NashHeads(
        value=values,
        nash_action=nash,
        chol=torch.eye(2, dtype=torch.float64).expand(1, n, 2, 2).clone(),
        cross=torch.zeros(1, n, 2, d, dtype=torch.float64),
        other=torch.eye(d, dtype=torch.float64).expand(1, n, d, d).clone(),
        psi=torch.zeros(1, n, d, dtype=torch.float64),
    )


def test_exploration_zero_eps_keeps_action(rng):
    """Test eps = 0 leaves the action unchanged"""
    action = JointAction([[3.0, -4.0]], [[0.2, 0.9]])

    explored = apply_exploration(action, 0.0, 25.0, 0.5, rng, 50.0)

    np.testing.assert_array_equal(explored.trade_rates, action.trade_rates)
    np.testing.assert_array_equal(explored.gen_probs, action.gen_probs)


def test_exploration_clips_to_action_box(rng):
    """Test large noise is clipped back to the bounds"""
    action = JointAction(np.full((1000, 2), 50.0), np.full((1000, 2), 0.5))

    explored = apply_exploration(action, 100.0, 25.0, 0.5, rng, 50.0)

    assert np.all(np.abs(explored.trade_rates) <= 50.0)
    assert np.all((explored.gen_probs >= 0.0) & (explored.gen_probs <= 1.0))
    assert np.any(explored.trade_rates == 50.0)


def test_exploration_matches_clipped_normal(rng):
    """Test the generation-probability noise std against the clipped normal"""
    draws = 100000
    action = JointAction(np.zeros((draws, 1)), np.full((draws, 1), 0.5))

    explored = apply_exploration(action, 1.0, 25.0, 0.5, rng, 50.0)

    tail = 1.0 - norm.cdf(1.0)
    clipped_var = (1.0 - 2.0 * tail) - 2.0 * norm.pdf(1.0) + 2.0 * tail
    expected_std = 0.5 * np.sqrt(clipped_var)
    assert explored.gen_probs.std() == pytest.approx(expected_std, abs=0.005)


def test_exploration_rejects_negative_eps(rng):
    """Test eps must be nonnegative"""
    with pytest.raises(ValueError):
        apply_exploration(JointAction([[0.0]], [[0.0]]), -0.1, 1.0, 1.0, rng, 1.0)


def test_loss_perfect_fit_is_zero():
    """Test V + A = r + gamma * V' with balanced trades gives zero loss"""
    heads = fitted_heads([1.0, 2.0, 3.0], [1.0, -2.0, 1.0])
    next_values = torch.tensor([[0.5, 0.5, 0.5]], dtype=torch.float64)
    rewards = heads.value - next_values

    q_loss, clearing, total = loss_terms(heads, heads.nash_action, rewards, next_values, torch.tensor([False]), 1.0, 50.0)

    assert q_loss.item() == pytest.approx(0.0)
    assert clearing.item() == pytest.approx(0.0)
    assert total.item() == pytest.approx(0.0)


def test_loss_unit_residuals():
    """Test unit residuals for every agent give q_loss = N"""
    heads = fitted_heads([1.0, 2.0, 3.0], [1.0, -2.0, 1.0])
    next_values = torch.tensor([[0.5, 0.5, 0.5]], dtype=torch.float64)
    rewards = heads.value - next_values - 1.0

    q_loss, _, _ = loss_terms(heads, heads.nash_action, rewards, next_values, torch.tensor([False]), 1.0, 50.0)

    assert q_loss.item() == pytest.approx(3.0)


def test_loss_clearing_penalty():
    """Test trades (1, 2, -1) with varphi 50 cost 200"""
    heads = fitted_heads([0.0, 0.0, 0.0], [1.0, 2.0, -1.0])
    zeros = torch.zeros(1, 3, dtype=torch.float64)

    q_loss, clearing, total = loss_terms(heads, heads.nash_action, zeros, zeros, torch.tensor([False]), 1.0, 50.0)

    assert q_loss.item() == 0.0
    assert clearing.item() == pytest.approx(4.0)
    assert total.item() == pytest.approx(200.0)


def test_loss_ignores_next_value_at_terminal():
    """Test terminal next states bootstrap from zero"""
    heads = fitted_heads([2.0, 2.0], [0.0, 0.0])
    next_values = torch.full((1, 2), 1e6, dtype=torch.float64)
    rewards = torch.full((1, 2), 2.0, dtype=torch.float64)

    q_loss, _, _ = loss_terms(heads, heads.nash_action, rewards, next_values, torch.tensor([True]), 1.0, 1.0)

    assert q_loss.item() == 0.0


def test_update_clearing_weight():
    """Test the worked example, the fixed point, phi_L = 0 and the zero guard"""
    assert update_clearing_weight(50.0, 100.0, 25.0, 0.25) == pytest.approx(62.5)
    assert update_clearing_weight(50.0, 80.0, 40.0, 0.25) == pytest.approx(50.0)
    assert update_clearing_weight(50.0, 100.0, 25.0, 0.0) == pytest.approx(50.0)
    assert update_clearing_weight(50.0, 100.0, 0.0, 0.25) == 50.0


def test_exploration_schedule():
    """Test eps decays linearly to eps_min over 80% of epochs then stays flat"""
    cfg = TrainConfig(epochs=100)
    schedule = [exploration_epsilon(e, cfg) for e in range(cfg.epochs)]

    assert schedule[0] == 1.0
    assert schedule[40] == pytest.approx(0.51)
    assert schedule[80] == pytest.approx(0.02)
    assert schedule[-1] == pytest.approx(0.02)
    assert np.all(np.diff(schedule) <= 0)


def test_lr_schedule():
    """Test step decay every 25 epochs with the floor"""
    multiplier = lr_multiplier(TrainConfig(lr=0.001, lr_floor=1e-5))

    assert multiplier(0) == 1.0
    assert multiplier(24) == 1.0
    assert multiplier(25) == pytest.approx(0.999)
    assert multiplier(10**7) == pytest.approx(0.01)


def test_validate_train_config():
    """Test out-of-range hyperparameters are rejected"""
    with pytest.raises(ValueError):
        validate_train_config(TrainConfig(gamma=0.0))
    with pytest.raises(ValueError):
        validate_train_config(TrainConfig(phi_L=1.0))
    with pytest.raises(ValueError):
        validate_train_config(TrainConfig(eps0=0.01, eps_min=0.02))


def test_full_loss_gradients_match_finite_differences():
    """Test reverse-mode gradients of the full loss on a frozen batch"""
    trainer = NashDQNTrainer(SHORT_MARKET, TWO_CLASSES, TINY_NET, TrainConfig(batch_size=16, epochs=1, log_every=0))
    batch = trainer.sample_batch(eps=1.0)
    model = trainer.model
    with torch.no_grad():
        next_values = model.heads(batch.next_states, target=True).value
    terminal = torch.from_numpy(batch.next_states.time_index >= SHORT_MARKET.num_steps)
    actions = torch.from_numpy(batch.actions)
    rewards = torch.from_numpy(batch.rewards)

    def loss_fn():
        return loss_terms(model.heads(batch.states), actions, rewards, next_values, terminal, 1.0, 50.0)[2]

    error = grad_check(list(model.online.parameters()), loss_fn, num_samples=500)

    assert error < 1e-4


def test_training_is_deterministic():
    """Test two runs with the same seed give identical loss histories"""
    cfg = TrainConfig(epochs=5, batch_size=32, log_every=0, seed=7)

    first = NashDQNTrainer(SHORT_MARKET, TWO_CLASSES, TINY_NET, cfg).run()
    second = NashDQNTrainer(SHORT_MARKET, TWO_CLASSES, TINY_NET, cfg).run()

    pd.testing.assert_frame_equal(first.history, second.history, check_exact=True)
    assert list(first.history.columns) == ["epoch", "q_loss", "clearing_loss", "varphi", "lr", "eps"]


def test_training_history_tracks_schedules():
    """Test varphi stays positive and the learning rate decays on schedule"""
    cfg = TrainConfig(epochs=30, batch_size=16, log_every=0, lr_decay_every=25)

    history = NashDQNTrainer(SHORT_MARKET, TWO_CLASSES, TINY_NET, cfg).run().history

    assert np.all(history["varphi"] > 0)
    assert history["lr"].iloc[24] == pytest.approx(cfg.lr)
    assert history["lr"].iloc[25] == pytest.approx(cfg.lr * cfg.lr_decay_factor)
    assert np.all(np.diff(history["eps"]) <= 0)


def test_training_writes_checkpoint(tmp_path):
    """Test a finished run leaves a loadable checkpoint"""
    from nets import load_checkpoint

    path = str(tmp_path / "checkpoint.pt")
    result = NashDQNTrainer(SHORT_MARKET, TWO_CLASSES, TINY_NET, TrainConfig(epochs=2, batch_size=8, log_every=0)).run(path)

    payload = load_checkpoint(path)
    assert payload["varphi"] == pytest.approx(result.varphi)
    assert payload["train"]["epochs"] == 2


def test_parameter_norm_explosion_aborts():
    """Test the divergence guard on the parameter norm"""
    cfg = TrainConfig(epochs=3, batch_size=8, log_every=0, max_param_norm=1e-3)

    with pytest.raises(TrainingDivergedError):
        NashDQNTrainer(SHORT_MARKET, TWO_CLASSES, TINY_NET, cfg).run()


@pytest.mark.slow
def test_single_agent_training_converges():
    """Test the Bellman loss drops by an order of magnitude on a one-agent, one-period toy"""
    market = MarketConfig(compliance_dates=(1.0,), steps_per_period=(12,), trade_bound=20.0)
    classes = [AgentClassSpec("Solo", requirement=10.0, gen_size=1.0, gen_cost=25.0)]
    cfg = TrainConfig(epochs=2000, batch_size=128, log_every=500)

    history = NashDQNTrainer(market, classes, NetConfig(hidden_layers=3, nodes_per_layer=64), cfg).run().history

    assert history["q_loss"].tail(100).median() < 0.1 * history["q_loss"].head(100).median()


@pytest.mark.slow
def test_net_trade_shrinks_as_clearing_weight_grows(monkeypatch):
    """Test mean |sum of Nash trade rates| never grows across varphi = 10, 1e3, 1e5"""
    cfg = load_preset("two_agent_small")
    # hold varphi at its initial value for the whole run
    monkeypatch.setattr(trainer, "update_clearing_weight", lambda varphi, *args: varphi)
    states = sample_states(100, np.random.default_rng(2024), cfg.market, AgentTable.from_classes(cfg.classes))

    imbalances = []
    for varphi in (10.0, 1e3, 1e5):
        train_cfg = replace(cfg.train, varphi0=varphi, log_every=0)
        model = NashDQNTrainer(cfg.market, cfg.classes, cfg.net, train_cfg).run().model
        with torch.no_grad():
            trade_rates = model.heads(states).nash_action[..., 0].numpy()
        imbalances.append(np.abs(trade_rates.sum(axis=1)).mean())

    assert imbalances[1] <= imbalances[0]
    assert imbalances[2] <= imbalances[1]
