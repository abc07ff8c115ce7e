import numpy as np
import pytest
import torch
import torch.nn as nn

from config import AgentClassSpec, MarketConfig, NetConfig
from market_env import AgentTable, MarketState, sample_states
from nets import (
    NashDQN,
    NashHeads,
    NetError,
    NetworkPolicy,
    adam_step,
    advantage,
    build_features,
    grad_check,
    load_checkpoint,
    make_optimizer,
    model_from_checkpoint,
    q_value,
    save_checkpoint,
    soft_update,
    value_at,
)


def identity_heads(batch=1, agents=2):
    """Heads with P = I, Psi = 0 and Nash action 0 for every agent."""
    d = 2 * (agents - 1)
    return NashHeads(
        value=torch.zeros(batch, agents, dtype=torch.float64),
        nash_action=torch.zeros(batch, agents, 2, dtype=torch.float64),
        chol=torch.eye(2, dtype=torch.float64).expand(batch, agents, 2, 2).clone(),
        cross=torch.zeros(batch, agents, 2, d, dtype=torch.float64),
        other=torch.eye(d, dtype=torch.float64).expand(batch, agents, d, d).clone(),
        psi=torch.zeros(batch, agents, d, dtype=torch.float64),
    )


@pytest.fixture
def model(market, four_classes, small_net):
    return NashDQN(market, four_classes, small_net)


def test_build_features_own_first(market, four_agents):
    """Test features are normalized and list the own inventory first"""
    state = MarketState.single(0, 50.0, [5.0, 10.0, 15.0, 20.0])

    features = build_features(state, four_agents, market)

    assert features.shape == (1, 4, 7)
    assert features.dtype == torch.float64
    np.testing.assert_allclose(features[0, 1].numpy(), [0.0, 1.0, 1.0, 0.4, 0.2, 0.6, 0.8])
    np.testing.assert_allclose(features[0, 3].numpy(), [0.0, 1.0, 1.0, 0.8, 0.2, 0.4, 0.6])


def test_head_invariants(model, market, four_agents, rng):
    """Test action bounds and positive definite own-action blocks on random states"""
    states = sample_states(512, rng, market, four_agents)

    with torch.no_grad():
        heads = model.heads(states)

    assert heads.value.shape == (512, 4)
    assert torch.all(heads.nash_action[..., 0].abs() <= market.trade_bound)
    assert torch.all((heads.nash_action[..., 1] > 0) & (heads.nash_action[..., 1] < 1))
    assert torch.all(torch.linalg.eigvalsh(heads.own_block) > 0)
    torch.testing.assert_close(heads.other, heads.other.transpose(-1, -2))


def test_advantage_vanishes_at_nash_action(model, market, four_agents, rng):
    """Test A(theta, mu(theta)) = 0 and V = Q at the Nash action"""
    states = sample_states(10000, rng, market, four_agents)

    with torch.no_grad():
        heads = model.heads(states)
        at_nash = advantage(heads, heads.nash_action)
        q = q_value(heads, heads.nash_action)

    assert at_nash.abs().max().item() < 1e-9
    torch.testing.assert_close(q, heads.value)


def test_advantage_identity_blocks():
    """Test an own deviation (1, 0) with P = I costs exactly 1"""
    heads = identity_heads()
    actions = torch.tensor([[[1.0, 0.0], [0.0, 0.0]]], dtype=torch.float64)

    assert advantage(heads, actions, agent_index=0).item() == pytest.approx(-1.0)


def test_advantage_other_deviation(rng):
    """Test a pure deviation u by the others gives -u'P22u + u'Psi"""
    heads = identity_heads()
    m = rng.normal(size=(2, 2))
    p22 = 0.5 * (m + m.T)
    psi = rng.normal(size=2)
    u = rng.normal(size=2)
    heads.other[0, 0] = torch.from_numpy(p22)
    heads.psi[0, 0] = torch.from_numpy(psi)
    actions = torch.zeros(1, 2, 2, dtype=torch.float64)
    actions[0, 1] = torch.from_numpy(u)

    assert advantage(heads, actions, agent_index=0).item() == pytest.approx(-u @ p22 @ u + u @ psi)


def test_q_value_is_value_plus_advantage(model, market, four_agents, rng):
    """Test Q - V = A on random heads and actions"""
    states = sample_states(64, rng, market, four_agents)
    actions = torch.from_numpy(np.stack([rng.uniform(-50, 50, (64, 4)), rng.uniform(0, 1, (64, 4))], axis=-1))

    with torch.no_grad():
        heads = model.heads(states)
        gap = q_value(heads, actions, agent_index=2) - heads.value[:, 2]
        adv = advantage(heads, actions, agent_index=2)

    torch.testing.assert_close(gap, adv, rtol=0, atol=1e-12 * max(1.0, adv.abs().max().item()))


def test_own_action_best_response_is_nash(model, market, four_agents, rng):
    """Test no own-action grid point beats the Nash action when others play mu"""
    states = sample_states(8, rng, market, four_agents)
    with torch.no_grad():
        heads = model.heads(states)
        best = q_value(heads, heads.nash_action, agent_index=0)
        for trade in np.linspace(-market.trade_bound, market.trade_bound, 21):
            for prob in np.linspace(0.0, 1.0, 11):
                actions = heads.nash_action.clone()
                actions[:, 0, 0] = trade
                actions[:, 0, 1] = prob
                assert torch.all(q_value(heads, actions, agent_index=0) <= best + 1e-9)


def test_shared_class_network_is_symmetric(market):
    """Test swapping two same-class agents swaps their outputs"""
    model = NashDQN(market, [AgentClassSpec("A", population=2)], NetConfig(hidden_layers=2, nodes_per_layer=8))
    state = MarketState.single(3, 48.0, [4.0, 9.0])
    swapped = MarketState.single(3, 48.0, [9.0, 4.0])

    first = NetworkPolicy(model)(state).stacked()[0]
    second = NetworkPolicy(model)(swapped).stacked()[0]

    np.testing.assert_allclose(first[0], second[1])
    np.testing.assert_allclose(value_at(model, state)[0, 0], value_at(model, swapped)[0, 1])


def test_network_config_errors(market, four_classes):
    """Test unknown activations and mismatched input sizes are rejected"""
    with pytest.raises(NetError):
        NashDQN(market, four_classes, NetConfig(activation="relu6"))
    with pytest.raises(NetError):
        NashDQN(market, four_classes, NetConfig(input_dim=5, hidden_layers=1, nodes_per_layer=4))
    with pytest.raises(NetError):
        NashDQN(market, four_classes, NetConfig(hidden_layers=0))


def test_soft_update():
    """Test the convex combination for phi 0, 1 and 0.05"""
    online = nn.Linear(3, 2).double()
    target = nn.Linear(3, 2).double()
    with torch.no_grad():
        for p in online.parameters():
            p.fill_(1.0)
        for p in target.parameters():
            p.zero_()

    soft_update(target, online, 0.0)
    assert all(torch.all(p == 0) for p in target.parameters())

    soft_update(target, online, 0.05)
    assert all(torch.allclose(p, torch.full_like(p, 0.05)) for p in target.parameters())

    soft_update(target, online, 1.0)
    assert all(torch.equal(t, o) for t, o in zip(target.parameters(), online.parameters()))


def test_soft_update_contracts(rng):
    """Test the distance to the online weights shrinks by exactly 1 - phi"""
    online = nn.Linear(4, 4).double()
    target = nn.Linear(4, 4).double()
    before = [(t - o).detach().clone() for t, o in zip(target.parameters(), online.parameters())]

    soft_update(target, online, 0.25)

    for gap, t, o in zip(before, target.parameters(), online.parameters()):
        torch.testing.assert_close((t - o).detach(), 0.75 * gap)


def test_soft_update_errors():
    """Test bad rates and mismatched shapes"""
    with pytest.raises(NetError):
        soft_update(nn.Linear(2, 2), nn.Linear(2, 2), 1.5)
    with pytest.raises(NetError):
        soft_update(nn.Linear(2, 2), nn.Linear(3, 2), 0.5)


def test_adam_zero_gradient_keeps_parameters():
    """Test a zero gradient leaves parameters unchanged"""
    theta = nn.Parameter(torch.tensor([1.0, -2.0], dtype=torch.float64))
    optimizer = make_optimizer([theta], lr=0.1)
    theta.grad = torch.zeros_like(theta)

    assert adam_step(optimizer)
    torch.testing.assert_close(theta.detach(), torch.tensor([1.0, -2.0], dtype=torch.float64))


def test_adam_first_step_moves_by_lr():
    """Test the bias-corrected first step has magnitude close to lr"""
    theta = nn.Parameter(torch.tensor([0.0], dtype=torch.float64))
    optimizer = make_optimizer([theta], lr=0.01)
    theta.grad = torch.tensor([3.0], dtype=torch.float64)

    adam_step(optimizer)

    assert theta.item() == pytest.approx(-0.01, rel=1e-6)


def test_adam_steady_gradient_keeps_step_size():
    """Test a repeated gradient keeps the bias-corrected step at lr"""
    theta = nn.Parameter(torch.tensor([0.0], dtype=torch.float64))
    optimizer = make_optimizer([theta], lr=0.01)
    theta.grad = torch.tensor([3.0], dtype=torch.float64)
    adam_step(optimizer)
    first = theta.item()
    theta.grad = torch.tensor([3.0], dtype=torch.float64)
    adam_step(optimizer)

    assert abs(theta.item() - first) == pytest.approx(0.01, rel=1e-6)
    assert optimizer.state[theta]["step"].item() == 2


def test_adam_skips_non_finite_gradient():
    """Test NaN gradients skip the update"""
    theta = nn.Parameter(torch.tensor([1.0], dtype=torch.float64))
    optimizer = make_optimizer([theta], lr=0.1)
    theta.grad = torch.tensor([float("nan")], dtype=torch.float64)

    assert not adam_step(optimizer)
    assert theta.item() == 1.0


def test_grad_check_quadratic():
    """Test 0.5 * theta^2 at theta = 3 has gradient 3"""
    theta = torch.tensor([3.0], dtype=torch.float64, requires_grad=True)

    error = grad_check([theta], lambda: 0.5 * (theta**2).sum(), num_samples=1)

    assert error < 1e-8


def test_grad_check_constant_loss():
    """Test a constant loss has zero gradient everywhere"""
    theta = torch.ones(10, dtype=torch.float64, requires_grad=True)

    assert grad_check([theta], lambda: (theta * 0.0).sum() + 7.0, num_samples=10) == 0.0


def test_checkpoint_round_trip(tmp_path, model, market, four_agents, rng):
    """Test a saved checkpoint restores bit-identical networks"""
    path = str(tmp_path / "checkpoint.pt")
    save_checkpoint(path, model, extra={"varphi": 12.5})

    payload = load_checkpoint(path)
    restored = model_from_checkpoint(payload)

    assert payload["varphi"] == 12.5
    for original, loaded in zip(model.online.parameters(), restored.online.parameters()):
        assert torch.equal(original, loaded)
    for original, loaded in zip(model.target.parameters(), restored.target.parameters()):
        assert torch.equal(original, loaded)
    states = sample_states(16, rng, market, four_agents)
    np.testing.assert_array_equal(value_at(model, states), value_at(restored, states))


def test_missing_checkpoint(tmp_path):
    """Test loading a missing checkpoint fails cleanly"""
    with pytest.raises(NetError):
        load_checkpoint(str(tmp_path / "nope.pt"))


def test_same_seed_same_weights(market, four_classes, small_net):
    """Test initialization is deterministic given the seed"""
    first = NashDQN(market, four_classes, small_net)
    second = NashDQN(market, four_classes, small_net)

    for a, b in zip(first.online.parameters(), second.online.parameters()):
        assert torch.equal(a, b)


def test_single_agent_has_no_cross_terms():
    """Test a lone agent gets empty cross, other and psi blocks"""
    cfg = MarketConfig()
    model = NashDQN(cfg, [AgentClassSpec("Solo")], NetConfig(hidden_layers=1, nodes_per_layer=4))
    agents = AgentTable.from_classes([AgentClassSpec("Solo")])

    with torch.no_grad():
        heads = model.heads(MarketState.single(0, 50.0, [0.0]))

    assert heads.cross.shape == (1, 1, 2, 0)
    assert heads.psi.shape == (1, 1, 0)
    assert advantage(heads, heads.nash_action).item() == 0.0
    assert agents.num_agents == 1
