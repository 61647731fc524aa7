import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare
from torch import nn

from videojscc.allocator import (
    ClipEpisode,
    DqnAgent,
    QNetwork,
    ReplayBuffer,
    ToyEpisode,
    Transition,
    action_count,
    build_state,
    concave_features,
    dqn_loss,
    enumerate_actions,
    epsilon_schedule,
    q_values,
    reward_from_loss,
    run_episodes,
    select_action,
    soft_update,
    state_channels,
    step_env,
    uniform_allocation,
)
from videojscc.config import CodecConfig, DqnConfig
from videojscc.models import JSCCModels
from videojscc.synthetic import make_clip
from videojscc.video import segment

CFG = CodecConfig(latent_channels=48, hidden=16, ssf_hidden=8, block_count=8)


def _brute(n, v):
    if n == 1:
        return [(v,)]
    return sorted((a,) + r for a in range(v + 1) for r in _brute(n - 1, v - a))


def test_enumeration_examples():
    assert enumerate_actions(2, 2) == [(0, 2), (1, 1), (2, 0)]
    assert len(enumerate_actions(4, 20)) == 1771 == action_count(4, 20)
    assert enumerate_actions(1, 7) == [(7,)]
    assert enumerate_actions(3, 0) == [(0, 0, 0)]
    with pytest.raises(ValueError):
        enumerate_actions(0, 3)


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_enumeration_matches_brute_force(n):
    for v in range(1, 9):
        acts = enumerate_actions(n, v)
        assert acts == _brute(n, v)
        assert len(acts) == math.factorial(v + n - 1) // (math.factorial(v) * math.factorial(n - 1))
        assert all(sum(a) == v for a in acts)


def test_uniform_bootstrap():
    assert uniform_allocation(4, 20) == (5, 5, 5, 5)
    assert uniform_allocation(4, 12) == (3, 3, 3, 3)
    assert uniform_allocation(4, 10) == (2, 2, 2, 4)
    assert state_channels(4) == 69 and state_channels(2) == 27


@pytest.fixture(scope="module")
def models():
    torch.manual_seed(0)
    return JSCCModels(CFG).eval()


@pytest.fixture(scope="module")
def clip():
    return segment(make_clip(9, (32, 32), np.random.default_rng(0)), 4)


def _gop(clip, g=0):
    f = torch.from_numpy(clip.frames).permute(0, 3, 1, 2)
    return f[1 + 4 * g : 5 + 4 * g], f[4 * g]


def test_build_state_layout_and_determinism(models, clip):
    gop, ref = _gop(clip)
    a = build_state(models, gop, ref, 0.1, 8, torch.Generator().manual_seed(3))
    b = build_state(models, gop, ref, 0.1, 8, torch.Generator().manual_seed(3))
    assert a.stack().shape == (69, 32, 32)
    assert torch.equal(a.stack(), b.stack())
    assert torch.equal(a.refs[0], ref)
    assert len(a.flows) == len(a.residuals) == 6


def test_qnet_outputs_and_sensitivity(models, clip):
    gop, ref = _gop(clip)
    state = build_state(models, gop, ref, 0.1, 20, torch.Generator().manual_seed(0))
    for head in ("factored", "dense", "concave"):
        torch.manual_seed(0)
        q = QNetwork(4, 20, hidden=8, stages=3, head=head)
        out = q_values(state, q)
        assert out.shape == (1771,) and torch.isfinite(out).all()
        assert torch.equal(out, q_values(state, q))
        swapped = type(state)(state.frames, state.refs, state.flows, [state.residuals[1], state.residuals[0]] + state.residuals[2:],
                              state.est_noise_power)
        assert not torch.allclose(q_values(swapped, q), out)
    with pytest.raises(ValueError):
        q(torch.zeros(1, 10, 32, 32), torch.zeros(1))
    with pytest.raises(ValueError):
        QNetwork(4, 20, head="bogus")


@settings(max_examples=30, deadline=None)
@given(coef=st.lists(st.floats(0, 10), min_size=3, max_size=3), budget=st.integers(2, 20))
def test_concave_basis_gives_nondecreasing_concave_values(coef, budget):
    acts = [(v, budget - v) for v in range(budget + 1)]
    u = (concave_features(acts, budget)[:, 0] @ torch.tensor(coef, dtype=torch.float32)).double()
    steps = u.diff()
    assert (steps >= -1e-6).all()
    assert (steps.diff() <= 1e-5).all()


def test_concave_head_prefers_balance_when_frames_match():
    torch.manual_seed(0)
    q = QNetwork(4, 20, hidden=8, stages=3, head="concave")
    with torch.no_grad():
        q.head.weight.zero_()
        q.head.bias.copy_(torch.tensor([-20.0, 1.0, -20.0] * 4 + [0.0]))
    out = q(torch.zeros(1, q.in_channels, 32, 32), torch.zeros(1))[0]
    assert q.actions[int(out.argmax())] == (5, 5, 5, 5)


def test_select_action_examples():
    rng = np.random.default_rng(0)
    assert select_action([1.0, 3.0, 2.0], 0.0, rng) == 1
    assert select_action([2.0, 5.0, 5.0], 0.0, rng) == 1  # lowest index among ties
    with pytest.raises(ValueError):
        select_action([], 0.0, rng)
    with pytest.raises(ValueError):
        select_action([1.0], 1.5, rng)


def test_select_action_uniform_at_full_exploration():
    rng = np.random.default_rng(1)
    counts = np.bincount([select_action(np.zeros(10), 1.0, rng) for _ in range(100_000)], minlength=10)
    assert chisquare(counts).pvalue > 0.001


@settings(max_examples=50, deadline=None)
@given(q=st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=40), c=st.floats(-1e3, 1e3))
def test_argmax_invariant_to_offsets(q, c):
    rng = np.random.default_rng(0)
    qs = np.asarray(q)
    shifted = qs + c
    # exclude near-ties that rounding of the offset could reorder
    if len(qs) > 1 and np.sort(qs)[-1] - np.sort(qs)[-2] < 1e-6:
        return
    assert select_action(qs, 0.0, rng) == select_action(shifted, 0.0, rng)


def test_epsilon_schedule():
    cfg = DqnConfig()
    assert epsilon_schedule(0, cfg) == pytest.approx(0.9)
    # 0.05 + 0.85 / e
    assert epsilon_schedule(1000, cfg) == pytest.approx(0.3626975250, abs=1e-9)
    assert epsilon_schedule(10**6, cfg) == pytest.approx(0.05)
    vals = [epsilon_schedule(e, cfg) for e in range(0, 5000, 50)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert all(0.05 <= v <= 0.9 for v in vals)


def _toy_state(seed=0):
    return ToyEpisode(2, (1, 1), seed=seed, hw=(8, 8))._state()


def test_replay_fifo_and_sampling():
    buf = ReplayBuffer(1000)
    s = _toy_state()
    for i in range(1500):
        buf.push(Transition(s, i % 3, float(i), None))
    assert len(buf) == 1000
    assert [t.reward for t in buf][:3] == [500.0, 501.0, 502.0]
    batch = buf.sample(8, np.random.default_rng(0))
    assert len({t.reward for t in batch}) == 8
    with pytest.raises(ValueError):
        Transition(s, 0, float("nan"), None)


class ConstQ(nn.Module):
    def __init__(self, q):
        super().__init__()
        self.q = nn.Parameter(torch.tensor(q, dtype=torch.float32))

    def forward(self, x, snr):
        return self.q.expand(x.shape[0], -1)


def test_dqn_loss_examples():
    s = _toy_state()
    online, target = ConstQ([0.0, 0.0]), ConstQ([0.0, 2.0])
    assert dqn_loss([Transition(s, 0, 1.0, s)], online, target, 0.0).item() == pytest.approx(1.0)
    exact = ConstQ([1.0 + 0.5 * 2.0, 0.0])
    assert dqn_loss([Transition(s, 0, 1.0, s)], exact, target, 0.5).item() == pytest.approx(0.0)
    # per-sample losses 1 and 3 -> mean 2
    two = [Transition(s, 0, 1.0, None), Transition(s, 1, math.sqrt(3.0), None)]
    assert dqn_loss(two, online, target, 0.9).item() == pytest.approx(2.0)
    with pytest.raises(ValueError):
        dqn_loss([], online, target, 0.9)


def test_dqn_loss_gradient_only_through_online():
    s = _toy_state()
    online, target = ConstQ([0.0, 0.0]), ConstQ([0.0, 2.0])
    dqn_loss([Transition(s, 0, 1.0, s)], online, target, 0.9).backward()
    assert online.q.grad is not None and target.q.grad is None


def test_soft_update_edges():
    a, b = ConstQ([1.0]), ConstQ([0.0])
    soft_update(a, b, 0.0)
    assert b.q.item() == 0.0
    soft_update(a, b, 0.005)
    assert b.q.item() == pytest.approx(0.005)
    soft_update(a, b, 1.0)
    assert torch.equal(a.q, b.q)
    with pytest.raises(ValueError):
        soft_update(ConstQ([1.0, 2.0]), ConstQ([1.0]), 0.5)


def test_reward_examples():
    assert reward_from_loss(0.01) == pytest.approx(2.0)
    assert reward_from_loss(1.0) == 0.0
    assert reward_from_loss(0.05) == pytest.approx(1.30103, abs=1e-5)
    with pytest.raises(ValueError):
        reward_from_loss(0.0)


def test_step_env_reward_and_next_reference(models, clip):
    gop, ref = _gop(clip)
    out = step_env(models, gop, (2, 2, 2, 2), ref, ref, 0.0, 0.0)
    mse = float(((out.recon - gop) ** 2).mean(dim=(1, 2, 3)).mean())
    assert out.reward == pytest.approx(-math.log10(mse), rel=1e-5)
    assert torch.allclose(out.next_key_tx, out.next_key_rx)
    with pytest.raises(ValueError):
        step_env(models, gop, (4, 4), ref, ref, 0.0, 0.0)


def test_clip_episode_and_agent_smoke(models, clip):
    q = QNetwork(4, 8, hidden=8, stages=3)
    agent = DqnAgent(q, DqnConfig(dqn_batch=2, budget=8), seed=0)
    logs = run_episodes(agent, lambda ep: ClipEpisode(models, clip, 0.1, 8, seed=ep), 2)
    assert [l.episode for l in logs] == [0, 1] and len(agent.buffer) == 4
    assert logs[0].epsilon == pytest.approx(0.9)
    assert all(math.isfinite(l.mean_reward) for l in logs)


def test_toy_mdp_learns_quickly():
    torch.manual_seed(0)
    optimum = (3, 1)
    agent = DqnAgent(QNetwork(2, 4, hidden=8, stages=2), DqnConfig(budget=4, dqn_batch=8), seed=0)
    run_episodes(agent, lambda ep: ToyEpisode(2, optimum, length=1, hw=(8, 8), seed=ep), 300)
    hits = sum(agent.actions[agent.act(ToyEpisode(2, optimum, hw=(8, 8), seed=10**5 + e).reset(), 0.0)] == optimum
               for e in range(50))
    assert hits >= 45
