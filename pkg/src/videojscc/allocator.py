"""Bandwidth allocation as an MDP solved with deep Q-learning.

One state per GoP, one action per GoP (a split of the block budget over
the N frames), one episode per clip.
"""

from __future__ import annotations

import math
import random
from collections import deque
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .codec import code_gop, conditioning_snr, emulate_key
from .config import DqnConfig
from .layers import AnalysisTransform
from .metrics import frame_loss
from .models import JSCCModels
from .video import interpolation_schedule


# actions -------------------------------------------------------------------


def action_count(n: int, budget: int) -> int:
    """Number of ways to split ``budget`` blocks over ``n`` frames."""
    return math.comb(budget + n - 1, n - 1)


def enumerate_actions(n: int, budget: int) -> list[tuple[int, ...]]:
    """All compositions of ``budget`` into ``n`` non-negative parts, lexicographic."""
    if n < 1 or budget < 0:
        raise ValueError(f"need n >= 1 and budget >= 0, got n={n}, budget={budget}")
    if n == 1:
        return [(budget,)]
    return [(v,) + rest for v in range(budget + 1) for rest in enumerate_actions(n - 1, budget - v)]


def uniform_allocation(n: int, budget: int) -> tuple[int, ...]:
    """Even split; the remainder goes to the key frame (the last one)."""
    base, rem = divmod(budget, n)
    return (base,) * (n - 1) + (base + rem,)


def state_channels(n: int) -> int:
    return 21 * (n - 1) + 6


# state ---------------------------------------------------------------------


@dataclass
class AllocState:
    """Transmitter-side view of one GoP before allocation.

    ``frames`` are the N source frames; ``refs`` the N+1 emulated
    reconstructions under the uniform bootstrap; ``flows`` and ``residuals``
    come in schedule order as (prev, next) pairs. All are ``(3, H, W)``.
    """

    frames: torch.Tensor
    refs: torch.Tensor
    flows: list[torch.Tensor]
    residuals: list[torch.Tensor]
    est_noise_power: float

    @property
    def gop_size(self) -> int:
        return self.frames.shape[0]

    def stack(self) -> torch.Tensor:
        """Q-network input with ``21 (N - 1) + 6`` channels, scaled to about unit range."""
        n = self.gop_size
        parts = []
        for j, (i, t) in enumerate(interpolation_schedule(n)):
            parts += [
                self.frames[i - 1] / 255.0,
                self.refs[i - t] / 255.0,
                self.refs[i + t] / 255.0,
                self.residuals[2 * j] / 255.0,
                self.residuals[2 * j + 1] / 255.0,
                self.flows[2 * j],
                self.flows[2 * j + 1],
            ]
        parts += [self.frames[n - 1] / 255.0, self.refs[n] / 255.0]
        return torch.cat(parts, dim=0)


@torch.no_grad()
def build_state(
    models: JSCCModels,
    gop: torch.Tensor,
    prev_key_ref: torch.Tensor,
    est_noise_power: float,
    budget: int,
    generator: torch.Generator | None = None,
) -> AllocState:
    """Emulate the GoP ``(N, 3, H, W)`` at the uniform split to get the state."""
    n = gop.shape[0]
    alloc = torch.tensor(uniform_allocation(n, budget))
    res = code_gop(
        models, gop[None], None, alloc, est_noise_power, tx_ref0=prev_key_ref[None],
        tx_generator=generator, transmit=False,
    )
    return AllocState(
        frames=gop,
        refs=res.tx_refs[0],
        flows=[f[0] for f in res.flows],
        residuals=[r[0] for r in res.residuals],
        est_noise_power=float(est_noise_power),
    )


# Q-network -----------------------------------------------------------------


def action_features(actions: Sequence[Sequence[int]], budget: int) -> torch.Tensor:
    """Fixed per-frame basis of each action: ``(|A|, N * 4)``."""
    v = torch.tensor(actions, dtype=torch.float32) / max(budget, 1)
    feats = torch.stack([v, v**2, v.sqrt(), (v == 0).float()], dim=-1)
    return feats.reshape(len(actions), -1)


def concave_features(actions: Sequence[Sequence[int]], budget: int) -> torch.Tensor:
    """Per-frame ``(v/V, sqrt(v/V), -1[v=0])`` of each action: ``(|A|, N, 3)``."""
    v = torch.tensor(actions, dtype=torch.float32) / max(budget, 1)
    return torch.stack([v, v.sqrt(), -(v == 0).float()], dim=-1)


HEADS = ("factored", "dense", "concave")


class QNetwork(nn.Module):
    """Key-encoder style feature extractor, pooled, then one value per action.

    The ``"dense"`` head is a linear map to all actions. The ``"factored"``
    head predicts per-frame coefficients of a fixed action basis, which
    shares statistical strength across the actions. The ``"concave"`` head
    keeps those coefficients non-negative on a concave basis, so each
    frame's value is non-decreasing and concave in its block count.
    """

    def __init__(self, gop_size: int, budget: int, hidden: int = 32, stages: int = 4, head: str = "factored"):
        super().__init__()
        self.gop_size, self.budget = gop_size, budget
        self.actions = enumerate_actions(gop_size, budget)
        self.in_channels = state_channels(gop_size)
        self.features = AnalysisTransform(self.in_channels, hidden, hidden, stages)
        self.head_kind = head
        if head == "dense":
            self.head = nn.Linear(hidden, len(self.actions))
        elif head == "factored":
            phi = action_features(self.actions, budget)
            self.register_buffer("phi", phi)
            self.head = nn.Linear(hidden, phi.shape[1] + 1)
        elif head == "concave":
            self.register_buffer("phi", concave_features(self.actions, budget))
            self.head = nn.Linear(hidden, 3 * gop_size + 1)
        else:
            raise ValueError(f"unknown head {head!r}")

    @property
    def num_actions(self) -> int:
        return len(self.actions)

    def forward(self, x: torch.Tensor, snr_db: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} state channels, got {x.shape[1]}")
        g = torch.relu(self.features(x, snr_db)).mean(dim=(-2, -1))
        out = self.head(g)
        if self.head_kind == "dense":
            return out
        if self.head_kind == "concave":
            coef = nn.functional.softplus(out[:, :-1]).view(-1, self.gop_size, 3)
            return torch.einsum("anf,bnf->ba", self.phi, coef) + out[:, -1:]
        return out[:, :-1] @ self.phi.T + out[:, -1:]


def state_batch(states: Sequence[AllocState], power: float = 1.0) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.stack([s.stack() for s in states])
    snr = conditioning_snr(torch.tensor([s.est_noise_power for s in states]), power, len(states))
    return x, snr


def q_values(state: AllocState, qnet: QNetwork, power: float = 1.0) -> torch.Tensor:
    x, snr = state_batch([state], power)
    return qnet(x, snr)[0]


# policy --------------------------------------------------------------------


def select_action(qvals, eps: float, rng: np.random.Generator) -> int:
    """ε-greedy; ties go to the lowest index."""
    q = np.asarray(torch.as_tensor(qvals).detach().cpu(), dtype=np.float64).reshape(-1)
    if q.size == 0:
        raise ValueError("empty q-value vector")
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {eps}")
    if eps > 0 and rng.random() < eps:
        return int(rng.integers(q.size))
    return int(np.argmax(q))


def epsilon_schedule(episode: int, cfg: DqnConfig = DqnConfig()) -> float:
    if episode < 0:
        raise ValueError("episode must be non-negative")
    return cfg.eps_end + (cfg.eps0 - cfg.eps_end) * math.exp(-episode / cfg.eps_lambda)


# replay and learning -------------------------------------------------------


@dataclass
class Transition:
    state: AllocState
    action: int
    reward: float
    next_state: AllocState | None  # None at the end of an episode

    def __post_init__(self):
        if not math.isfinite(self.reward):
            raise ValueError(f"non-finite reward {self.reward}")


class ReplayBuffer:
    """FIFO ring with uniform sampling without replacement."""

    def __init__(self, capacity: int = 1000):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: deque[Transition] = deque(maxlen=capacity)

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def push(self, t: Transition) -> None:
        self._items.append(t)

    def sample(self, batch: int, rng: random.Random | np.random.Generator) -> list[Transition]:
        batch = min(batch, len(self._items))
        if isinstance(rng, np.random.Generator):
            idx = rng.choice(len(self._items), size=batch, replace=False)
        else:
            idx = rng.sample(range(len(self._items)), batch)
        return [self._items[int(i)] for i in idx]


def dqn_loss(batch: Sequence[Transition], qnet: QNetwork, target: QNetwork, gamma: float, power: float = 1.0):
    """Mean squared TD error; the bootstrap target carries no gradient."""
    if not batch:
        raise ValueError("empty transition batch")
    x, snr = state_batch([t.state for t in batch], power)
    q = qnet(x, snr).gather(1, torch.tensor([[t.action] for t in batch]))[:, 0]
    reward = torch.tensor([t.reward for t in batch], dtype=q.dtype)
    live = [j for j, t in enumerate(batch) if t.next_state is not None]
    boot = torch.zeros_like(q)
    if live:
        with torch.no_grad():
            nx, nsnr = state_batch([batch[j].next_state for j in live], power)
            boot[live] = target(nx, nsnr).max(dim=1).values
    y = reward + gamma * boot
    return ((y.detach() - q) ** 2).mean()


@torch.no_grad()
def soft_update(online: nn.Module, target: nn.Module, tau: float) -> nn.Module:
    """``target <- tau * online + (1 - tau) * target`` on every parameter and buffer."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    src, dst = online.state_dict(), target.state_dict()
    if src.keys() != dst.keys():
        raise ValueError("parameter sets differ")
    for name, p in dst.items():
        q = src[name]
        if p.shape != q.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(q.shape)} vs {tuple(p.shape)}")
        if not p.is_floating_point():
            p.copy_(q)
        elif tau == 1.0:
            p.copy_(q)
        elif tau != 0.0:
            p.mul_(1.0 - tau).add_(q, alpha=tau)
    return target


def reward_from_loss(mean_loss: float) -> float:
    if mean_loss <= 0:
        raise ValueError("loss must be positive for a log reward")
    return -math.log10(mean_loss)


# environment ---------------------------------------------------------------


@dataclass
class StepResult:
    reward: float
    next_key_tx: torch.Tensor
    next_key_rx: torch.Tensor
    recon: torch.Tensor


@torch.no_grad()
def step_env(
    models: JSCCModels,
    gop: torch.Tensor,
    action: Sequence[int],
    rx_ref0: torch.Tensor,
    tx_ref0: torch.Tensor,
    noise_power: float,
    est_noise_power: float,
    metric: str = "psnr",
    rx_generator: torch.Generator | None = None,
    tx_generator: torch.Generator | None = None,
) -> StepResult:
    """Send one GoP with ``action`` blocks per frame and score it.

    Returns the reward, the transmitter's estimate of the new key frame under
    this action (the next state's reference) and the receiver's frames.
    """
    alloc = torch.tensor(action)
    if alloc.numel() != gop.shape[0]:
        raise ValueError(f"action has {alloc.numel()} entries for a GoP of {gop.shape[0]}")
    res = code_gop(
        models, gop[None], rx_ref0[None], alloc, noise_power, est_noise_power, tx_ref0[None],
        rx_generator=rx_generator, tx_generator=tx_generator,
    )
    recon = res.recon[0]
    loss_fn = frame_loss(metric)
    mean_loss = float(np.mean([float(loss_fn(gop[i], recon[i])) for i in range(gop.shape[0])]))
    return StepResult(reward_from_loss(mean_loss), res.tx_refs[0, -1], recon[-1], recon)


@torch.no_grad()
def send_bootstrap(models: JSCCModels, frame, noise_power, est_noise_power, rx_generator=None, tx_generator=None):
    """Full-bandwidth key-frame coding of a clip's first frame: ``(rx, tx)`` reconstructions."""
    cfg = models.config
    x = frame[None]
    snr = conditioning_snr(est_noise_power, cfg.power, 1)
    z = models.encode_key(x, snr)
    rx = emulate_key(models, x, cfg.block_count, noise_power, snr, rx_generator, z=z)
    tx = emulate_key(models, x, cfg.block_count, est_noise_power, snr, tx_generator, z=z)
    return rx[0], tx[0]


# agent ---------------------------------------------------------------------


class DqnAgent:
    """Online network, target network, replay buffer and optimizer."""

    def __init__(self, qnet: QNetwork, cfg: DqnConfig = DqnConfig(), power: float = 1.0, seed: int = 0):
        self.cfg, self.power = cfg, power
        self.qnet = qnet
        self.target = _clone(qnet)
        self.buffer = ReplayBuffer(cfg.replay_capacity)
        self.optimizer = torch.optim.Adam(self.qnet.parameters(), lr=cfg.lr)
        self.rng = np.random.default_rng(seed)
        self.actions = qnet.actions

    def act(self, state: AllocState, eps: float) -> int:
        with torch.no_grad():
            return select_action(q_values(state, self.qnet, self.power), eps, self.rng)

    def learn(self) -> float | None:
        if len(self.buffer) < self.cfg.dqn_batch:
            return None
        batch = self.buffer.sample(self.cfg.dqn_batch, self.rng)
        loss = dqn_loss(batch, self.qnet, self.target, self.cfg.gamma, self.power)
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        soft_update(self.qnet, self.target, self.cfg.tau)
        return loss.item()


def _clone(net: QNetwork) -> QNetwork:
    import copy

    twin = copy.deepcopy(net)
    for p in twin.parameters():
        p.requires_grad_(False)
    return twin


@dataclass
class EpisodeLog:
    episode: int
    epsilon: float
    mean_reward: float
    loss: float


def run_episodes(
    agent: DqnAgent,
    env_factory: Callable[[int], "Episode"],
    episodes: int,
    start_episode: int = 0,
    on_episode: Callable[[EpisodeLog], None] | None = None,
) -> list[EpisodeLog]:
    """Generic ε-greedy DQN loop over episodes from ``env_factory(episode)``."""
    logs = []
    for ep in range(start_episode, start_episode + episodes):
        eps = epsilon_schedule(ep, agent.cfg)
        env = env_factory(ep)
        state = env.reset()
        rewards, losses = [], []
        while state is not None:
            a = agent.act(state, eps)
            reward, next_state = env.step(agent.actions[a])
            agent.buffer.push(Transition(state, a, reward, next_state))
            loss = agent.learn()
            rewards.append(reward)
            if loss is not None:
                losses.append(loss)
            state = next_state
        log = EpisodeLog(ep, eps, float(np.mean(rewards)), float(np.mean(losses)) if losses else float("nan"))
        logs.append(log)
        if on_episode is not None:
            on_episode(log)
    return logs


class Episode:
    """Interface: ``reset() -> state``; ``step(action) -> (reward, next_state or None)``."""

    def reset(self) -> AllocState | None:
        raise NotImplementedError

    def step(self, action: Sequence[int]) -> tuple[float, AllocState | None]:
        raise NotImplementedError


class ClipEpisode(Episode):
    """One clip through the real codec: bootstrap frame at full bandwidth, then one step per GoP."""

    def __init__(self, models: JSCCModels, clip, noise_power: float, budget: int, metric: str = "psnr", seed: int = 0,
                 est_noise_power: float | None = None):
        self.models, self.budget, self.metric = models, budget, metric
        self.noise_power = noise_power
        self.est_noise_power = noise_power if est_noise_power is None else est_noise_power
        self.frames = torch.from_numpy(np.ascontiguousarray(clip.frames)).permute(0, 3, 1, 2)
        self.n = clip.gop_size
        self.num_gops = clip.num_gops
        self.rx_gen = torch.Generator().manual_seed(2 * seed)
        self.tx_gen = torch.Generator().manual_seed(2 * seed + 1)
        self.recon: list[torch.Tensor] = []

    def _gop(self, g: int) -> torch.Tensor:
        return self.frames[1 + g * self.n : 1 + (g + 1) * self.n]

    def _state(self) -> AllocState:
        return build_state(self.models, self._gop(self.g), self.tx_ref, self.est_noise_power, self.budget, self.tx_gen)

    def reset(self) -> AllocState:
        self.g = 0
        self.rx_ref, self.tx_ref = send_bootstrap(
            self.models, self.frames[0], self.noise_power, self.est_noise_power, self.rx_gen, self.tx_gen
        )
        self.recon = [self.rx_ref]
        self.state = self._state()
        return self.state

    def step(self, action):
        out = step_env(
            self.models, self._gop(self.g), action, self.rx_ref, self.tx_ref, self.noise_power,
            self.est_noise_power, self.metric, self.rx_gen, self.tx_gen,
        )
        self.recon.extend(out.recon)
        self.rx_ref, self.tx_ref = out.next_key_rx, out.next_key_tx
        self.g += 1
        if self.g >= self.num_gops:
            return out.reward, None
        self.state = self._state()
        return out.reward, self.state


class ToyEpisode(Episode):
    """Synthetic allocation task whose best action is ``optimum`` for every state.

    States are random tensors with the right channel layout; the reward is
    a negative scaled squared distance to ``optimum``.
    """

    def __init__(self, gop_size: int, optimum: Sequence[int], length: int = 2, hw=(16, 16), seed: int = 0,
                 scale: float = 0.25, noise: float = 0.0):
        self.n, self.optimum = gop_size, torch.tensor(optimum, dtype=torch.float32)
        self.length, self.hw, self.scale, self.noise = length, hw, scale, noise
        self.gen = torch.Generator().manual_seed(seed)

    def _state(self) -> AllocState:
        h, w = self.hw
        n = self.n
        r = lambda c: torch.rand(c, 3, h, w, generator=self.gen)
        return AllocState(
            frames=255 * r(n), refs=255 * r(n + 1),
            flows=list(r(2 * (n - 1)) - 0.5), residuals=list(255 * r(2 * (n - 1)) - 127.5),
            est_noise_power=float(torch.rand(1, generator=self.gen)) + 0.05,
        )

    def reset(self):
        self.t = 0
        return self._state()

    def step(self, action):
        v = torch.tensor(action, dtype=torch.float32)
        reward = -self.scale * float(((v - self.optimum) ** 2).sum())
        if self.noise:
            reward += self.noise * float(torch.randn(1, generator=self.gen))
        self.t += 1
        return reward, (self._state() if self.t < self.length else None)
