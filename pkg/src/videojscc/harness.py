"""Two-phase training, evaluation sweeps, checkpoints and run artifacts."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .allocator import (
    ClipEpisode,
    DqnAgent,
    EpisodeLog,
    QNetwork,
    build_state,
    q_values,
    run_episodes,
    select_action,
    send_bootstrap,
    step_env,
    uniform_allocation,
)
from .channel import noise_power_for_snr
from .codec import training_gop
from .config import CodecConfig, DqnConfig, ExperimentConfig, TrainConfig
from .metrics import METRICS, frame_loss, frame_metric, params_for_size
from .models import JSCCModels
from .video import VideoSequence

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = "videojscc-ckpt-1"
POLICIES = ("learned", "uniform", "full")


class DivergenceError(RuntimeError):
    def __init__(self, step: int, batch_seed: int, loss: float):
        super().__init__(f"non-finite training loss {loss} at step {step} (batch seed {batch_seed})")
        self.step, self.batch_seed, self.loss = step, batch_seed, loss


# data ----------------------------------------------------------------------


def clip_tensor(clip: VideoSequence) -> torch.Tensor:
    """``(F, 3, H, W)`` float tensor view of a clip."""
    return torch.from_numpy(np.ascontiguousarray(clip.frames)).permute(0, 3, 1, 2).contiguous()


def sample_windows(clips: Sequence[VideoSequence], batch: int, crop_hw, rng: np.random.Generator) -> torch.Tensor:
    """Random ``(B, N + 1, 3, h, w)`` windows: a key-frame reference followed by one GoP."""
    out = []
    for _ in range(batch):
        clip = clips[int(rng.integers(len(clips)))]
        n = clip.gop_size
        g = int(rng.integers(clip.num_gops))
        h, w = clip.shape
        ch, cw = crop_hw
        top, left = int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1))
        frames = clip.frames[g * n : g * n + n + 1, top : top + ch, left : left + cw]
        out.append(torch.from_numpy(np.ascontiguousarray(frames)).permute(0, 3, 1, 2))
    return torch.stack(out)


def all_windows(clips: Sequence[VideoSequence]) -> torch.Tensor:
    """Every GoP window of every clip, uncropped, in order."""
    out = []
    for clip in clips:
        frames = clip_tensor(clip)
        n = clip.gop_size
        out += [frames[g * n : g * n + n + 1] for g in range(clip.num_gops)]
    return torch.stack(out)


def loss_for(metric: str, hw) -> Callable:
    return frame_loss(metric, params_for_size(*hw)) if metric == "ms-ssim" else frame_loss(metric)


def metric_for(metric: str, hw) -> Callable:
    return frame_metric(metric, params_for_size(*hw)) if metric == "ms-ssim" else frame_metric(metric)


# JSCC phase ----------------------------------------------------------------


class PlateauSchedule:
    """Validation-driven lr decay and early stopping."""

    def __init__(self, lr: float, decay: float = 0.8, lr_patience: int = 4, patience: int = 8):
        self.lr, self.decay = lr, decay
        self.lr_patience, self.patience = lr_patience, patience
        self.best = math.inf
        self.bad = 0
        self.stopped = False

    def update(self, val_loss: float) -> float:
        if val_loss < self.best:
            self.best, self.bad = val_loss, 0
        else:
            self.bad += 1
            if self.bad % self.lr_patience == 0:
                self.lr *= self.decay
            if self.bad >= self.patience:
                self.stopped = True
        return self.lr


def warmup_factor(step: int, cfg: TrainConfig) -> float:
    """Multiplier on ``cfg.lr`` from the optional hold-then-ramp schedule."""
    if cfg.peak_lr is None or step < cfg.warmup_hold:
        return 1.0
    frac = min(1.0, (step - cfg.warmup_hold) / max(cfg.ramp_steps, 1))
    return (cfg.peak_lr / cfg.lr) ** frac


@dataclass
class TrainHistory:
    step_loss: list[float] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    stopped_early: bool = False
    elapsed_s: float = 0.0


def _batch_channel(cfg: TrainConfig, rng: np.random.Generator, power: float) -> float:
    if cfg.noiseless:
        return 0.0
    lo, hi = cfg.snr_train_range_db
    return noise_power_for_snr(power, float(rng.uniform(lo, hi)))


def _batch_alloc(cfg: TrainConfig, codec: CodecConfig, batch: int, rng: np.random.Generator):
    if cfg.fixed_blocks:
        return cfg.fixed_blocks
    return torch.from_numpy(rng.integers(1, codec.block_count + 1, size=(batch, codec.gop_size + 1)))


def _window_loss(models, window, alloc, noise_power, loss_fn, generator, detach_refs):
    recon = training_gop(models, window, alloc, noise_power, generator, detach_refs=detach_refs)
    return loss_fn(window, recon).mean()


@torch.no_grad()
def validation_loss(models: JSCCModels, clips, cfg: TrainConfig, seed: int = 12345) -> float:
    """Mean frame loss on a fixed set of windows, SNRs and block counts."""
    if not clips:
        return math.nan
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    loss_fn = loss_for(cfg.metric, cfg.crop_hw)
    vals = []
    for _ in range(cfg.val_windows):
        window = sample_windows(clips, 1, cfg.crop_hw, rng)
        noise = _batch_channel(cfg, rng, models.config.power)
        alloc = _batch_alloc(cfg, models.config, 1, rng)
        vals.append(float(_window_loss(models, window, alloc, noise, loss_fn, gen, True)))
    return float(np.mean(vals))


def train_jscc(
    models: JSCCModels,
    train_clips: Sequence[VideoSequence],
    val_clips: Sequence[VideoSequence],
    cfg: TrainConfig,
    on_step: Callable[[int, float], None] | None = None,
    max_steps: int | None = None,
) -> TrainHistory:
    """Adam on the mean frame loss of random windows, SNRs and block counts.

    One SNR per batch with a perfect noise estimate; one block count per
    frame drawn from 1..V (or ``cfg.fixed_blocks``). Stops on patience, on
    ``max_epochs``, on ``max_steps``, on the time budget, or when
    ``on_step(step, loss)`` returns True.
    """
    if cfg.metric not in METRICS:
        raise ValueError(f"unknown metric {cfg.metric!r}")
    torch.manual_seed(cfg.seed)
    opt = torch.optim.Adam(models.parameters(), lr=cfg.lr)
    plateau = PlateauSchedule(cfg.lr, cfg.lr_decay, cfg.lr_patience, cfg.patience)
    loss_fn = loss_for(cfg.metric, cfg.crop_hw)
    hist = TrainHistory()
    start = time.monotonic()
    step = 0
    for epoch in range(cfg.max_epochs):
        models.train()
        epoch_losses = []
        for _ in range(cfg.steps_per_epoch):
            batch_seed = cfg.seed * 1_000_003 + step
            rng = np.random.default_rng(batch_seed)
            gen = torch.Generator().manual_seed(batch_seed)
            if cfg.full_batch:
                window = all_windows(train_clips)
            else:
                window = sample_windows(train_clips, cfg.jscc_batch, cfg.crop_hw, rng)
            noise = _batch_channel(cfg, rng, models.config.power)
            alloc = _batch_alloc(cfg, models.config, window.shape[0], rng)
            for g in opt.param_groups:
                g["lr"] = plateau.lr * warmup_factor(step, cfg)
            loss = _window_loss(models, window, alloc, noise, loss_fn, gen, cfg.detach_refs)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(step, batch_seed, value)
            opt.zero_grad()
            loss.backward()
            opt.step()
            hist.step_loss.append(value)
            epoch_losses.append(value)
            step += 1
            if on_step is not None and on_step(step - 1, value):
                hist.stopped_early = True
                break
            if _out_of_budget(cfg, start, step, max_steps):
                break
        models.eval()
        val = validation_loss(models, val_clips, cfg)
        lr_next = plateau.update(val) if math.isfinite(val) else plateau.lr
        lr_now = lr_next * warmup_factor(step, cfg)
        hist.epochs.append(dict(epoch=epoch, train_loss=float(np.mean(epoch_losses)), val_loss=val, lr=lr_now))
        logger.info("epoch %d train %.4g val %.4g lr %.3g", epoch, hist.epochs[-1]["train_loss"], val, lr_now)
        if plateau.stopped or hist.stopped_early:
            hist.stopped_early = True
            break
        if _out_of_budget(cfg, start, step, max_steps):
            break
    models.eval()
    hist.elapsed_s = time.monotonic() - start
    return hist


def _out_of_budget(cfg: TrainConfig, start: float, step: int, max_steps: int | None) -> bool:
    if max_steps is not None and step >= max_steps:
        return True
    return cfg.time_budget_s is not None and time.monotonic() - start > cfg.time_budget_s


# allocator phase -----------------------------------------------------------


def freeze(models: JSCCModels) -> JSCCModels:
    models.eval()
    for p in models.parameters():
        p.requires_grad_(False)
    return models


def check_budget(codec: CodecConfig, budget: int) -> None:
    if not 0 < budget <= codec.block_count:
        raise ValueError(f"GoP budget {budget} must lie in 1..{codec.block_count} (blocks per frame)")


def make_qnet(codec: CodecConfig, dqn: DqnConfig, budget: int | None = None) -> QNetwork:
    budget = dqn.budget if budget is None else budget
    check_budget(codec, budget)
    return QNetwork(codec.gop_size, budget, dqn.hidden, codec.stages, dqn.head)


def train_allocator(
    models: JSCCModels,
    train_clips: Sequence[VideoSequence],
    cfg: ExperimentConfig,
    episodes: int | None = None,
    seed: int | None = None,
    qnet: QNetwork | None = None,
    log_path=None,
) -> tuple[DqnAgent, list[EpisodeLog]]:
    """DQN over training clips with the JSCC networks frozen.

    Each episode is one clip at one SNR drawn from the training range, with
    a perfect noise estimate. With ``cfg.alloc_episode_gops`` set, the clip is
    a random window of that many GoPs.
    """
    span = cfg.alloc_episode_gops
    if span < 0:
        raise ValueError("alloc_episode_gops must be non-negative")
    freeze(models)
    seed = cfg.train.seed if seed is None else seed
    episodes = cfg.alloc_episodes if episodes is None else episodes
    torch.manual_seed(seed)
    qnet = make_qnet(cfg.codec, cfg.dqn) if qnet is None else qnet
    agent = DqnAgent(qnet, cfg.dqn, cfg.codec.power, seed)
    lo, hi = cfg.train.snr_train_range_db
    metric = cfg.train.metric

    def factory(ep: int):
        rng = np.random.default_rng(seed * 7919 + ep)
        clip = train_clips[ep % len(train_clips)]
        if clip.shape != tuple(cfg.train.crop_hw):
            clip = clip.random_crop(cfg.train.crop_hw, rng)
        if 0 < span < clip.num_gops:
            clip = clip.window(int(rng.integers(clip.num_gops - span + 1)), span)
        noise = noise_power_for_snr(cfg.codec.power, float(rng.uniform(lo, hi)))
        return ClipEpisode(models, clip, noise, qnet.budget, metric, seed=seed * 7919 + ep)

    writer = TrainingLog(log_path) if log_path else None
    logs = run_episodes(agent, factory, episodes, on_episode=writer.write if writer else None)
    if writer:
        writer.close()
    return agent, logs


class TrainingLog:
    """Per-episode CSV: ``episode,epsilon,mean_reward,loss``."""

    HEADER = ("episode", "epsilon", "mean_reward", "loss")

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", newline="")
        self._csv = csv.writer(self._fh, lineterminator="\n")
        self._csv.writerow(self.HEADER)

    def write(self, log: EpisodeLog):
        self._csv.writerow([log.episode, f"{log.epsilon:.6f}", f"{log.mean_reward:.6f}", f"{log.loss:.6g}"])
        self._fh.flush()

    def close(self):
        self._fh.close()


# full-sequence transmission -----------------------------------------------


@dataclass
class ClipResult:
    recon: torch.Tensor  # (F, 3, H, W), frame 0 included
    rewards: list[float]
    actions: list[tuple[int, ...]]


@torch.no_grad()
def transmit_clip(
    models: JSCCModels,
    clip: VideoSequence,
    noise_power: float,
    est_noise_power: float,
    budget: int,
    policy: str = "uniform",
    qnet: QNetwork | None = None,
    metric: str = "psnr",
    seed: int = 0,
) -> ClipResult:
    """Send a whole clip: first frame at full bandwidth, then GoP by GoP.

    The receiver noise and the transmitter's emulation noise use separate
    seeded streams, so runs are reproducible and policies see the same
    channel draws for the same seed.
    """
    if policy not in POLICIES:
        raise ValueError(f"policy must be one of {POLICIES}")
    if policy == "learned" and qnet is None:
        raise ValueError("learned policy needs a trained Q-network")
    frames = clip_tensor(clip)
    n = clip.gop_size
    rx_gen = torch.Generator().manual_seed(2 * seed)
    tx_gen = torch.Generator().manual_seed(2 * seed + 1)
    state_gen = torch.Generator().manual_seed(2 * seed + 10**9)
    rx_ref, tx_ref = send_bootstrap(models, frames[0], noise_power, est_noise_power, rx_gen, tx_gen)
    recon, rewards, actions = [rx_ref], [], []
    for g in range(clip.num_gops):
        gop = frames[1 + g * n : 1 + (g + 1) * n]
        if policy == "learned":
            state = build_state(models, gop, tx_ref, est_noise_power, budget, state_gen)
            a = qnet.actions[select_action(q_values(state, qnet, models.config.power), 0.0, np.random.default_rng(0))]
        elif policy == "full":
            a = (models.config.block_count,) * n  # every frame at full bandwidth (not a budget split)
        else:
            a = uniform_allocation(n, budget)
        out = step_env(models, gop, a, rx_ref, tx_ref, noise_power, est_noise_power, metric, rx_gen, tx_gen)
        recon.extend(out.recon)
        rewards.append(out.reward)
        actions.append(tuple(a))
        rx_ref, tx_ref = out.next_key_rx, out.next_key_tx
    return ClipResult(torch.stack(recon), rewards, actions)


# evaluation ----------------------------------------------------------------


@dataclass(frozen=True)
class EvalRecord:
    snr_test: float
    snr_est: float
    policy: str
    metric: str
    mean: float
    std: float

    def __post_init__(self):
        if self.std < 0:
            raise ValueError("std must be non-negative")
        if self.metric == "ms-ssim" and not 0.0 <= self.mean <= 1.0:
            raise ValueError("MS-SSIM mean outside [0, 1]")

    def sort_key(self):
        return (self.metric, self.policy, self.snr_est, self.snr_test)


@dataclass
class SweepResult:
    records: list[EvalRecord]
    rewards: dict[tuple[float, str], list[float]]  # (snr_test, policy) -> per-clip mean reward


def resolve_snr_est(mode, snr_test: float) -> float:
    if mode == "matched":
        return snr_test
    return float(mode)


def evaluate_sweep(
    models: JSCCModels,
    clips: Sequence[VideoSequence],
    snr_grid: Sequence[float],
    snr_est="matched",
    policies: Sequence[str] = ("uniform",),
    qnet: QNetwork | None = None,
    budget: int = 20,
    reward_metric: str = "psnr",
    seed: int = 0,
    metrics: Sequence[str] = METRICS,
) -> SweepResult:
    """Per (SNR, policy): mean and std over clips of each sequence metric.

    Clip ``c`` uses seed ``seed + c`` at every grid point (common random
    numbers), so trends across SNR are not blurred by fresh noise draws.
    """
    if not clips:
        raise ValueError("no clips to evaluate")
    check_budget(models.config, budget)
    freeze(models)
    recs, rewards = [], {}
    power = models.config.power
    for snr in snr_grid:
        est_db = resolve_snr_est(snr_est, float(snr))
        noise = noise_power_for_snr(power, float(snr))
        est_noise = noise_power_for_snr(power, est_db)
        for policy in policies:
            per_metric = {m: [] for m in metrics}
            clip_rewards = []
            for c, clip in enumerate(clips):
                res = transmit_clip(models, clip, noise, est_noise, budget, policy, qnet, reward_metric, seed + c)
                frames = clip_tensor(clip)
                for m in metrics:
                    fn = metric_for(m, clip.shape)
                    per_metric[m].append(float(torch.stack([fn(a, b) for a, b in zip(frames, res.recon)]).mean()))
                clip_rewards.append(float(np.mean(res.rewards)))
            rewards[(float(snr), policy)] = clip_rewards
            for m in metrics:
                v = np.asarray(per_metric[m])
                recs.append(EvalRecord(float(snr), est_db, policy, m, float(v.mean()), float(v.std())))
    return SweepResult(sorted(recs, key=EvalRecord.sort_key), rewards)


CSV_HEADER = ("snr_test", "snr_est", "policy", "metric", "mean", "std")


def records_csv(records: Sequence[EvalRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in sorted(records, key=EvalRecord.sort_key):
        w.writerow([f"{r.snr_test:g}", f"{r.snr_est:g}", r.policy, r.metric, f"{r.mean:.6f}", f"{r.std:.6f}"])
    return buf.getvalue()


def read_records(path) -> list[EvalRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        EvalRecord(float(r["snr_test"]), float(r["snr_est"]), r["policy"], r["metric"], float(r["mean"]), float(r["std"]))
        for r in rows
    ]


def emit_outputs(records: Sequence[EvalRecord], out_dir, name: str = "results", plots: bool = True) -> list[Path]:
    """Write the CSV and one mean±std plot per metric; returns the written paths."""
    if not records:
        raise ValueError("no records to write")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{name}.csv"
    csv_path.write_text(records_csv(records))
    written = [csv_path]
    if plots:
        written += _plot(records, out, name)
    return written


def _plot(records, out: Path, name: str) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    for metric in sorted({r.metric for r in records}):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        groups = sorted({(r.policy, r.snr_est if r.snr_est != r.snr_test else None) for r in records if r.metric == metric},
                        key=lambda g: (g[0], -math.inf if g[1] is None else g[1]))
        for policy, est in groups:
            rows = sorted(
                (r for r in records if r.metric == metric and r.policy == policy
                 and (r.snr_est == r.snr_test if est is None else r.snr_est == est)),
                key=lambda r: r.snr_test,
            )
            label = f"{policy}, " + ("matched" if est is None else f"est {est:g} dB")
            ax.errorbar([r.snr_test for r in rows], [r.mean for r in rows], yerr=[r.std for r in rows],
                        label=label, capsize=2, marker=".")
        ax.set_xlabel("SNR (dB)")
        ax.set_ylabel("PSNR (dB)" if metric == "psnr" else "MS-SSIM")
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out / f"{name}_{metric}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths


# checkpoints ---------------------------------------------------------------


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, kind: str, module: torch.nn.Module, config=None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": dataclasses.asdict(config) if dataclasses.is_dataclass(config) else config,
        "state": {k: v.detach().clone() for k, v in module.state_dict().items()},
        "extra": extra or {},
    }
    # serialise in memory: the archive then carries no file-name record
    buf = io.BytesIO()
    torch.save(payload, buf)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path, kind: str | None = None) -> dict:
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:  # torch raises several types on damaged archives
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "version" not in payload:
        raise CheckpointError(f"{path} is not a checkpoint")
    if payload["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {payload['version']!r}, expected {CHECKPOINT_VERSION!r}")
    if kind is not None and payload["kind"] != kind:
        raise CheckpointError(f"checkpoint holds {payload['kind']!r}, expected {kind!r}")
    return payload


def load_models(path) -> JSCCModels:
    payload = load_checkpoint(path, "jscc")
    models = JSCCModels(CodecConfig(**payload["config"]))
    models.load_state_dict(payload["state"])
    return freeze(models)


def load_qnet(path) -> QNetwork:
    payload = load_checkpoint(path, "allocator")
    cfg = payload["config"]
    qnet = QNetwork(cfg["gop_size"], cfg["budget"], cfg["hidden"], cfg["stages"], cfg["head"])
    qnet.load_state_dict(payload["state"])
    qnet.eval()
    return qnet


def qnet_config(qnet: QNetwork) -> dict:
    return dict(
        gop_size=qnet.gop_size, budget=qnet.budget, hidden=qnet.features.head.out_channels,
        stages=len(qnet.features.convs), head=qnet.head_kind,
    )


def parameter_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def snr_grid(lo: float, hi: float, step: float) -> list[float]:
    if step <= 0 or hi < lo:
        raise ValueError("SNR grid needs step > 0 and max >= min")
    count = int(math.floor((hi - lo) / step + 1e-9)) + 1
    return [round(lo + i * step, 10) for i in range(count)]



# trend probes --------------------------------------------------------------


@torch.no_grad()
def refinement_curve(
    models: JSCCModels, clips: Sequence[VideoSequence], snr_db: float, metric: str = "psnr", seed: int = 0
) -> list[float]:
    """Mean frame loss on every GoP window of ``clips`` at each active-block count 1..V.

    Every count reuses the same noise seed so the curve reflects the code,
    not fresh channel draws.
    """
    freeze(models)
    windows = all_windows(clips)
    noise = noise_power_for_snr(models.config.power, snr_db)
    loss_fn = loss_for(metric, tuple(windows.shape[-2:]))
    curve = []
    for v in range(1, models.config.block_count + 1):
        gen = torch.Generator().manual_seed(seed)
        curve.append(float(_window_loss(models, windows, v, noise, loss_fn, gen, True)))
    return curve


def pairwise_violations(curve: Sequence[float]) -> tuple[int, int]:
    """Pairs ``v < v'`` where more blocks gave strictly higher distortion, out of all pairs."""
    n = len(curve)
    bad = sum(curve[j] > curve[i] for i in range(n) for j in range(i + 1, n))
    return bad, n * (n - 1) // 2
