"""Experiment configuration: dataclasses plus a flat ``key=value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

# allocator budget (blocks per GoP) for each bandwidth-ratio preset
RHO_PRESETS = {0.031: 20, 0.018: 12}


@dataclass
class CodecConfig:
    latent_channels: int = 190
    hidden: int = 64
    downsample_factor: int = 16
    gop_size: int = 4
    block_count: int = 20
    ssf_hidden: int = 32
    ssf_sigma0: float = 1.5
    ssf_levels: int = 5
    power: float = 1.0

    def __post_init__(self):
        d = self.downsample_factor
        if d < 2 or d & (d - 1):
            raise ValueError("downsample_factor must be a power of 2")

    @property
    def stages(self) -> int:
        return self.downsample_factor.bit_length() - 1

    def latent_grid(self, height: int, width: int) -> tuple[int, int]:
        d = self.downsample_factor
        if height % d or width % d:
            raise ValueError(f"frame {height}x{width} not divisible by downsample factor {d}")
        return height // d, width // d

    def symbols_per_frame(self, height: int, width: int) -> int:
        gh, gw = self.latent_grid(height, width)
        reals = gh * gw * self.latent_channels
        if reals % 2:
            raise ValueError("latent has an odd number of reals")
        k = reals // 2
        if k % self.block_count:
            raise ValueError(f"k={k} not divisible by V={self.block_count}")
        return k

    def bandwidth_ratio(self, height: int, width: int, budget: int | None = None) -> float:
        """Channel uses per GoP over source dimensions, with ``budget`` of V blocks sent."""
        budget = self.block_count if budget is None else budget
        k = self.symbols_per_frame(height, width)
        return k * budget / self.block_count / (3 * height * width * self.gop_size)


@dataclass
class DqnConfig:
    gamma: float = 0.99
    tau: float = 0.005
    eps0: float = 0.9
    eps_end: float = 0.05
    eps_lambda: float = 1000.0
    replay_capacity: int = 1000
    dqn_batch: int = 8
    lr: float = 1e-3
    budget: int = 20
    hidden: int = 32
    head: str = "factored"

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0 <= self.tau <= 1:
            raise ValueError("tau must lie in [0, 1]")
        if self.eps_end > self.eps0:
            raise ValueError("eps_end must not exceed eps0")
        if self.head not in ("factored", "dense", "concave"):
            raise ValueError("head must be 'factored', 'dense' or 'concave'")


@dataclass
class TrainConfig:
    lr: float = 1e-5
    jscc_batch: int = 4
    patience: int = 8
    lr_patience: int = 4
    lr_decay: float = 0.8
    max_epochs: int = 100
    steps_per_epoch: int = 50
    snr_train_range_db: tuple[float, float] = (-5.0, 20.0)
    metric: str = "psnr"
    crop_hw: tuple[int, int] = (64, 64)
    seed: int = 0
    time_budget_s: float | None = None
    # optional desk-scale speed-up: hold ``lr`` for ``warmup_hold`` steps, then
    # ramp geometrically to ``peak_lr`` over ``ramp_steps``
    peak_lr: float | None = None
    warmup_hold: int = 100
    ramp_steps: int = 100
    val_windows: int = 8
    noiseless: bool = False
    fixed_blocks: int = 0
    detach_refs: bool = True
    # use every GoP window of every training clip as one deterministic batch
    full_batch: bool = False

    def __post_init__(self):
        lo, hi = self.snr_train_range_db
        if not lo < hi:
            raise ValueError("SNR training range must be non-degenerate")
        if self.lr <= 0 or self.jscc_batch <= 0 or self.patience <= 0:
            raise ValueError("lr, batch and patience must be positive")


@dataclass
class ExperimentConfig:
    codec: CodecConfig = field(default_factory=CodecConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dqn: DqnConfig = field(default_factory=DqnConfig)
    split_seed: int = 0
    snr_eval_grid_db: tuple[float, ...] = tuple(float(s) for s in range(-5, 21))
    manifest: str = ""
    alloc_episodes: int = 200
    # GoPs per allocator episode, a window of a training clip; 0 = the whole clip
    alloc_episode_gops: int = 0


# flat key -> (section, field)
_KEYS = {
    "gop_size": ("codec", "gop_size"),
    "block_count": ("codec", "block_count"),
    "latent_channels": ("codec", "latent_channels"),
    "hidden": ("codec", "hidden"),
    "downsample_factor": ("codec", "downsample_factor"),
    "ssf_hidden": ("codec", "ssf_hidden"),
    "ssf_sigma0": ("codec", "ssf_sigma0"),
    "ssf_levels": ("codec", "ssf_levels"),
    "power": ("codec", "power"),
    "lr": ("train", "lr"),
    "jscc_batch": ("train", "jscc_batch"),
    "patience": ("train", "patience"),
    "lr_patience": ("train", "lr_patience"),
    "lr_decay": ("train", "lr_decay"),
    "max_epochs": ("train", "max_epochs"),
    "steps_per_epoch": ("train", "steps_per_epoch"),
    "snr_train_range_db": ("train", "snr_train_range_db"),
    "metric": ("train", "metric"),
    "crop_hw": ("train", "crop_hw"),
    "seed": ("train", "seed"),
    "time_budget_s": ("train", "time_budget_s"),
    "peak_lr": ("train", "peak_lr"),
    "warmup_hold": ("train", "warmup_hold"),
    "ramp_steps": ("train", "ramp_steps"),
    "val_windows": ("train", "val_windows"),
    "noiseless": ("train", "noiseless"),
    "fixed_blocks": ("train", "fixed_blocks"),
    "detach_refs": ("train", "detach_refs"),
    "full_batch": ("train", "full_batch"),
    "gamma": ("dqn", "gamma"),
    "tau": ("dqn", "tau"),
    "eps0": ("dqn", "eps0"),
    "eps_end": ("dqn", "eps_end"),
    "eps_lambda": ("dqn", "eps_lambda"),
    "replay_capacity": ("dqn", "replay_capacity"),
    "dqn_batch": ("dqn", "dqn_batch"),
    "dqn_lr": ("dqn", "lr"),
    "budget": ("dqn", "budget"),
    "q_hidden": ("dqn", "hidden"),
    "q_head": ("dqn", "head"),
    "split_seed": (None, "split_seed"),
    "snr_eval_grid_db": (None, "snr_eval_grid_db"),
    "manifest": (None, "manifest"),
    "alloc_episodes": (None, "alloc_episodes"),
    "alloc_episode_gops": (None, "alloc_episode_gops"),
}


def _parse_value(raw: str, current):
    raw = raw.strip()
    if isinstance(current, tuple):
        parts = [p for p in raw.replace(",", " ").split() if p]
        kind = type(current[0]) if current else float
        if ":" in raw and len(parts) == 1:
            # lo:hi:step grid
            lo, hi, step = (float(p) for p in raw.split(":"))
            count = int(round((hi - lo) / step)) + 1
            return tuple(lo + i * step for i in range(count))
        return tuple(kind(p) for p in parts)
    if isinstance(current, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float) or current is None:
        return float(raw) if raw.lower() != "none" else None
    return raw


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base or ExperimentConfig()
    sections = {name: dataclasses.asdict(getattr(cfg, name)) for name in ("codec", "train", "dqn")}
    top = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg) if f.name not in sections}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        section, name = _KEYS[key]
        target = top if section is None else sections[section]
        target[name] = _parse_value(raw, target[name])
    return ExperimentConfig(
        codec=CodecConfig(**sections["codec"]),
        train=TrainConfig(**sections["train"]),
        dqn=DqnConfig(**sections["dqn"]),
        **top,
    )


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    cfg = parse_config(text)
    if cfg.manifest and not Path(cfg.manifest).is_absolute():
        cfg.manifest = str(Path(path).parent / cfg.manifest)
    return cfg
