"""Complex-symbol channel chain: real/complex pairing, power normalization, AWGN.

All tensors are torch tensors; the last dimension indexes channel symbols.
Stochastic functions take an explicit ``torch.Generator``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

__all__ = [
    "ChannelModel",
    "LatentCode",
    "pair_real_to_complex",
    "complex_to_real",
    "power_normalize",
    "latent_norm",
    "transmit_awgn",
    "mask_blocks",
    "snr_db",
    "noise_power_for_snr",
    "snr_est_db",
]


@dataclass(frozen=True)
class ChannelModel:
    """AWGN channel with true noise power and the transceiver's estimate."""

    noise_power: float
    est_noise_power: float | None = None
    power: float = 1.0

    def __post_init__(self):
        if self.power <= 0:
            raise ValueError(f"power must be positive, got {self.power}")
        if self.noise_power < 0:
            raise ValueError(f"noise_power must be >= 0, got {self.noise_power}")
        if self.est_noise_power is None:
            object.__setattr__(self, "est_noise_power", self.noise_power)
        elif self.est_noise_power < 0:
            raise ValueError("est_noise_power must be >= 0")

    @classmethod
    def from_snr(cls, snr: float, snr_est: float | None = None, power: float = 1.0) -> "ChannelModel":
        sigma2 = noise_power_for_snr(power, snr)
        est = sigma2 if snr_est is None else noise_power_for_snr(power, snr_est)
        return cls(noise_power=sigma2, est_noise_power=est, power=power)

    @property
    def snr_db(self) -> float:
        return snr_db(self.power, self.noise_power) if self.noise_power > 0 else math.inf

    @property
    def snr_est_db(self) -> float:
        return snr_est_db(self.power, self.est_noise_power)


@dataclass
class LatentCode:
    """Length-k complex latent split into ``block_count`` contiguous blocks.

    Symbols in blocks past ``active_blocks`` are zero.
    """

    symbols: torch.Tensor
    block_count: int
    active_blocks: int | None = None

    def __post_init__(self):
        k = self.symbols.shape[-1]
        if k % self.block_count:
            raise ValueError(f"k={k} is not divisible by V={self.block_count}")
        if self.active_blocks is None:
            self.active_blocks = self.block_count
        if not 0 <= self.active_blocks <= self.block_count:
            raise ValueError(f"active_blocks={self.active_blocks} outside [0, {self.block_count}]")

    @property
    def k(self) -> int:
        return self.symbols.shape[-1]

    @property
    def block_size(self) -> int:
        return self.k // self.block_count

    def blocks(self) -> list[torch.Tensor]:
        return list(self.symbols.split(self.block_size, dim=-1))

    def masked(self, v: int) -> "LatentCode":
        return LatentCode(mask_blocks(self.symbols, v, self.block_count), self.block_count, v)


def pair_real_to_complex(reals: torch.Tensor) -> torch.Tensor:
    """Pair consecutive reals along the last dim: ``r[2j] + i r[2j+1]``."""
    if reals.shape[-1] % 2:
        raise ValueError(f"need an even number of reals, got {reals.shape[-1]}")
    pairs = reals.reshape(*reals.shape[:-1], -1, 2)
    if not pairs.is_floating_point():
        pairs = pairs.to(torch.get_default_dtype())
    return torch.view_as_complex(pairs.contiguous())


def complex_to_real(z: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`pair_real_to_complex`."""
    return torch.view_as_real(z).reshape(*z.shape[:-1], -1)


def power_normalize(z: torch.Tensor, power: float = 1.0) -> torch.Tensor:
    """Scale each latent to average power ``power`` over its k symbols.

    ``z_hat = sqrt(k P) z / ||z||``. The norm runs over all k symbols, so
    zeroed blocks count towards k and the active symbols carry the full
    energy budget.
    """
    norm = latent_norm(z)
    if bool((norm == 0).any()):
        raise ValueError("cannot power-normalize an all-zero latent")
    return z * (math.sqrt(z.shape[-1] * power) / norm).to(z.real.dtype)


def latent_norm(z: torch.Tensor) -> torch.Tensor:
    """``||z||`` over the last dim, accumulated in double precision (keepdim)."""
    return torch.linalg.vector_norm(z.to(torch.complex128), dim=-1, keepdim=True)


def transmit_awgn(z: torch.Tensor, noise_power: float | torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    """Add circularly-symmetric complex Gaussian noise of total variance ``noise_power``.

    ``noise_power`` may be a scalar or a tensor broadcastable to ``z.shape[:-1] + (1,)``.
    The noise is drawn independently of ``z`` so gradients pass straight through.
    """
    if isinstance(noise_power, (int, float)):
        if noise_power == 0:
            return z
        std = math.sqrt(noise_power / 2)
    else:
        std = torch.sqrt(noise_power / 2)
    real_dtype = z.real.dtype
    noise = torch.randn(*z.shape, 2, generator=generator, dtype=real_dtype, device=z.device)
    noise = torch.view_as_complex(noise)
    return z + std * noise


def mask_blocks(z: torch.Tensor, active: int | torch.Tensor, block_count: int) -> torch.Tensor:
    """Zero every block after the first ``active`` of ``block_count`` equal blocks.

    ``active`` is an int or an integer tensor of shape ``z.shape[:-1]`` (per-sample counts).
    """
    k = z.shape[-1]
    if k % block_count:
        raise ValueError(f"k={k} is not divisible by V={block_count}")
    block_size = k // block_count
    block_idx = torch.arange(k, device=z.device) // block_size
    if isinstance(active, int):
        if not 0 <= active <= block_count:
            raise ValueError(f"active blocks {active} outside [0, {block_count}]")
        keep = block_idx < active
    else:
        active = torch.as_tensor(active, device=z.device)
        if bool(((active < 0) | (active > block_count)).any()):
            raise ValueError(f"active blocks outside [0, {block_count}]")
        keep = block_idx < active.unsqueeze(-1)
    return torch.where(keep, z, torch.zeros((), dtype=z.dtype, device=z.device))


def snr_db(power: float, noise_power: float) -> float:
    if power <= 0 or noise_power <= 0:
        raise ValueError("power and noise power must be positive")
    return 10.0 * math.log10(power / noise_power)


def noise_power_for_snr(power: float, snr: float) -> float:
    if power <= 0:
        raise ValueError("power must be positive")
    return power / 10.0 ** (snr / 10.0)


SNR_EST_CAP_DB = 40.0


def snr_est_db(power: float, est_noise_power: float) -> float:
    """SNR estimate fed to the conditioning modules; a noiseless estimate maps to a cap."""
    if est_noise_power <= 0:
        return SNR_EST_CAP_DB
    return min(snr_db(power, est_noise_power), SNR_EST_CAP_DB)
