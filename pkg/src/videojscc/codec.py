"""GoP transmission: key frame first, then dyadic interpolation, over the AWGN chain.

The transmitter keeps its own estimate of every reconstruction (``tx`` refs,
obtained by channel emulation at the estimated noise power) while the
receiver decodes from what actually arrived (``rx`` refs).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .channel import latent_norm, mask_blocks, snr_est_db, transmit_awgn
from .models import InterpBundle, JSCCModels, fuse_interp
from .video import interpolation_schedule


def _per_sample(value, batch: int) -> torch.Tensor | float:
    if isinstance(value, (int, float)):
        return float(value)
    return torch.as_tensor(value, dtype=torch.get_default_dtype()).reshape(batch, 1)


def conditioning_snr(est_noise_power, power: float, batch: int) -> torch.Tensor:
    """SNR_Est in dB per sample, as fed to the AF modules."""
    if isinstance(est_noise_power, (int, float)):
        return torch.full((batch,), snr_est_db(power, float(est_noise_power)))
    est = torch.as_tensor(est_noise_power, dtype=torch.float64).reshape(batch)
    return torch.tensor([snr_est_db(power, float(e)) for e in est], dtype=torch.get_default_dtype())


def send_latent(z, active, block_count: int, noise_power, power: float = 1.0, generator=None) -> torch.Tensor:
    """Mask to the active blocks, power-normalize over all k, add AWGN, drop untransmitted blocks.

    A latent with no active blocks arrives as all zeros.
    """
    batch, k = z.shape
    zm = mask_blocks(z, active, block_count)
    norm = latent_norm(zm)
    norm = torch.where(norm == 0, torch.ones_like(norm), norm)
    z_hat = zm * (math.sqrt(k * power) / norm).to(zm.real.dtype)
    y = transmit_awgn(z_hat, _per_sample(noise_power, batch), generator)
    # blocks past ``active`` are never sent; the receiver knows the allocation
    return mask_blocks(y, active, block_count)


def _column(alloc, i: int, batch: int):
    if isinstance(alloc, int):
        return alloc
    col = torch.as_tensor(alloc)[..., i]
    return int(col) if col.dim() == 0 else col.reshape(batch)


def emulate_key(models: JSCCModels, x, active, noise_power, snr, generator=None, z=None) -> torch.Tensor:
    cfg = models.config
    z = models.encode_key(x, snr) if z is None else z
    y = send_latent(z, active, cfg.block_count, noise_power, cfg.power, generator)
    return models.decode_key(y, snr, tuple(x.shape[-2:]))


def emulate_interp(models: JSCCModels, z, active, noise_power, snr, vol_prev, vol_next, generator=None):
    cfg = models.config
    y = send_latent(z, active, cfg.block_count, noise_power, cfg.power, generator)
    bundle = models.decode_interp(y, snr, tuple(vol_prev.shape[-2:]))
    return fuse_interp(bundle, vol_prev, vol_next), bundle


def emulate_reference(models: JSCCModels, x, role: str, est_noise_power, active, context=None, generator=None):
    """Transmitter-side estimate of the receiver's reconstruction of ``x``.

    ``context`` is ``(ref_prev, ref_next)`` (transmitter references) for the
    ``"interp"`` role and unused for ``"key"``.
    """
    batch = x.shape[0]
    snr = conditioning_snr(est_noise_power, models.config.power, batch)
    if role == "key":
        return emulate_key(models, x, active, est_noise_power, snr, generator)
    if role != "interp":
        raise ValueError(f"role must be 'key' or 'interp', got {role!r}")
    ref_prev, ref_next = context
    vol_prev, vol_next = models.volume(ref_prev), models.volume(ref_next)
    f_prev, f_next, r_prev, r_next = models.motion_features(x, ref_prev, ref_next, vol_prev, vol_next)
    z = models.encode_interp(x, ref_prev, ref_next, r_prev, r_next, f_prev, f_next, snr)
    out, _ = emulate_interp(models, z, active, est_noise_power, snr, vol_prev, vol_next, generator)
    return out


@dataclass
class GoPResult:
    """Outputs of one GoP transmission.

    ``recon`` holds the receiver's frames 1..N; ``tx_refs`` the transmitter's
    estimates for indices 0..N; ``flows`` / ``residuals`` are ordered by the
    interpolation schedule as (prev, next) pairs.
    """

    recon: torch.Tensor
    tx_refs: torch.Tensor
    flows: list[torch.Tensor] = field(default_factory=list)
    residuals: list[torch.Tensor] = field(default_factory=list)
    bundles: list[InterpBundle] = field(default_factory=list)


def code_gop(
    models: JSCCModels,
    frames: torch.Tensor,
    rx_ref0: torch.Tensor | None,
    alloc,
    noise_power,
    est_noise_power=None,
    tx_ref0: torch.Tensor | None = None,
    rx_generator: torch.Generator | None = None,
    tx_generator: torch.Generator | None = None,
    emulate: bool = True,
    transmit: bool = True,
    detach_refs: bool = False,
) -> GoPResult:
    """Code GoP frames ``(B, N, 3, H, W)`` given the previous key reconstructions.

    ``alloc`` is an int or a ``(B, N)`` / ``(N,)`` block count per frame.
    With ``emulate=False`` the transmitter uses the receiver's reconstructions
    as references (a single pass, used in training). With ``transmit=False``
    only the transmitter side runs (state building). ``detach_refs`` stops
    gradients flowing from a frame into the frames it was predicted from.
    """
    cfg = models.config
    batch, n = frames.shape[:2]
    est_noise_power = noise_power if est_noise_power is None else est_noise_power
    snr = conditioning_snr(est_noise_power, cfg.power, batch)
    tx_ref0 = rx_ref0 if tx_ref0 is None else tx_ref0
    if not (emulate or transmit):
        raise ValueError("nothing to do: emulate and transmit both disabled")
    if tx_ref0 is None:
        raise ValueError("a reference for index 0 is required")

    def ref(t):
        return t.detach() if detach_refs else t

    out = [None] * (n + 1)
    rx = [None] * (n + 1)
    tx = [None] * (n + 1)
    rx[0], tx[0] = rx_ref0, tx_ref0
    tx_vol: dict[int, torch.Tensor] = {}
    rx_vol = tx_vol if not emulate else {}

    def vol(store, refs, idx):
        if idx not in store:
            store[idx] = models.volume(refs[idx])
        return store[idx]

    x_key = frames[:, n - 1]
    z = models.encode_key(x_key, snr)
    v = _column(alloc, n - 1, batch)
    if transmit:
        out[n] = emulate_key(models, x_key, v, noise_power, snr, rx_generator, z=z)
        rx[n] = ref(out[n])
    tx[n] = ref(emulate_key(models, x_key, v, est_noise_power, snr, tx_generator, z=z)) if emulate else rx[n]

    result = GoPResult(recon=None, tx_refs=None)
    for i, t in interpolation_schedule(n):
        x = frames[:, i - 1]
        v = _column(alloc, i - 1, batch)
        tp, tn = vol(tx_vol, tx, i - t), vol(tx_vol, tx, i + t)
        f_prev, f_next, r_prev, r_next = models.motion_features(x, tx[i - t], tx[i + t], tp, tn)
        z = models.encode_interp(x, tx[i - t], tx[i + t], r_prev, r_next, f_prev, f_next, snr)
        result.flows += [f_prev, f_next]
        result.residuals += [r_prev, r_next]
        if transmit:
            rp, rn = vol(rx_vol, rx, i - t), vol(rx_vol, rx, i + t)
            out[i], bundle = emulate_interp(models, z, v, noise_power, snr, rp, rn, rx_generator)
            rx[i] = ref(out[i])
            result.bundles.append(bundle)
        if emulate:
            tx[i] = ref(emulate_interp(models, z, v, est_noise_power, snr, tp, tn, tx_generator)[0])
        else:
            tx[i] = rx[i]

    if transmit:
        result.recon = torch.stack(out[1:], dim=1)
    result.tx_refs = torch.stack(tx, dim=1)
    return result


def training_gop(models: JSCCModels, window: torch.Tensor, alloc, noise_power, generator=None, detach_refs=True):
    """Single-pass coding of ``(B, N + 1, 3, H, W)`` windows: frame 0 as a key frame, then one GoP.

    Returns the receiver reconstructions of all N + 1 frames.
    """
    batch = window.shape[0]
    snr = conditioning_snr(noise_power, models.config.power, batch)
    ref0 = emulate_key(models, window[:, 0], _column(alloc, 0, batch), noise_power, snr, generator)
    gop_alloc = alloc if isinstance(alloc, int) else torch.as_tensor(alloc)[..., 1:]
    res = code_gop(
        models, window[:, 1:], ref0.detach() if detach_refs else ref0, gop_alloc, noise_power,
        rx_generator=generator, emulate=False, detach_refs=detach_refs,
    )
    return torch.cat([ref0.unsqueeze(1), res.recon], dim=1)
