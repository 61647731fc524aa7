"""Distortion measures on 8-bit-range frames.

Frames are tensors shaped ``(..., 3, H, W)`` with values in [0, 255].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

PSNR_CAP_DB = 100.0

# Published per-scale exponents (alpha_M = beta_j = gamma_j at each scale).
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(x)
    return x if x.is_floating_point() else x.to(torch.get_default_dtype())


def _check_same(x: torch.Tensor, y: torch.Tensor):
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")


def mse_loss(x, x_hat) -> torch.Tensor:
    """Per-frame mean squared error over the last three dims (3HW entries)."""
    x, x_hat = _as_tensor(x), _as_tensor(x_hat)
    _check_same(x, x_hat)
    return ((x - x_hat) ** 2).mean(dim=(-3, -2, -1))


def psnr_db(x, x_hat, data_range: float = 255.0) -> torch.Tensor:
    """Per-frame PSNR; zero MSE maps to ``PSNR_CAP_DB``."""
    mse = mse_loss(x, x_hat)
    safe = torch.clamp(mse, min=1e-30)
    val = 10.0 * torch.log10(data_range**2 / safe)
    return torch.where(mse == 0, torch.full_like(val, PSNR_CAP_DB), torch.clamp(val, max=PSNR_CAP_DB))


@dataclass(frozen=True)
class MsSsimParams:
    scales: int = 5
    window_size: int = 11
    window_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 255.0
    weights: tuple[float, ...] | None = None

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2

    @property
    def c3(self) -> float:
        return self.c2 / 2

    def scale_weights(self) -> torch.Tensor:
        if self.weights is not None:
            w = torch.tensor(self.weights, dtype=torch.float64)
        else:
            if self.scales > len(MS_SSIM_WEIGHTS):
                raise ValueError(f"no published weights for {self.scales} scales")
            w = torch.tensor(MS_SSIM_WEIGHTS[: self.scales], dtype=torch.float64)
        if len(w) != self.scales:
            raise ValueError("weights length must equal scales")
        return w / w.sum()

    @property
    def min_size(self) -> int:
        return 2 ** (self.scales - 1) * self.window_size


def params_for_size(height: int, width: int, params: MsSsimParams = MsSsimParams()) -> MsSsimParams:
    """Drop coarse scales until the pyramid fits a ``height x width`` frame."""
    while params.scales > 1 and params.min_size > min(height, width):
        w = params.weights[: params.scales - 1] if params.weights else None
        params = replace(params, scales=params.scales - 1, weights=w)
    if params.min_size > min(height, width):
        raise ValueError(f"frame {height}x{width} smaller than the SSIM window")
    return params


def _gaussian_window(size: int, sigma: float, dtype, device) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    # x: (B, C, H, W); separable depthwise conv, no padding
    c = x.shape[1]
    kh = win.view(1, 1, -1, 1).expand(c, 1, -1, 1)
    kw = win.view(1, 1, 1, -1).expand(c, 1, 1, -1)
    return F.conv2d(F.conv2d(x, kh, groups=c), kw, groups=c)


def _ssim_terms(x, y, win, params: MsSsimParams):
    mu_x = _filter_valid(x, win)
    mu_y = _filter_valid(y, win)
    var_x = _filter_valid(x * x, win) - mu_x**2
    var_y = _filter_valid(y * y, win) - mu_y**2
    cov = _filter_valid(x * y, win) - mu_x * mu_y
    lum = (2 * mu_x * mu_y + params.c1) / (mu_x**2 + mu_y**2 + params.c1)
    # contrast * structure collapses to this form when c3 = c2 / 2
    cs = (2 * cov + params.c2) / (var_x + var_y + params.c2)
    return lum.mean(dim=(-2, -1)), cs.mean(dim=(-2, -1)), (lum * cs).mean(dim=(-2, -1))


def ms_ssim(x, x_hat, params: MsSsimParams = MsSsimParams()) -> torch.Tensor:
    """Multi-scale SSIM per frame, computed per color channel and averaged.

    Scale j contributes its mean contrast-structure term with weight ``w_j``;
    the coarsest scale also contributes the luminance term.
    """
    x, x_hat = _as_tensor(x), _as_tensor(x_hat)
    _check_same(x, x_hat)
    if x.dim() < 3:
        raise ValueError("expected (..., C, H, W) frames")
    lead = x.shape[:-3]
    h, w = x.shape[-2:]
    if min(h, w) < params.min_size:
        raise ValueError(
            f"frame {h}x{w} too small for {params.scales} scales with window {params.window_size} "
            f"(need >= {params.min_size})"
        )
    x = x.reshape(-1, *x.shape[-3:])
    y = x_hat.reshape(-1, *x_hat.shape[-3:])
    win = _gaussian_window(params.window_size, params.window_sigma, x.dtype, x.device)
    weights = params.scale_weights().to(x.dtype)

    cs_terms = []
    for j in range(params.scales):
        lum, cs, ssim_full = _ssim_terms(x, y, win, params)
        if j < params.scales - 1:
            cs_terms.append(cs)
            x = F.avg_pool2d(x, 2)
            y = F.avg_pool2d(y, 2)
    cs_terms.append(ssim_full)
    stack = torch.relu(torch.stack(cs_terms, dim=0))
    val = torch.prod(stack ** weights.view(-1, 1, 1), dim=0)  # (B, C)
    return val.mean(dim=-1).reshape(lead)


def msssim_loss(x, x_hat, params: MsSsimParams = MsSsimParams()) -> torch.Tensor:
    return 1.0 - ms_ssim(x, x_hat, params)


METRICS = ("psnr", "ms-ssim")


def frame_metric(name: str, params: MsSsimParams = MsSsimParams()) -> Callable:
    """Per-frame quality function for a metric name string."""
    if name == "psnr":
        return psnr_db
    if name == "ms-ssim":
        return lambda a, b: ms_ssim(a, b, params)
    raise ValueError(f"unknown metric {name!r}; expected one of {METRICS}")


def frame_loss(name: str, params: MsSsimParams = MsSsimParams()) -> Callable:
    """Per-frame loss (l_PSNR = MSE, or 1 - MS-SSIM) for a metric name."""
    if name == "psnr":
        return mse_loss
    if name == "ms-ssim":
        return lambda a, b: msssim_loss(a, b, params)
    raise ValueError(f"unknown metric {name!r}; expected one of {METRICS}")


def sequence_quality(frames: Sequence, recon: Sequence, metric: str | Callable = "psnr") -> float:
    """Mean of the per-frame metric over aligned frame sequences."""
    if len(frames) != len(recon):
        raise ValueError(f"length mismatch: {len(frames)} vs {len(recon)}")
    if len(frames) == 0:
        raise ValueError("empty sequence")
    fn = frame_metric(metric) if isinstance(metric, str) else metric
    vals = [float(fn(_as_tensor(a), _as_tensor(b))) for a, b in zip(frames, recon)]
    return math.fsum(vals) / len(vals)
