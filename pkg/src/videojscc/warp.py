"""Scale-space volumes and scale-space warping (SSW).

A frame ``(B, 3, H, W)`` becomes a volume ``(B, 3, L, H, W)`` of L = levels + 1
progressively blurred copies; a flow ``(B, 3, H, W)`` with channels
(dx, dy, z) samples it trilinearly.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F


def gaussian_kernel1d(std: float, dtype=torch.float32, device=None) -> torch.Tensor:
    radius = math.ceil(3 * std)
    coords = torch.arange(-radius, radius + 1, dtype=torch.float64, device=device)
    k = torch.exp(-0.5 * (coords / std) ** 2)
    return (k / k.sum()).to(dtype)


def _reflect_index(n: int, radius: int, device=None) -> torch.Tensor:
    # mirror about the edge samples (no edge repetition), valid for any radius
    idx = torch.arange(-radius, n + radius, device=device)
    if n == 1:
        return torch.zeros_like(idx)
    period = 2 * (n - 1)
    idx = torch.remainder(idx, period)
    return torch.where(idx >= n, period - idx, idx)


def gaussian_blur(x: torch.Tensor, std: float) -> torch.Tensor:
    """Separable Gaussian blur of ``(B, C, H, W)`` with reflect-padded borders."""
    kernel = gaussian_kernel1d(std, x.dtype, x.device)
    radius = (kernel.numel() - 1) // 2
    b, c, h, w = x.shape
    flat = x.reshape(b * c, 1, h, w)
    flat = flat.index_select(2, _reflect_index(h, radius, x.device))
    flat = F.conv2d(flat, kernel.view(1, 1, -1, 1))
    flat = flat.index_select(3, _reflect_index(w, radius, x.device))
    flat = F.conv2d(flat, kernel.view(1, 1, 1, -1))
    return flat.reshape(b, c, h, w)


def level_stds(sigma0: float, levels: int) -> list[float]:
    return [sigma0 * 2 ** (j - 1) for j in range(1, levels + 1)]


def build_volume(x: torch.Tensor, sigma0: float = 1.5, levels: int = 5) -> torch.Tensor:
    """Stack ``x`` with its blurs at std ``sigma0 * 2**(j-1)``, j = 1..levels, along dim 2."""
    if sigma0 <= 0:
        raise ValueError("sigma0 must be positive")
    if levels < 0:
        raise ValueError("levels must be >= 0")
    stack = [x] + [gaussian_blur(x, s) for s in level_stds(sigma0, levels)]
    return torch.stack(stack, dim=2)


def ssw_sample(volume: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Sample ``volume`` at (x + dx, y + dy, z) for every output pixel.

    Bilinear in space, linear across levels. Spatial coordinates clamp to
    the frame border and z clamps to [0, L - 1], so on-grid flows index the
    volume exactly.
    """
    if volume.dim() != 5 or flow.dim() != 4 or flow.shape[1] != 3:
        raise ValueError("expected volume (B, C, L, H, W) and flow (B, 3, H, W)")
    b, c, depth, h, w = volume.shape
    if flow.shape[0] != b or flow.shape[-2:] != (h, w):
        raise ValueError(f"flow {tuple(flow.shape)} does not match volume {tuple(volume.shape)}")
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=flow.dtype, device=flow.device),
        torch.arange(w, dtype=flow.dtype, device=flow.device),
        indexing="ij",
    )
    px = (xs + flow[:, 0]).clamp(0, w - 1).reshape(b, -1)
    py = (ys + flow[:, 1]).clamp(0, h - 1).reshape(b, -1)
    pz = flow[:, 2].clamp(0, depth - 1).reshape(b, -1)

    # non-finite coordinates index a valid cell; their weights stay non-finite
    x0, y0, z0 = (c.detach().nan_to_num(0.0, 0.0, 0.0).floor() for c in (px, py, pz))
    fx, fy, fz = px - x0, py - y0, pz - z0
    x0, y0, z0 = x0.long(), y0.long(), z0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    z1 = (z0 + 1).clamp(max=depth - 1)

    flat = volume.reshape(b, c, -1)

    def gather(zi, yi, xi):
        idx = (zi * h + yi) * w + xi
        return flat.gather(2, idx.unsqueeze(1).expand(b, c, -1))

    wx = fx.unsqueeze(1)
    wy = fy.unsqueeze(1)
    wz = fz.unsqueeze(1)
    out = 0
    for zi, gz in ((z0, 1 - wz), (z1, wz)):
        plane = (
            (gather(zi, y0, x0) * (1 - wx) + gather(zi, y0, x1) * wx) * (1 - wy)
            + (gather(zi, y1, x0) * (1 - wx) + gather(zi, y1, x1) * wx) * wy
        )
        out = out + plane * gz
    return out.reshape(b, c, h, w)


def ssw(x: torch.Tensor, flow: torch.Tensor, sigma0: float = 1.5, levels: int = 5) -> torch.Tensor:
    return ssw_sample(build_volume(x, sigma0, levels), flow)


def residual(x: torch.Tensor, x_tilde: torch.Tensor) -> torch.Tensor:
    if x.shape != x_tilde.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_tilde.shape)}")
    return x - x_tilde
