"""Building blocks for the learned transforms."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn


class GDN(nn.Module):
    r"""Generalized divisive normalization.

    .. math::

       y_i = \frac{x_i}{\sqrt{\beta_i + \sum_j \gamma_{ij} x_j^2}}

    ``inverse=True`` multiplies instead (IGDN). Parameters are kept
    non-negative by squaring a stored square root, offset by a pedestal.
    """

    def __init__(self, channels: int, inverse: bool = False, beta_min: float = 1e-6, gamma_init: float = 0.1):
        super().__init__()
        self.inverse = inverse
        self.pedestal = 2.0**-18
        self.beta_bound = (beta_min + self.pedestal**2) ** 0.5
        self.gamma_bound = self.pedestal
        self.beta = nn.Parameter(torch.sqrt(torch.ones(channels) + self.pedestal**2))
        self.gamma = nn.Parameter(torch.sqrt(gamma_init * torch.eye(channels) + self.pedestal**2))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        beta = torch.clamp(self.beta, min=self.beta_bound) ** 2 - self.pedestal**2
        gamma = torch.clamp(self.gamma, min=self.gamma_bound) ** 2 - self.pedestal**2
        c = x.shape[1]
        norm = F.conv2d(x * x, gamma.view(c, c, 1, 1), beta)
        return x * torch.sqrt(norm) if self.inverse else x * torch.rsqrt(norm)


class AFModule(nn.Module):
    """SNR-conditioned channel attention.

    Pools each channel, appends the SNR estimate (dB), and rescales the
    channels by a sigmoid gate from a two-layer map.
    """

    def __init__(self, channels: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or max(channels // 2, 8)
        self.fc1 = nn.Linear(channels + 1, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x: torch.Tensor, snr_db: torch.Tensor) -> torch.Tensor:
        stats = x.mean(dim=(-2, -1))
        snr = (snr_db / 20.0).to(x.dtype).reshape(-1, 1).expand(x.shape[0], 1)
        gate = torch.sigmoid(self.fc2(F.relu(self.fc1(torch.cat([stats, snr], dim=1)))))
        return x * gate[:, :, None, None]


class ResidualUnit(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        mid = max(channels // 2, 4)
        self.body = nn.Sequential(
            nn.Conv2d(channels, mid, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(mid, mid, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(mid, channels, 1),
        )

    def forward(self, x):
        return F.relu(x + self.body(x))


class SimplifiedAttention(nn.Module):
    """Trunk/mask attention without the non-local block: ``x + trunk(x) * sigmoid(mask(x))``."""

    def __init__(self, channels: int):
        super().__init__()
        self.trunk = ResidualUnit(channels)
        self.mask = nn.Sequential(ResidualUnit(channels), nn.Conv2d(channels, channels, 1))

    def forward(self, x):
        return x + self.trunk(x) * torch.sigmoid(self.mask(x))


class AnalysisTransform(nn.Module):
    """Strided conv stages with GDN and AF; attention after stages 2 and 4.

    Maps ``(B, in_channels, H, W)`` to ``(B, out_channels, H / 2**stages, W / 2**stages)``.
    """

    def __init__(self, in_channels: int, out_channels: int, hidden: int = 64, stages: int = 4):
        super().__init__()
        self.convs = nn.ModuleList()
        self.gdns = nn.ModuleList()
        self.afs = nn.ModuleList()
        self.attn = nn.ModuleDict()
        ch = in_channels
        for s in range(stages):
            self.convs.append(nn.Conv2d(ch, hidden, 5 if s == 0 else 3, stride=2, padding=2 if s == 0 else 1))
            self.gdns.append(GDN(hidden))
            self.afs.append(AFModule(hidden))
            if s == 1 or s == stages - 1:
                self.attn[str(s)] = SimplifiedAttention(hidden)
            ch = hidden
        self.head = nn.Conv2d(hidden, out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, snr_db: torch.Tensor) -> torch.Tensor:
        for s, (conv, gdn, af) in enumerate(zip(self.convs, self.gdns, self.afs)):
            x = af(gdn(conv(x)), snr_db)
            if str(s) in self.attn:
                x = self.attn[str(s)](x)
        return self.head(x)


class SynthesisTransform(nn.Module):
    """Pixel-shuffle upsampling stages with inverse GDN and AF."""

    def __init__(self, in_channels: int, out_channels: int, hidden: int = 64, stages: int = 4):
        super().__init__()
        self.stem = nn.Conv2d(in_channels, hidden, 3, padding=1)
        self.stem_attn = SimplifiedAttention(hidden)
        self.convs = nn.ModuleList()
        self.igdns = nn.ModuleList()
        self.afs = nn.ModuleList()
        self.attn = nn.ModuleDict()
        for s in range(stages):
            self.convs.append(nn.Conv2d(hidden, 4 * hidden, 3, padding=1))
            self.igdns.append(GDN(hidden, inverse=True))
            self.afs.append(AFModule(hidden))
            if s + 1 == 2:
                self.attn[str(s)] = SimplifiedAttention(hidden)
        self.head = nn.Conv2d(hidden, out_channels, 3, padding=1)

    def forward(self, y: torch.Tensor, snr_db: torch.Tensor) -> torch.Tensor:
        x = self.stem_attn(self.stem(y))
        for s, (conv, igdn, af) in enumerate(zip(self.convs, self.igdns, self.afs)):
            x = af(igdn(F.pixel_shuffle(conv(x), 2)), snr_db)
            if str(s) in self.attn:
                x = self.attn[str(s)](x)
        return self.head(x)


class SSFEstimator(nn.Module):
    """U-Net style flow estimator over a (target, reference) pair -> (dx, dy, z)."""

    def __init__(self, hidden: int = 32, depth: int = 3):
        super().__init__()
        self.depth = depth
        widths = [hidden * 2**d for d in range(depth + 1)]
        self.inc = nn.Sequential(nn.Conv2d(6, widths[0], 3, padding=1), nn.LeakyReLU(0.1, inplace=True))
        self.down = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(widths[d], widths[d + 1], 3, stride=2, padding=1),
                nn.LeakyReLU(0.1, inplace=True),
                nn.Conv2d(widths[d + 1], widths[d + 1], 3, padding=1),
                nn.LeakyReLU(0.1, inplace=True),
            )
            for d in range(depth)
        )
        self.up = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(widths[d + 1] + widths[d], widths[d], 3, padding=1),
                nn.LeakyReLU(0.1, inplace=True),
            )
            for d in reversed(range(depth))
        )
        self.out = nn.Conv2d(widths[0], 3, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
        h = self.inc(torch.cat([x / 255.0 - 0.5, ref / 255.0 - 0.5], dim=1))
        skips = [h]
        for down in self.down:
            h = down(h)
            skips.append(h)
        skips.pop()
        for up in self.up:
            skip = skips.pop()
            h = F.interpolate(h, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            h = up(torch.cat([h, skip], dim=1))
        return self.out(h)
