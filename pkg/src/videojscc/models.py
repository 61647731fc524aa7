"""Learned key-frame and interpolation codecs and the SSF estimator."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .channel import complex_to_real, pair_real_to_complex
from .config import CodecConfig
from .layers import AnalysisTransform, SSFEstimator, SynthesisTransform
from .warp import build_volume, residual, ssw_sample

PARAM_GROUPS = ("key_encoder", "key_decoder", "interp_encoder", "interp_decoder", "ssf")


@dataclass
class InterpBundle:
    flow_prev: torch.Tensor
    flow_next: torch.Tensor
    residual: torch.Tensor
    mask: torch.Tensor


def _snr_tensor(snr_db, batch: int) -> torch.Tensor:
    t = torch.as_tensor(snr_db, dtype=torch.get_default_dtype())
    return t.reshape(-1).expand(batch) if t.numel() == 1 else t.reshape(batch)


def _frame_in(x: torch.Tensor) -> torch.Tensor:
    return x / 255.0 - 0.5


class JSCCModels(nn.Module):
    """The five trainable groups: key encoder/decoder, interp encoder/decoder, SSF estimator."""

    def __init__(self, config: CodecConfig = CodecConfig()):
        super().__init__()
        self.config = config
        c, hid, st = config.latent_channels, config.hidden, config.stages
        self.key_encoder = AnalysisTransform(3, c, hid, st)
        self.key_decoder = SynthesisTransform(c, 3, hid, st)
        self.interp_encoder = AnalysisTransform(21, c, hid, st)
        self.interp_decoder = SynthesisTransform(c, 12, hid, st)
        self.ssf = SSFEstimator(config.ssf_hidden)

    # latent packing -------------------------------------------------------

    def _to_symbols(self, latent: torch.Tensor) -> torch.Tensor:
        return pair_real_to_complex(latent.reshape(latent.shape[0], -1))

    def _from_symbols(self, y: torch.Tensor, hw: tuple[int, int]) -> torch.Tensor:
        gh, gw = self.config.latent_grid(*hw)
        k = self.config.symbols_per_frame(*hw)
        if y.shape[-1] != k:
            raise ValueError(f"expected {k} symbols for frame {hw}, got {y.shape[-1]}")
        return complex_to_real(y).reshape(y.shape[0], self.config.latent_channels, gh, gw)

    # key frames -----------------------------------------------------------

    def encode_key(self, x: torch.Tensor, snr_db) -> torch.Tensor:
        self.config.symbols_per_frame(*x.shape[-2:])
        return self._to_symbols(self.key_encoder(_frame_in(x), _snr_tensor(snr_db, x.shape[0])))

    def decode_key(self, y: torch.Tensor, snr_db, hw: tuple[int, int]) -> torch.Tensor:
        out = self.key_decoder(self._from_symbols(y, hw), _snr_tensor(snr_db, y.shape[0]))
        return 255.0 * torch.sigmoid(out)

    # interpolated frames ---------------------------------------------------

    def estimate_ssf(self, x: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
        if x.shape != ref.shape:
            raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(ref.shape)}")
        return self.ssf(x, ref)

    def volume(self, ref: torch.Tensor) -> torch.Tensor:
        return build_volume(ref, self.config.ssf_sigma0, self.config.ssf_levels)

    def motion_features(self, x, ref_prev, ref_next, vol_prev=None, vol_next=None):
        """Flows towards ``x`` from both references and the matching residuals."""
        vol_prev = self.volume(ref_prev) if vol_prev is None else vol_prev
        vol_next = self.volume(ref_next) if vol_next is None else vol_next
        f_prev = self.estimate_ssf(x, ref_prev)
        f_next = self.estimate_ssf(x, ref_next)
        r_prev = residual(x, ssw_sample(vol_prev, f_prev))
        r_next = residual(x, ssw_sample(vol_next, f_next))
        return f_prev, f_next, r_prev, r_next

    def encode_interp(self, x, ref_prev, ref_next, r_prev, r_next, f_prev, f_next, snr_db) -> torch.Tensor:
        parts = (x, ref_prev, ref_next, r_prev, r_next, f_prev, f_next)
        if any(p.shape != x.shape for p in parts):
            raise ValueError("all interpolation inputs must share the frame shape")
        stack = torch.cat(
            [_frame_in(x), _frame_in(ref_prev), _frame_in(ref_next), r_prev / 255.0, r_next / 255.0, f_prev, f_next],
            dim=1,
        )
        self.config.symbols_per_frame(*x.shape[-2:])
        return self._to_symbols(self.interp_encoder(stack, _snr_tensor(snr_db, x.shape[0])))

    def decode_interp(self, y: torch.Tensor, snr_db, hw: tuple[int, int]) -> InterpBundle:
        out = self.interp_decoder(self._from_symbols(y, hw), _snr_tensor(snr_db, y.shape[0]))
        f_prev, f_next, res, logits = out.split(3, dim=1)
        return InterpBundle(f_prev, f_next, 255.0 * torch.tanh(res), torch.softmax(logits, dim=1))

    def fuse_interp(self, bundle: InterpBundle, ref_prev, ref_next, vol_prev=None, vol_next=None) -> torch.Tensor:
        vol_prev = self.volume(ref_prev) if vol_prev is None else vol_prev
        vol_next = self.volume(ref_next) if vol_next is None else vol_next
        return fuse_interp(bundle, vol_prev, vol_next)

    def parameter_groups(self) -> dict[str, nn.Module]:
        return {name: getattr(self, name) for name in PARAM_GROUPS}


def fuse_interp(bundle: InterpBundle, vol_prev: torch.Tensor, vol_next: torch.Tensor) -> torch.Tensor:
    """Mask-weighted sum of both warped references and the predicted residual, clamped to [0, 255]."""
    m = bundle.mask
    if vol_prev.shape[-2:] != m.shape[-2:] or vol_next.shape[-2:] != m.shape[-2:]:
        raise ValueError("reference volumes and mask disagree on frame size")
    out = (
        m[:, 0:1] * ssw_sample(vol_prev, bundle.flow_prev)
        + m[:, 1:2] * ssw_sample(vol_next, bundle.flow_next)
        + m[:, 2:3] * bundle.residual
    )
    return out.clamp(0.0, 255.0)
