import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.ndimage import gaussian_filter

from videojscc.warp import build_volume, gaussian_blur, level_stds, residual, ssw, ssw_sample


def _frame(seed, hw=(16, 16), dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(1, 3, *hw, generator=g, dtype=dtype) * 255


def test_level_stds_double():
    assert level_stds(1.5, 5) == [1.5, 3.0, 6.0, 12.0, 24.0]


def test_volume_shape_and_first_level():
    x = _frame(0, (12, 20))
    vol = build_volume(x, 1.5, 5)
    assert vol.shape == (1, 3, 6, 12, 20)
    assert torch.equal(vol[:, :, 0], x)
    assert torch.equal(build_volume(x, 1.5, 0)[:, :, 0], x)
    with pytest.raises(ValueError):
        build_volume(x, 0.0, 5)


def test_blur_matches_scipy_mirror():
    x = _frame(1, (16, 16))
    for std in (0.8, 1.5, 6.0, 24.0):
        radius = int(np.ceil(3 * std))
        ref = gaussian_filter(x[0].numpy(), sigma=(0, std, std), mode="mirror", truncate=radius / std)
        assert np.allclose(gaussian_blur(x, std)[0].numpy(), ref, atol=1e-9)


def test_blur_preserves_constant_and_smooths():
    c = torch.full((1, 3, 10, 10), 42.0, dtype=torch.float64)
    assert torch.allclose(gaussian_blur(c, 3.0), c)
    x = _frame(2)
    tv = lambda t: (t[..., 1:, :] - t[..., :-1, :]).abs().sum() + (t[..., 1:] - t[..., :-1]).abs().sum()
    vol = build_volume(x)
    tvs = [float(tv(vol[:, :, j])) for j in range(vol.shape[2])]
    assert all(a > b for a, b in zip(tvs, tvs[1:]))


def test_zero_flow_is_identity():
    x = _frame(3, (16, 24), torch.float32)
    out = ssw(x, torch.zeros(1, 3, 16, 24))
    assert (out - x).abs().max() <= 1e-6


@settings(max_examples=30, deadline=None)
@given(dx=st.integers(-3, 3), dy=st.integers(-3, 3), z=st.integers(0, 5), seed=st.integers(0, 1000))
def test_integer_flow_equals_direct_indexing(dx, dy, z, seed):
    x = _frame(seed, (10, 12))
    vol = build_volume(x)
    flow = torch.zeros(1, 3, 10, 12, dtype=x.dtype)
    flow[:, 0], flow[:, 1], flow[:, 2] = dx, dy, z
    out = ssw_sample(vol, flow)
    ys = (torch.arange(10) + dy).clamp(0, 9)
    xs = (torch.arange(12) + dx).clamp(0, 11)
    expected = vol[:, :, z][:, :, ys][:, :, :, xs]
    assert torch.equal(out, expected)


def test_fractional_flow_interpolates():
    x = torch.zeros(1, 3, 4, 4, dtype=torch.float64)
    x[..., 1] = 10.0
    x[..., 2] = 20.0
    vol = build_volume(x, 1.5, 1)
    flow = torch.zeros(1, 3, 4, 4, dtype=torch.float64)
    flow[:, 0] = 0.25
    out = ssw_sample(vol, flow)
    assert torch.allclose(out[..., 1], torch.full_like(out[..., 1], 12.5))
    flow[:, 0] = 0
    flow[:, 2] = 0.5
    mid = ssw_sample(vol, flow)
    assert torch.allclose(mid, 0.5 * (vol[:, :, 0] + vol[:, :, 1]))


def _flow(seed, hw=(16, 16)):
    g = torch.Generator().manual_seed(seed)
    f = torch.rand(1, 3, *hw, generator=g, dtype=torch.float64)
    f[:, :2] = f[:, :2] * 4 - 2
    f[:, 2] = f[:, 2] * 4 + 0.5
    # keep samples away from grid lines and borders, where trilinear weights kink
    return f.clamp(-1.8, 4.4) + 0.123


def test_gradients_match_finite_differences():
    x = _frame(4)
    vol = build_volume(x).requires_grad_(True)
    flow = _flow(5).requires_grad_(True)
    w = torch.randn(1, 3, 16, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(6))
    fn = lambda v, f: (ssw_sample(v, f) * w).sum()
    fn(vol, flow).backward()
    g = torch.Generator().manual_seed(7)
    eps = 1e-6
    for tensor, grad in ((flow, flow.grad), (vol, vol.grad)):
        idx = torch.randperm(tensor.numel(), generator=g)[:48]
        flat = tensor.detach().reshape(-1)
        num = []
        for i in idx.tolist():
            up, dn = flat.clone(), flat.clone()
            up[i] += eps
            dn[i] -= eps
            args_up = (up.reshape(tensor.shape), flow.detach()) if tensor is vol else (vol.detach(), up.reshape(tensor.shape))
            args_dn = (dn.reshape(tensor.shape), flow.detach()) if tensor is vol else (vol.detach(), dn.reshape(tensor.shape))
            num.append((fn(*args_up) - fn(*args_dn)).item() / (2 * eps))
        num = torch.tensor(num, dtype=torch.float64)
        ana = grad.reshape(-1)[idx]
        assert float((ana - num).norm() / num.norm()) < 1e-3


def test_shape_errors():
    vol = build_volume(_frame(0, (8, 8)))
    with pytest.raises(ValueError):
        ssw_sample(vol, torch.zeros(1, 2, 8, 8, dtype=vol.dtype))
    with pytest.raises(ValueError):
        ssw_sample(vol, torch.zeros(1, 3, 8, 9, dtype=vol.dtype))
    with pytest.raises(ValueError):
        residual(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5))


def test_residual_is_signed_difference():
    x, y = _frame(1, (4, 4)), _frame(2, (4, 4))
    assert torch.equal(residual(x, y), x - y)
    assert torch.equal(residual(x, x), torch.zeros_like(x))
