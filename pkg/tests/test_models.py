import pytest
import torch

from videojscc.codec import conditioning_snr, training_gop
from videojscc.config import CodecConfig
from videojscc.layers import GDN, AFModule
from videojscc.models import PARAM_GROUPS, JSCCModels

SMALL = CodecConfig(latent_channels=48, hidden=16, ssf_hidden=8, block_count=8)


@pytest.fixture(scope="module")
def models():
    torch.manual_seed(0)
    return JSCCModels(SMALL).eval()


def _frames(b, hw=(64, 64), seed=0):
    return torch.rand(b, 3, *hw, generator=torch.Generator().manual_seed(seed)) * 255


def test_symbol_count_example():
    assert SMALL.symbols_per_frame(64, 64) == 384
    assert CodecConfig().symbols_per_frame(64, 64) == 1520
    assert CodecConfig().bandwidth_ratio(64, 64) == pytest.approx(0.0309, abs=1e-4)
    with pytest.raises(ValueError):
        SMALL.symbols_per_frame(60, 64)


@pytest.mark.parametrize("hw", [(64, 64), (128, 128), (64, 96)])
def test_key_shapes(models, hw):
    x = _frames(2, hw)
    z = models.encode_key(x, 10.0)
    assert z.dtype == torch.complex64 and z.shape == (2, SMALL.symbols_per_frame(*hw))
    out = models.decode_key(z, 10.0, hw)
    assert out.shape == x.shape and out.min() >= 0 and out.max() <= 255


def test_interp_shapes_and_mask_convexity(models):
    x, a, b = _frames(2, seed=1), _frames(2, seed=2), _frames(2, seed=3)
    fp, fn, rp, rn = models.motion_features(x, a, b)
    assert fp.shape == (2, 3, 64, 64) and rp.shape == x.shape
    z = models.encode_interp(x, a, b, rp, rn, fp, fn, 5.0)
    bundle = models.decode_interp(z, 5.0, (64, 64))
    assert bundle.mask.shape == (2, 3, 64, 64)
    assert bundle.mask.min() >= 0
    assert torch.allclose(bundle.mask.sum(1), torch.ones(2, 64, 64), atol=1e-6)
    assert bundle.residual.abs().max() <= 255
    out = models.fuse_interp(bundle, a, b)
    assert out.shape == x.shape and out.min() >= 0 and out.max() <= 255


def test_interp_rejects_mismatched_inputs(models):
    x = _frames(1)
    with pytest.raises(ValueError):
        models.encode_interp(x, x, x[..., :32], x, x, x, x, 0.0)
    with pytest.raises(ValueError):
        models.decode_key(torch.zeros(1, 10, dtype=torch.complex64), 0.0, (64, 64))


def test_untrained_ssf_gives_zero_flow(models):
    x = _frames(1)
    assert not models.estimate_ssf(x, _frames(1, seed=4)).any()


def test_deterministic_forward(models):
    x = _frames(1)
    assert torch.equal(models.encode_key(x, 3.0), models.encode_key(x, 3.0))


def test_af_conditioning_changes_code(models):
    x = _frames(1)
    assert not torch.allclose(models.encode_key(x, -5.0), models.encode_key(x, 20.0))
    af = AFModule(8)
    y = torch.randn(2, 8, 4, 4)
    assert not torch.allclose(af(y, torch.tensor([-5.0, -5.0])), af(y, torch.tensor([20.0, 20.0])))


def test_gdn_initial_response():
    x = torch.randn(2, 4, 5, 5, generator=torch.Generator().manual_seed(0))
    # beta = 1, gamma = 0.1 I at init
    scale = torch.sqrt(1 + 0.1 * x**2)
    assert torch.allclose(GDN(4)(x), x / scale, atol=1e-5)
    assert torch.allclose(GDN(4, inverse=True)(x), x * scale, atol=1e-5)


def test_gradients_reach_every_group():
    torch.manual_seed(1)
    m = JSCCModels(SMALL)
    window = torch.rand(2, 5, 3, 64, 64) * 255
    recon = training_gop(m, window, 4, 0.1, torch.Generator().manual_seed(0))
    ((recon - window) ** 2).mean().backward()
    for name, module in m.parameter_groups().items():
        assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in module.parameters()), name
    assert set(m.parameter_groups()) == set(PARAM_GROUPS)


def test_conditioning_snr_caps_noiseless():
    assert conditioning_snr(0.0, 1.0, 2).tolist() == [40.0, 40.0]
    assert conditioning_snr(0.1, 1.0, 1).item() == pytest.approx(10.0)
