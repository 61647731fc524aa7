import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from videojscc.channel import (
    ChannelModel,
    LatentCode,
    complex_to_real,
    mask_blocks,
    noise_power_for_snr,
    pair_real_to_complex,
    power_normalize,
    snr_db,
    transmit_awgn,
)
from videojscc.codec import send_latent


def test_pairing_examples():
    z = pair_real_to_complex(torch.tensor([1.0, 2.0, 3.0, 4.0]))
    assert torch.equal(z, torch.tensor([1 + 2j, 3 + 4j], dtype=torch.complex64))
    assert torch.equal(pair_real_to_complex(torch.tensor([0.0, 0.0])), torch.tensor([0j], dtype=torch.complex64))


def test_pairing_rejects_odd_length():
    with pytest.raises(ValueError):
        pair_real_to_complex(torch.ones(3))


def test_pairing_round_trip_random():
    g = torch.Generator().manual_seed(0)
    for _ in range(1000):
        z = torch.randn(8, dtype=torch.complex64, generator=g)
        assert torch.equal(pair_real_to_complex(complex_to_real(z)), z)


def test_power_normalize_examples():
    out = power_normalize(torch.tensor([3 + 4j]))
    assert torch.allclose(out, torch.tensor([(3 + 4j) / 5]))
    ones = torch.tensor([1 + 0j, 1 + 0j])
    assert torch.allclose(power_normalize(ones), ones)
    out = power_normalize(torch.tensor([2 + 0j, 0j]))
    assert torch.allclose(out, torch.tensor([math.sqrt(2) + 0j, 0j]))
    assert math.isclose(float((out.abs() ** 2).sum() / 2), 1.0, rel_tol=1e-6)


def test_power_normalize_zero_latent_raises():
    with pytest.raises(ValueError):
        power_normalize(torch.zeros(4, dtype=torch.complex64))


@settings(max_examples=50, deadline=None)
@given(
    k=st.integers(1, 64),
    power=st.floats(0.1, 10.0),
    seed=st.integers(0, 2**31 - 1),
)
def test_power_normalize_exact_power_and_direction(k, power, seed):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(k, dtype=torch.complex128, generator=g)
    out = power_normalize(z, power)
    assert math.isclose(float((out.abs() ** 2).sum() / k), power, rel_tol=1e-6)
    ratio = out / z
    assert torch.allclose(ratio.imag, torch.zeros(k, dtype=torch.float64), atol=1e-9)
    assert bool((ratio.real > 0).all())
    assert torch.allclose(ratio.real, ratio.real[0].expand(k))


def test_awgn_noiseless_is_identity():
    z = torch.randn(16, dtype=torch.complex64)
    assert torch.equal(transmit_awgn(z, 0.0), z)


def test_awgn_statistics():
    g = torch.Generator().manual_seed(1)
    n = 1_000_000
    z = torch.zeros(n, dtype=torch.complex128)
    noise = transmit_awgn(z, 0.1, g)
    se = math.sqrt(0.05 / n)  # per-quadrature standard error of the mean
    assert abs(float(noise.mean().real)) < 3 * se
    assert abs(float(noise.mean().imag)) < 3 * se
    assert float((noise.abs() ** 2).mean()) == pytest.approx(0.1, rel=0.01)
    assert float(noise.real.var()) == pytest.approx(0.05, rel=0.01)
    assert float(noise.imag.var()) == pytest.approx(0.05, rel=0.01)
    corr = np.corrcoef(noise.real.numpy(), noise.imag.numpy())[0, 1]
    assert abs(corr) < 4 / math.sqrt(n)


def test_awgn_gradient_passes_through():
    z = torch.randn(4, dtype=torch.complex64, requires_grad=True)
    y = transmit_awgn(z, 0.5, torch.Generator().manual_seed(0))
    (y.real.sum() + y.imag.sum()).backward()
    assert torch.allclose(z.grad, torch.full((4,), 1 + 1j, dtype=torch.complex64))


def test_snr_examples():
    assert snr_db(1.0, 1.0) == 0.0
    assert snr_db(1.0, 0.1) == pytest.approx(10.0)
    assert noise_power_for_snr(1.0, -5.0) == pytest.approx(3.16228, rel=1e-5)
    with pytest.raises(ValueError):
        snr_db(1.0, 0.0)
    with pytest.raises(ValueError):
        snr_db(-1.0, 1.0)


@given(st.floats(-30, 40), st.floats(0.01, 100))
def test_snr_round_trip(snr, power):
    assert snr_db(power, noise_power_for_snr(power, snr)) == pytest.approx(snr, rel=1e-12, abs=1e-12)


def test_channel_model_from_snr():
    ch = ChannelModel.from_snr(10.0, snr_est=6.0)
    assert ch.noise_power == pytest.approx(0.1)
    assert ch.snr_est_db == pytest.approx(6.0)
    with pytest.raises(ValueError):
        ChannelModel(noise_power=-1.0)


def test_mask_blocks_examples():
    z = torch.arange(1, 9, dtype=torch.float32).to(torch.complex64)
    out = mask_blocks(z, 2, 4)
    assert torch.equal(out[:4], z[:4])
    assert torch.equal(out[4:], torch.zeros(4, dtype=torch.complex64))
    assert torch.equal(mask_blocks(z, 4, 4), z)
    assert not mask_blocks(z, 0, 4).abs().any()
    with pytest.raises(ValueError):
        mask_blocks(z, 5, 4)


def test_mask_blocks_per_sample_counts():
    z = torch.ones(3, 8, dtype=torch.complex64)
    out = mask_blocks(z, torch.tensor([0, 1, 4]), 4)
    assert out.abs().sum(dim=1).tolist() == [0.0, 2.0, 8.0]


def test_latent_code_invariants():
    code = LatentCode(torch.ones(8, dtype=torch.complex64), block_count=4)
    assert code.block_size == 2 and len(code.blocks()) == 4
    masked = code.masked(1)
    assert masked.active_blocks == 1
    assert not masked.symbols[2:].abs().any()
    with pytest.raises(ValueError):
        LatentCode(torch.ones(7, dtype=torch.complex64), block_count=4)


def test_send_latent_keeps_total_energy_and_silences_inactive_blocks():
    z = torch.randn(2, 40, dtype=torch.complex64, generator=torch.Generator().manual_seed(3))
    y = send_latent(z, torch.tensor([2, 10]), 10, 0.0)
    energy = (y.abs() ** 2).sum(dim=1) / 40
    assert torch.allclose(energy, torch.ones(2), rtol=1e-5)
    assert not y[0, 8:].abs().any()
    noisy = send_latent(z, 3, 10, 1.0, generator=torch.Generator().manual_seed(0))
    assert not noisy[:, 12:].abs().any()
    assert not send_latent(z, 0, 10, 1.0).abs().any()
