import logging
import math
import os

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from collabwm.audio import Waveform
from collabwm.channel import (AugmentationPool, CodecError, CodecKind, CodecSpec, ResidualVQ, RvqCodec,
                              align, channel_augment, codec_roundtrip, neural_codec_roundtrip, snr_db,
                              ste_apply, train_rvq_codec)

SR = 22050


def sine(f0=440.0, seconds=1.0, amp=0.5):
    t = torch.arange(int(SR * seconds)) / SR
    return amp * torch.sin(2 * math.pi * f0 * t)


def harmonic(f0=220.0, seconds=1.0):
    t = torch.arange(int(SR * seconds)) / SR
    x = sum(torch.sin(2 * math.pi * f0 * k * t) / k for k in range(1, 21))
    return 0.4 * x / x.abs().max()


# -- CodecSpec ----------------------------------------------------------------------

@pytest.mark.parametrize("text", ["none", "mp3@64", "opus@16", "vorbis@q2", "neural@8"])
def test_spec_parse_roundtrip(text):
    assert str(CodecSpec.parse(text)) == text


@pytest.mark.parametrize("kwargs", [
    dict(kind="none", bitrate=64),
    dict(kind="ogg_vorbis", bitrate=64),
    dict(kind="ogg_vorbis", quality=7),
    dict(kind="mp3", quality=1),
    dict(kind="mp3", bitrate=48),
    dict(kind="neural_rvq", bitrate=16),
])
def test_spec_invariants(kwargs):
    with pytest.raises(ValueError):
        CodecSpec(**kwargs)


# -- codec round trip -------------------------------------------------------------

def test_identity_channel():
    x = torch.randn(5000)
    r = codec_roundtrip(Waveform(x, SR), CodecSpec(CodecKind.NONE))
    assert torch.equal(r.output.samples, x)
    assert r.delay_samples == 0 and r.snr_db == math.inf


def test_mp3_sine_snr():
    r = codec_roundtrip(Waveform(sine(), SR), CodecSpec.parse("mp3@128"))
    assert r.snr_db > 20
    assert len(r.output) == SR


def test_opus_bitrate_ordering():
    x = Waveform(sine(), SR)
    low = codec_roundtrip(x, CodecSpec.parse("opus@16")).snr_db
    high = codec_roundtrip(x, CodecSpec.parse("opus@128")).snr_db
    assert low < high


@pytest.mark.parametrize("spec", ["mp3@16", "opus@32", "vorbis@q1"])
@pytest.mark.parametrize("n", [1024, 3001, 262144])
def test_output_length_invariant(spec, n):
    x = 0.3 * torch.sin(torch.arange(n) * 0.05)
    r = codec_roundtrip(Waveform(x, SR), CodecSpec.parse(spec))
    assert len(r.output) == n
    assert abs(r.delay_samples) <= 4096


@pytest.mark.parametrize("spec", ["mp3@128", "opus@128", "vorbis@q3"])
def test_lossy_changes_signal(spec):
    x = harmonic()
    r = codec_roundtrip(Waveform(x, SR), CodecSpec.parse(spec))
    assert float(((x - r.output.samples) ** 2).sum()) > 0


def test_rate_mismatch():
    with pytest.raises(ValueError):
        codec_roundtrip(Waveform(torch.zeros(100), 16000), CodecSpec.parse("mp3@64"))


def test_missing_binary(monkeypatch):
    monkeypatch.setenv("CODEC_BIN", "/nonexistent/ffmpeg")
    with pytest.raises(CodecError, match="cannot start"):
        codec_roundtrip(Waveform(sine(), SR), CodecSpec.parse("mp3@64"))


def test_failing_binary_reports_diagnostics(monkeypatch, tmp_path):
    fake = tmp_path / "fakecodec"
    fake.write_text("#!/bin/sh\necho 'encoder exploded' >&2\nexit 3\n")
    fake.chmod(0o755)
    monkeypatch.setenv("CODEC_BIN", str(fake))
    with pytest.raises(CodecError, match="encoder exploded"):
        codec_roundtrip(Waveform(sine(), SR), CodecSpec.parse("opus@64"))


def test_temp_files_removed(monkeypatch, tmp_path):
    monkeypatch.setenv("TMPDIR", str(tmp_path))
    import tempfile
    monkeypatch.setattr(tempfile, "tempdir", None)
    codec_roundtrip(Waveform(sine(), SR), CodecSpec.parse("mp3@64"))
    fake = tmp_path / "fakecodec"
    fake.write_text("#!/bin/sh\nexit 1\n")
    fake.chmod(0o755)
    monkeypatch.setenv("CODEC_BIN", str(fake))
    with pytest.raises(CodecError):
        codec_roundtrip(Waveform(sine(), SR), CodecSpec.parse("mp3@64"))
    assert [p.name for p in tmp_path.iterdir()] == ["fakecodec"]


# -- alignment ------------------------------------------------------------------

@pytest.mark.parametrize("delay", [0, 37, 1105, -250])
def test_align_recovers_delay(delay):
    rng = np.random.default_rng(0)
    x = rng.standard_normal(8000).astype(np.float32)
    if delay >= 0:
        decoded = np.concatenate([np.zeros(delay, np.float32), x, np.zeros(100, np.float32)])
    else:
        decoded = x[-delay:]
    out, d = align(x, decoded)
    assert d == delay
    assert len(out) == len(x)
    if delay >= 0:
        np.testing.assert_array_equal(out, x)


def test_align_low_correlation_falls_back(caplog):
    rng = np.random.default_rng(1)
    x = rng.standard_normal(4000)
    noise = rng.standard_normal(4000)
    with caplog.at_level(logging.WARNING):
        out, d = align(x, noise)
    assert d == 0
    assert "below" in caplog.text


def test_snr_sentinels():
    assert snr_db([1.0, 2.0], [1.0, 2.0]) == math.inf
    assert snr_db([1.0, 0.0], [0.0, 0.0]) == pytest.approx(0.0)


# -- straight-through estimator -------------------------------------------------

def test_ste_identity_channel():
    x = torch.randn(100, requires_grad=True)
    y = ste_apply(x, x.detach().clone())
    assert torch.equal(y, x.detach())
    y.sum().backward()
    assert torch.equal(x.grad, torch.ones(100))


def test_ste_zero_decoded():
    x = torch.randn(100, requires_grad=True)
    y = ste_apply(x, torch.zeros(100))
    assert torch.count_nonzero(y) == 0
    y.sum().backward()
    assert torch.equal(x.grad, torch.ones(100))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_ste_gradient_equals_downstream_gradient(seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(64, generator=g, dtype=torch.float64, requires_grad=True)
    d = torch.randn(64, generator=g, dtype=torch.float64)
    loss = lambda v: (torch.sin(3 * v) * v.roll(1)).sum() + v.pow(4).mean()
    y = ste_apply(x, d)
    assert torch.equal(y, d)
    loss(y).backward()
    u = d.clone().requires_grad_(True)
    loss(u).backward()
    assert (x.grad - u.grad).abs().max() < 1e-6


def test_ste_shape_mismatch():
    with pytest.raises(ValueError):
        ste_apply(torch.zeros(3), torch.zeros(4))


# -- pool and batch augmentation -------------------------------------------------------

def test_pool_identity_passthrough():
    x = torch.randn(2, 3000)
    out, spec = channel_augment(x, AugmentationPool(["none"]), differentiable=False)
    assert torch.equal(out, x) and spec.lossless


def test_pool_uniform_frequencies():
    specs = [f"{c}@{b}" for c in ("mp3", "opus") for b in (16, 32, 64, 128)]
    pool = AugmentationPool(specs, seed=123)
    draws = [str(pool.sample()) for _ in range(10_000)]
    for s in specs:
        assert 0.10 <= draws.count(s) / 10_000 <= 0.15


def test_pool_deterministic():
    a = AugmentationPool(["mp3@16", "opus@64", "none"], seed=5)
    b = AugmentationPool(["mp3@16", "opus@64", "none"], seed=5)
    assert [a.sample() for _ in range(50)] == [b.sample() for _ in range(50)]


def test_pool_empty():
    with pytest.raises(ValueError):
        AugmentationPool([])


def test_augment_same_spec_for_batch_and_gradient():
    x = (0.3 * torch.randn(2, 4096)).requires_grad_(True)
    out, spec = channel_augment(x, AugmentationPool(["mp3@64"]), differentiable=True)
    assert str(spec) == "mp3@64"
    (out ** 2).sum().backward()
    assert x.grad is not None and torch.isfinite(x.grad).all()
    # the gradient is copied from the decoded signal: d/dx sum(x_tilde^2) = 2 * decoded
    torch.testing.assert_close(x.grad, 2 * out.detach())


def test_augment_real_path_is_detached():
    x = (0.3 * torch.randn(1, 4096)).requires_grad_(True)
    out, _ = channel_augment(x, CodecSpec.parse("opus@32"), differentiable=False)
    assert not out.requires_grad


# -- neural codec -----------------------------------------------------------------------

def test_rvq_exact_codeword_has_zero_residual():
    vq = ResidualVQ(dim=4, n_stages=2, codebook_size=8)
    z = torch.randn(1, 4, 3)
    with torch.no_grad():
        vq.codebooks[0][5] = z[0, :, 1]
    _, codes, residual = vq.quantize(z)
    assert codes[0][1] == 5
    # second stage picks the codeword closest to zero; the frame's first-stage residual is zero
    q, _, _ = vq.quantize(z)
    first_stage = vq.codebooks[0][codes[0]].T[None]
    assert torch.equal(z[0, :, 1] - first_stage[0, :, 1], torch.zeros(4))


def test_rvq_gradient_is_straight_through():
    vq = ResidualVQ(dim=4)
    z = torch.randn(2, 4, 5, requires_grad=True)
    w = torch.randn(2, 4, 5)
    q, _, _ = vq(z)
    (q * w).sum().backward()
    torch.testing.assert_close(z.grad, w)


def test_neural_codec_shapes_and_gradient():
    codec = RvqCodec()
    x = (0.1 * torch.randn(2, 3000)).requires_grad_(True)
    y = codec(x)
    assert y.shape == x.shape
    y.pow(2).sum().backward()
    assert torch.isfinite(x.grad).all() and x.grad.abs().sum() > 0
    r = neural_codec_roundtrip(Waveform(x[0].detach(), SR), codec)
    assert r.delay_samples == 0 and len(r.output) == 3000


def test_neural_codec_training_improves_snr():
    rng = np.random.default_rng(0)
    from collabwm.training import synth_clip
    clips = [torch.from_numpy(synth_clip(rng).astype(np.float32)) for _ in range(100)]
    codec = RvqCodec(seed=0)
    probe = clips[:5]

    def mean_snr(model):
        with torch.no_grad():
            return np.mean([neural_codec_roundtrip(Waveform(c, SR), model).snr_db for c in probe])

    before = mean_snr(codec)
    train_rvq_codec(codec, clips, steps=150, seed=0)
    after = mean_snr(codec)
    assert codec.trained
    assert after > before


def test_channel_with_neural_codec_is_differentiable():
    codec = RvqCodec()
    x = (0.1 * torch.randn(2, 2048)).requires_grad_(True)
    out, spec = channel_augment(x, CodecSpec.parse("neural@8"), differentiable=True, neural_codec=codec)
    out.sum().backward()
    assert x.grad is not None
    out, _ = channel_augment(x, CodecSpec.parse("neural@8"), differentiable=False, neural_codec=codec)
    assert not out.requires_grad
