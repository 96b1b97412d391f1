"""Waveform container, WAV I/O, cropping, resampling and the mel frontend."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.io import wavfile

logger = logging.getLogger(__name__)


@dataclass
class Waveform:
    """Mono audio with its sample rate.

    ``samples`` is a float tensor whose last axis is time; leading batch
    axes are allowed.
    """

    samples: torch.Tensor
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.shape[-1] < 1:
            raise ValueError("waveform must contain at least one sample")

    def __len__(self) -> int:
        return self.samples.shape[-1]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class MelParams:
    sample_rate: int = 22050
    n_fft: int = 1024
    hop: int = 256
    win: int = 1024
    n_mels: int = 80
    f_min: float = 0.0
    f_max: float = 8000.0
    log_floor: float = 1e-5

    def __post_init__(self):
        if not self.hop <= self.win <= self.n_fft:
            raise ValueError("need hop <= win <= n_fft")
        if not 0 <= self.f_min < self.f_max <= self.sample_rate / 2:
            raise ValueError("need 0 <= f_min < f_max <= sample_rate / 2")
        if self.n_mels < 1 or self.log_floor <= 0:
            raise ValueError("n_mels must be >= 1 and log_floor > 0")


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------

def load_wav(path) -> Waveform:
    """Read a mono PCM/float WAV file into a float32 waveform in [-1, 1].

    Accepts 16-, 24- and 32-bit integer PCM and 32-bit float. Multi-channel
    files are rejected.
    """
    path = Path(path)
    try:
        sr, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except ValueError as e:
        raise ValueError(f"cannot read {path}: {e}") from e

    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        x = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        # scipy left-justifies 24-bit samples into int32
        x = (data.astype(np.float64) / 2.0**31).astype(np.float32)
    elif data.dtype == np.float32:
        x = data
    else:
        raise ValueError(f"{path}: unsupported WAV encoding {data.dtype} "
                         "(supported: int16, int24, int32, float32)")
    if data.size == 0:
        raise ValueError(f"{path}: empty audio payload")
    return Waveform(torch.from_numpy(np.ascontiguousarray(x)), int(sr))


def save_wav(w: Waveform, path) -> None:
    """Write ``w`` as 16-bit little-endian PCM. Out-of-range samples are clipped."""
    x = w.samples.detach().cpu().numpy().astype(np.float64)
    if x.ndim != 1:
        raise ValueError(f"save_wav expects a mono 1-D waveform, got shape {tuple(x.shape)}")
    peak = np.max(np.abs(x))
    if peak > 1.0:
        logger.warning("clipping waveform with peak amplitude %.3f to [-1, 1]", peak)
    x = np.clip(x, -1.0, 1.0)
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    wavfile.write(Path(path), w.sample_rate, pcm)


def quantize_16bit(x: torch.Tensor) -> torch.Tensor:
    """Snap amplitudes to the 16-bit PCM grid used by :func:`save_wav`."""
    return torch.clamp(torch.round(x.clamp(-1, 1) * 32768.0), -32768, 32767) / 32768.0


# ---------------------------------------------------------------------------
# cropping
# ---------------------------------------------------------------------------

def crop_or_pad(x: torch.Tensor, target_len: int, rng: np.random.Generator) -> torch.Tensor:
    """Random contiguous crop if longer than ``target_len``, zero-pad at the end if shorter."""
    if target_len <= 0:
        raise ValueError("target_len must be positive")
    n = x.shape[-1]
    if n > target_len:
        start = int(rng.integers(0, n - target_len + 1))
        return x[..., start:start + target_len]
    if n < target_len:
        return F.pad(x, (0, target_len - n))
    return x


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

@lru_cache(maxsize=16)
def _sinc_kernel(orig: int, new: int, zeros: int, rolloff: float, dtype: torch.dtype):
    # Hann-windowed sinc polyphase bank: one filter per output phase.
    base = min(orig, new) * rolloff
    width = math.ceil(zeros * orig / base)
    idx = torch.arange(-width, width + orig, dtype=torch.float64)[None] / orig
    t = -torch.arange(0, new, dtype=torch.float64)[:, None] / new + idx
    t = (t * base).clamp(-zeros, zeros)
    window = torch.cos(t * math.pi / zeros / 2) ** 2
    t = t * math.pi
    scale = base / orig
    kernel = torch.where(t == 0, torch.ones_like(t), torch.sin(t) / t) * window * scale
    return kernel.to(dtype)[:, None], width


def resample(x: torch.Tensor, orig_rate: int, new_rate: int,
             zeros: int = 6, rolloff: float = 0.99) -> torch.Tensor:
    """Band-limited resampling along the last axis; differentiable w.r.t. ``x``.

    The rate ratio is reduced by its gcd and a polyphase bank of ``new`` filters
    is applied with a strided convolution. The input is zero-padded by the
    filter half-width on both sides; output length is
    ``round(len * new_rate / orig_rate)``.
    """
    if orig_rate <= 0 or new_rate <= 0:
        raise ValueError("sample rates must be positive")
    if orig_rate == new_rate:
        return x
    g = math.gcd(orig_rate, new_rate)
    orig, new = orig_rate // g, new_rate // g

    kernel, width = _sinc_kernel(orig, new, zeros, rolloff, x.dtype)
    kernel = kernel.to(x.device)
    shape = x.shape
    n = shape[-1]
    y = x.reshape(-1, 1, n)
    y = F.pad(y, (width, width + orig))
    y = F.conv1d(y, kernel, stride=orig)  # (B, new, blocks)
    y = y.transpose(1, 2).reshape(y.shape[0], -1)
    out_len = int(round(n * new / orig))
    return y[..., :out_len].reshape(*shape[:-1], out_len)


# ---------------------------------------------------------------------------
# mel frontend
# ---------------------------------------------------------------------------

def _hz_to_mel(f):
    # Slaney scale: linear below 1 kHz, logarithmic above.
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    mels = f / f_sp
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    return np.where(f >= min_log_hz, min_log_mel + np.log(np.maximum(f, 1e-10) / min_log_hz) / logstep, mels)


def _mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    freqs = f_sp * m
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), freqs)


@lru_cache(maxsize=16)
def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int, f_min: float, f_max: float) -> np.ndarray:
    """Slaney-normalised triangular mel filterbank, shape ``(n_mels, n_fft // 2 + 1)``."""
    fft_freqs = np.linspace(0, sample_rate / 2, n_fft // 2 + 1)
    mel_pts = _mel_to_hz(np.linspace(_hz_to_mel(f_min), _hz_to_mel(f_max), n_mels + 2))
    fdiff = np.diff(mel_pts)
    ramps = mel_pts[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0, np.minimum(lower, upper))
    weights *= (2.0 / (mel_pts[2:n_mels + 2] - mel_pts[:n_mels]))[:, None]
    return weights


def num_frames(length: int, p: MelParams) -> int:
    """Frame count of :func:`mel_spectrogram` for a signal of ``length`` samples."""
    pad = (p.n_fft - p.hop) // 2
    return 1 + (length + 2 * pad - p.n_fft) // p.hop


def mel_spectrogram(x: torch.Tensor, p: MelParams) -> torch.Tensor:
    """Magnitude mel spectrogram ``(..., n_mels, frames)`` of ``x`` (no log).

    Padding convention: the signal is reflect-padded by ``(n_fft - hop) // 2``
    on both sides and framed without further centering, so with the default
    parameters ``frames == len // hop``.
    """
    if x.shape[-1] < p.win:
        raise ValueError(f"signal of {x.shape[-1]} samples is shorter than one window ({p.win})")
    shape = x.shape
    y = x.reshape(-1, shape[-1])
    pad = (p.n_fft - p.hop) // 2
    y = F.pad(y[:, None], (pad, pad), mode="reflect")[:, 0]
    window = torch.hann_window(p.win, dtype=x.dtype, device=x.device)
    spec = torch.stft(y, p.n_fft, hop_length=p.hop, win_length=p.win, window=window,
                      center=False, return_complex=True).abs()
    fb = torch.as_tensor(mel_filterbank(p.sample_rate, p.n_fft, p.n_mels, p.f_min, p.f_max),
                         dtype=x.dtype, device=x.device)
    mel = torch.matmul(fb, spec)
    return mel.reshape(*shape[:-1], p.n_mels, mel.shape[-1])


def log_mel(x: torch.Tensor, p: MelParams) -> torch.Tensor:
    return torch.log(torch.clamp(mel_spectrogram(x, p), min=p.log_floor))
