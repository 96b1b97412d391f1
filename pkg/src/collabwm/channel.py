"""Codec channel: black-box codec round-trips, alignment, STE and a toy RVQ codec."""

from __future__ import annotations

import logging
import math
import os
import shutil
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.signal import correlate

from .audio import Waveform, crop_or_pad, load_wav, save_wav

logger = logging.getLogger(__name__)

CODEC_SAMPLE_RATE = 22050
ALIGN_WINDOW = 4096
MIN_ALIGN_CORR = 0.1
BITRATES = (8, 16, 32, 64, 128)
VORBIS_QUALITIES = (1, 2, 3)


class CodecError(RuntimeError):
    """Raised when the external codec process is missing or fails."""


class CodecKind(str, Enum):
    NONE = "none"
    MP3 = "mp3"
    OPUS = "ogg_opus"
    VORBIS = "ogg_vorbis"
    NEURAL = "neural_rvq"


_SHORT_NAMES = {
    CodecKind.NONE: "none",
    CodecKind.MP3: "mp3",
    CodecKind.OPUS: "opus",
    CodecKind.VORBIS: "vorbis",
    CodecKind.NEURAL: "neural",
}
_FROM_SHORT = {v: k for k, v in _SHORT_NAMES.items()} | {k.value: k for k in CodecKind}


@dataclass(frozen=True)
class CodecSpec:
    """One channel condition.

    MP3 and Opus take a constant ``bitrate`` in kbps, Vorbis takes a
    ``quality`` scale, the neural codec is fixed at 8 kbps and ``none`` takes
    neither.
    """

    kind: CodecKind
    bitrate: Optional[int] = None
    quality: Optional[int] = None
    sample_rate: int = CODEC_SAMPLE_RATE

    def __post_init__(self):
        kind = CodecKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is CodecKind.NONE:
            ok = self.bitrate is None and self.quality is None
        elif kind is CodecKind.VORBIS:
            ok = self.bitrate is None and self.quality in VORBIS_QUALITIES
        elif kind is CodecKind.NEURAL:
            ok = self.bitrate == 8 and self.quality is None
        else:
            ok = self.quality is None and self.bitrate in BITRATES
        if not ok:
            raise ValueError(f"invalid rate parameters for {kind.value}: "
                             f"bitrate={self.bitrate}, quality={self.quality}")

    @classmethod
    def parse(cls, text: str) -> "CodecSpec":
        """Parse ``none``, ``mp3@64``, ``opus@16``, ``vorbis@q2`` or ``neural@8``."""
        name, _, rate = text.strip().lower().partition("@")
        if name not in _FROM_SHORT:
            raise ValueError(f"unknown codec {name!r}")
        kind = _FROM_SHORT[name]
        if kind is CodecKind.NONE:
            if rate:
                raise ValueError("codec 'none' takes no rate parameter")
            return cls(kind)
        if not rate:
            raise ValueError(f"codec {name!r} needs a rate, e.g. {name}@{'q1' if kind is CodecKind.VORBIS else 64}")
        if kind is CodecKind.VORBIS:
            return cls(kind, quality=int(rate.lstrip("q")))
        return cls(kind, bitrate=int(rate))

    def __str__(self) -> str:
        name = _SHORT_NAMES[self.kind]
        if self.kind is CodecKind.NONE:
            return name
        if self.kind is CodecKind.VORBIS:
            return f"{name}@q{self.quality}"
        return f"{name}@{self.bitrate}"

    @property
    def lossless(self) -> bool:
        return self.kind is CodecKind.NONE


@dataclass
class ChannelResult:
    output: Waveform
    delay_samples: int
    snr_db: float
    spec: CodecSpec


@dataclass
class AugmentationPool:
    """Uniform sampler over codec conditions, one draw per minibatch."""

    specs: list
    seed: int = 0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.specs = [s if isinstance(s, CodecSpec) else CodecSpec.parse(s) for s in self.specs]
        if not self.specs:
            raise ValueError("augmentation pool must contain at least one codec spec")
        self.rng = np.random.default_rng(self.seed)

    def sample(self) -> CodecSpec:
        return self.specs[int(self.rng.integers(len(self.specs)))]

    def get_state(self) -> dict:
        return self.rng.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state


# ---------------------------------------------------------------------------
# external codec process
# ---------------------------------------------------------------------------

def codec_binary() -> str:
    """Locate the ffmpeg-compatible binary: ``$CODEC_BIN``, imageio-ffmpeg, then ``PATH``."""
    env = os.environ.get("CODEC_BIN")
    if env:
        return env
    try:
        import imageio_ffmpeg
        return imageio_ffmpeg.get_ffmpeg_exe()
    except (ImportError, RuntimeError):
        pass
    found = shutil.which("ffmpeg")
    if found is None:
        raise CodecError("no codec binary found; install imageio-ffmpeg or set CODEC_BIN")
    return found


def _encoder_args(spec: CodecSpec) -> tuple[list[str], str]:
    if spec.kind is CodecKind.MP3:
        return ["-c:a", "libmp3lame", "-b:a", f"{spec.bitrate}k"], ".mp3"
    if spec.kind is CodecKind.OPUS:
        return ["-c:a", "libopus", "-b:a", f"{spec.bitrate}k"], ".ogg"
    if spec.kind is CodecKind.VORBIS:
        return ["-c:a", "libvorbis", "-q:a", str(spec.quality)], ".ogg"
    raise ValueError(f"{spec.kind.value} is not an external codec")


def _run(cmd: list[str]) -> None:
    try:
        proc = subprocess.run(cmd, capture_output=True, text=True)
    except OSError as e:
        raise CodecError(f"cannot start codec process {cmd[0]!r}: {e}") from e
    if proc.returncode != 0:
        raise CodecError(f"codec process exited with {proc.returncode}: {' '.join(cmd)}\n"
                         f"{proc.stderr.strip()}")


def external_roundtrip(x: np.ndarray, spec: CodecSpec) -> np.ndarray:
    """Encode and decode a mono signal with the external codec; returns the raw decoded signal."""
    binary = codec_binary()
    args, suffix = _encoder_args(spec)
    base = [binary, "-hide_banner", "-nostdin", "-loglevel", "error", "-y"]
    with tempfile.TemporaryDirectory(prefix="collabwm-codec-") as tmp:
        src = Path(tmp) / "in.wav"
        enc = Path(tmp) / f"enc{suffix}"
        dec = Path(tmp) / "out.wav"
        save_wav(Waveform(torch.from_numpy(np.asarray(x, dtype=np.float32)), spec.sample_rate), src)
        _run(base + ["-i", str(src)] + args + [str(enc)])
        # ffmpeg's native opus decoder mangles some low-bitrate streams; force libopus
        decoder = ["-c:a", "libopus"] if spec.kind is CodecKind.OPUS else []
        _run(base + decoder + ["-i", str(enc), "-ar", str(spec.sample_rate), "-ac", "1",
                     "-c:a", "pcm_f32le", str(dec)])
        return load_wav(dec).samples.numpy()


def align(x: np.ndarray, decoded: np.ndarray, max_lag: int = ALIGN_WINDOW) -> tuple[np.ndarray, int]:
    """Shift ``decoded`` onto ``x`` by the cross-correlation peak and trim/pad to ``len(x)``.

    Returns the aligned signal and the delay (positive when ``decoded`` lags).
    """
    n = len(x)
    if len(decoded) == 0:
        return np.zeros_like(x), 0
    corr = correlate(decoded, x, mode="full", method="fft")
    lags = np.arange(-(n - 1), len(decoded))
    keep = np.abs(lags) <= max_lag
    corr, lags = corr[keep], lags[keep]
    best = int(np.argmax(corr))
    delay = int(lags[best])
    energy = math.sqrt(float(np.dot(x, x)) * float(np.dot(decoded, decoded)))
    if energy == 0 or corr[best] / energy < MIN_ALIGN_CORR:
        if energy > 0:
            logger.warning("alignment correlation %.3f below %.1f; assuming zero delay",
                           corr[best] / energy, MIN_ALIGN_CORR)
        delay = 0
    if delay >= 0:
        out = decoded[delay:delay + n]
    else:
        out = np.concatenate([np.zeros(-delay, dtype=decoded.dtype), decoded[:n + delay]])
    if len(out) < n:
        out = np.concatenate([out, np.zeros(n - len(out), dtype=decoded.dtype)])
    return out.astype(x.dtype, copy=False), delay


def snr_db(x, x_hat) -> float:
    """10 log10 of signal over error energy; ``inf`` when the error is exactly zero."""
    x = np.asarray(x, dtype=np.float64)
    err = float(np.sum((x - np.asarray(x_hat, dtype=np.float64)) ** 2))
    sig = float(np.sum(x ** 2))
    if err == 0:
        return math.inf
    if sig == 0:
        return -math.inf
    return 10 * math.log10(sig / err)


def codec_roundtrip(w: Waveform, spec: CodecSpec, neural_codec: "RvqCodec | None" = None) -> ChannelResult:
    """Pass a mono waveform through ``spec`` and align the result to the input."""
    if w.sample_rate != spec.sample_rate:
        raise ValueError(f"waveform at {w.sample_rate} Hz, codec expects {spec.sample_rate} Hz")
    if w.samples.dim() != 1:
        raise ValueError("codec_roundtrip expects a mono 1-D waveform")
    if spec.kind is CodecKind.NONE:
        return ChannelResult(w, 0, math.inf, spec)
    if spec.kind is CodecKind.NEURAL:
        if neural_codec is None:
            raise ValueError("neural codec condition requires an RvqCodec instance")
        return neural_codec_roundtrip(w, neural_codec)
    x = w.samples.detach().cpu().numpy().astype(np.float32)
    decoded = external_roundtrip(x, spec)
    aligned, delay = align(x, decoded)
    out = torch.from_numpy(aligned).to(dtype=w.samples.dtype, device=w.samples.device)
    return ChannelResult(Waveform(out, w.sample_rate), delay, snr_db(x, aligned), spec)


# ---------------------------------------------------------------------------
# straight-through estimator
# ---------------------------------------------------------------------------

def ste_apply(x: torch.Tensor, decoded: torch.Tensor) -> torch.Tensor:
    """Forward ``decoded``; backward copies the incoming gradient onto ``x``.

    ``x - x.detach()`` is exactly zero in the forward pass, so the output
    equals ``decoded`` bit for bit while its gradient w.r.t. ``x`` is the
    identity.
    """
    if x.shape != decoded.shape:
        raise ValueError(f"shape mismatch: x {tuple(x.shape)} vs decoded {tuple(decoded.shape)}")
    return decoded.detach() + (x - x.detach())


def channel_augment(x: torch.Tensor, pool_or_spec, differentiable: bool,
                    neural_codec: "RvqCodec | None" = None, workers: int = 1,
                    sample_rate: int = CODEC_SAMPLE_RATE) -> tuple[torch.Tensor, CodecSpec]:
    """Apply one codec condition to every element of a ``(B, T)`` batch.

    ``pool_or_spec`` is either an :class:`AugmentationPool` (one draw for the
    whole batch) or a fixed :class:`CodecSpec`. With ``differentiable`` the
    result carries STE gradients back to ``x``; otherwise it is detached.
    """
    spec = pool_or_spec.sample() if isinstance(pool_or_spec, AugmentationPool) else pool_or_spec
    if x.dim() != 2 or x.shape[0] == 0:
        raise ValueError("channel_augment expects a non-empty (batch, time) tensor")
    if spec.kind is CodecKind.NONE:
        return (x if differentiable else x.detach()), spec
    if spec.kind is CodecKind.NEURAL:
        if neural_codec is None:
            raise ValueError("neural codec condition requires an RvqCodec instance")
        if differentiable:
            return neural_codec(x), spec
        with torch.no_grad():
            return neural_codec(x), spec

    def one(row: torch.Tensor) -> torch.Tensor:
        return codec_roundtrip(Waveform(row.detach(), sample_rate), spec).output.samples

    rows = list(x)
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            decoded = list(ex.map(one, rows))
    else:
        decoded = [one(r) for r in rows]
    decoded = torch.stack(decoded)
    if differentiable:
        return ste_apply(x, decoded), spec
    return decoded, spec


# ---------------------------------------------------------------------------
# toy neural codec with residual vector quantisation
# ---------------------------------------------------------------------------

class ResidualVQ(nn.Module):
    """Cascade of nearest-neighbour codebooks, each coding the previous residual."""

    def __init__(self, dim: int = 8, n_stages: int = 2, codebook_size: int = 256):
        super().__init__()
        self.codebooks = nn.ParameterList(
            [nn.Parameter(torch.randn(codebook_size, dim) * 0.1) for _ in range(n_stages)])

    def quantize(self, z: torch.Tensor):
        """Hard quantisation of ``z`` of shape ``(B, dim, frames)``.

        Returns the summed codewords, the per-stage codes and the final residual.
        """
        flat = z.transpose(1, 2).reshape(-1, z.shape[1])
        residual = flat
        total = torch.zeros_like(flat)
        codes = []
        for cb in self.codebooks:
            idx = torch.cdist(residual, cb).argmin(dim=1)
            q = cb[idx]
            total = total + q
            residual = residual - q
            codes.append(idx)
        shape = (z.shape[0], z.shape[2], z.shape[1])
        return total.reshape(shape).transpose(1, 2), codes, residual.reshape(shape).transpose(1, 2)

    def forward(self, z: torch.Tensor):
        q, codes, _ = self.quantize(z)
        commit = F.mse_loss(z, q.detach())
        codebook = F.mse_loss(q, z.detach())
        # STE through the codebook lookup
        return z + (q - z).detach(), codes, commit + codebook


class RvqCodec(nn.Module):
    """Convolutional encoder (total stride 256), 2-stage RVQ, convolutional decoder."""

    def __init__(self, strides: Sequence[int] = (4, 4, 4, 4), widths: Sequence[int] = (16, 32, 32, 64, 64),
                 latent_dim: int = 8, n_stages: int = 2, codebook_size: int = 256, seed: int = 0):
        super().__init__()
        self.strides = tuple(strides)
        self.hop = int(np.prod(strides))
        self.register_buffer("_trained", torch.zeros((), dtype=torch.bool))
        gen = torch.Generator().manual_seed(seed)
        enc = [nn.Conv1d(1, widths[0], 7, padding=3)]
        for s, c_in, c_out in zip(strides, widths[:-1], widths[1:]):
            enc += [nn.LeakyReLU(0.1), nn.Conv1d(c_in, c_out, 2 * s, stride=s, padding=s // 2)]
        enc += [nn.LeakyReLU(0.1), nn.Conv1d(widths[-1], latent_dim, 3, padding=1)]
        self.encoder = nn.Sequential(*enc)
        dec = [nn.Conv1d(latent_dim, widths[-1], 7, padding=3)]
        for s, c_in, c_out in zip(reversed(strides), widths[:0:-1], widths[-2::-1]):
            dec += [nn.LeakyReLU(0.1), nn.ConvTranspose1d(c_in, c_out, 2 * s, stride=s, padding=s // 2)]
        dec += [nn.LeakyReLU(0.1), nn.Conv1d(widths[0], 1, 7, padding=3)]
        self.decoder = nn.Sequential(*dec)
        self.quantizer = ResidualVQ(latent_dim, n_stages, codebook_size)
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, (nn.Conv1d, nn.ConvTranspose1d)):
                    # fan-in scaling; a fixed small std starves a 12-layer autoencoder of signal
                    nn.init.kaiming_normal_(m.weight, a=0.1, generator=gen)
                    m.bias.zero_()
            for cb in self.quantizer.codebooks:
                cb.normal_(0.0, 0.1, generator=gen)

    @property
    def trained(self) -> bool:
        return bool(self._trained)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        n = x.shape[-1]
        pad = (-n) % self.hop
        return self.encoder(F.pad(x.reshape(-1, 1, n), (0, pad)))

    def forward_with_loss(self, x: torch.Tensor):
        shape = x.shape
        z = self.encode(x)
        q, _, vq_loss = self.quantizer(z)
        y = self.decoder(q)[:, 0, :shape[-1]]
        return y.reshape(shape), vq_loss

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_with_loss(x)[0]


def neural_codec_roundtrip(w: Waveform, model: RvqCodec) -> ChannelResult:
    """Round-trip through the toy neural codec; differentiable, zero delay."""
    if not model.trained:
        logger.info("neural codec round-trip with an untrained (randomly initialised) model")
    out = model(w.samples)
    return ChannelResult(Waveform(out, w.sample_rate), 0, snr_db(w.samples.detach().numpy(), out.detach().numpy()),
                         CodecSpec(CodecKind.NEURAL, bitrate=8, sample_rate=w.sample_rate))


def train_rvq_codec(model: RvqCodec, clips: Sequence[torch.Tensor], steps: int = 200,
                    crop_len: int = 8192, batch_size: int = 8, lr: float = 1e-3, seed: int = 0) -> list[float]:
    """Fit the toy codec by waveform MSE plus VQ commitment losses. Returns per-step losses."""
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    with torch.no_grad():
        # data-dependent codebook init: first stage from encoder outputs
        batch = torch.stack([crop_or_pad(clips[i], crop_len, rng) for i in rng.integers(len(clips), size=batch_size)])
        z = model.encode(batch).transpose(1, 2).reshape(-1, model.quantizer.codebooks[0].shape[1])
        residual = z
        for cb in model.quantizer.codebooks:
            pick = residual[torch.from_numpy(rng.integers(len(residual), size=cb.shape[0]))]
            cb.copy_(pick)
            residual = residual - cb[torch.cdist(residual, cb).argmin(dim=1)]
    history = []
    for _ in range(steps):
        idx = rng.integers(len(clips), size=batch_size)
        batch = torch.stack([crop_or_pad(clips[i], crop_len, rng) for i in idx])
        y, vq_loss = model.forward_with_loss(batch)
        loss = F.mse_loss(y, batch) / batch.pow(2).mean().clamp_min(1e-8) + 0.25 * vq_loss
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
    model._trained.fill_(True)
    return history
