"""Toy-scale generator, discriminator ensemble and watermark detector."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio import MelParams, log_mel, resample

LRELU_SLOPE = 0.1
DETECTOR_RATE = 16000


@dataclass
class GeneratorConfig:
    upsample_factors: list = field(default_factory=lambda: [8, 8, 2, 2])
    base_width: int = 128
    upsample_kernels: list = field(default_factory=lambda: [16, 16, 4, 4])
    resblock_kernel: int = 3
    resblock_dilations: list = field(default_factory=lambda: [1, 3])
    n_mels: int = 80
    # 0.01 leaves the output below the mel log floor at this width; see README
    init_std: float = 0.05
    seed: int = 0

    @property
    def hop(self) -> int:
        return math.prod(self.upsample_factors)


@dataclass
class DiscriminatorConfig:
    mpd_periods: list = field(default_factory=lambda: [2, 3])
    msd_scales: int = 1
    widths: list = field(default_factory=lambda: [8, 16, 32])
    seed: int = 1

    def __post_init__(self):
        if len(set(self.mpd_periods)) != len(self.mpd_periods) or any(p < 2 for p in self.mpd_periods):
            raise ValueError("mpd_periods must be pairwise distinct and >= 2")


@dataclass
class DetectorConfig:
    frontend: str = "log-mel-conv"
    widths: list = field(default_factory=lambda: [8, 16, 16, 32])
    input_rate: int = DETECTOR_RATE
    source_rate: int = 22050
    n_fft: int = 512
    hop: int = 160
    n_mels: int = 40
    # 0.01 shrinks the 5-layer stack's output by ~1e-6 and the detector never leaves a constant score
    init_std: float = 0.1
    seed: int = 2

    def __post_init__(self):
        if self.frontend != "log-mel-conv":
            raise ValueError(f"unsupported detector frontend {self.frontend!r}")

    @property
    def mel(self) -> MelParams:
        return MelParams(sample_rate=self.input_rate, n_fft=self.n_fft, hop=self.hop, win=self.n_fft,
                         n_mels=self.n_mels, f_min=0.0, f_max=self.input_rate / 2)


def init_weights(module: nn.Module, seed: int, std: float = 0.01) -> None:
    """normal(0, std) for every conv weight, zero biases, drawn from a seeded generator."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv1d, nn.Conv2d, nn.ConvTranspose1d)):
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * std)
                if m.bias is not None:
                    m.bias.zero_()


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------

class ResBlock(nn.Module):
    def __init__(self, channels: int, kernel: int, dilations: Sequence[int]):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv1d(channels, channels, kernel, dilation=d, padding=d * (kernel - 1) // 2)
            for d in dilations)

    def forward(self, x):
        for conv in self.convs:
            x = x + conv(F.leaky_relu(x, LRELU_SLOPE))
        return x


class Generator(nn.Module):
    """Log-mel to waveform: input conv, transposed-conv upsampling with residual blocks, tanh output."""

    def __init__(self, cfg: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.cfg = cfg
        w = cfg.base_width
        self.conv_pre = nn.Conv1d(cfg.n_mels, w, 7, padding=3)
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        for u, k in zip(cfg.upsample_factors, cfg.upsample_kernels):
            if (k - u) % 2:
                raise ValueError(f"upsample kernel {k} and factor {u} must have equal parity")
            self.ups.append(nn.ConvTranspose1d(w, w // 2, k, stride=u, padding=(k - u) // 2))
            w //= 2
            self.blocks.append(ResBlock(w, cfg.resblock_kernel, cfg.resblock_dilations))
        self.conv_post = nn.Conv1d(w, 1, 7, padding=3)
        init_weights(self, cfg.seed, cfg.init_std)

    @property
    def hop(self) -> int:
        return self.cfg.hop

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        """``(B, n_mels, T)`` log-mel -> ``(B, T * hop)`` waveform."""
        if mel.dim() != 3 or mel.shape[1] != self.cfg.n_mels:
            raise ValueError(f"expected (batch, {self.cfg.n_mels}, frames), got {tuple(mel.shape)}")
        x = self.conv_pre(mel)
        for up, block in zip(self.ups, self.blocks):
            x = block(up(F.leaky_relu(x, LRELU_SLOPE)))
        x = self.conv_post(F.leaky_relu(x))
        return torch.tanh(x)[:, 0]


# ---------------------------------------------------------------------------
# discriminators
# ---------------------------------------------------------------------------

class PeriodDiscriminator(nn.Module):
    def __init__(self, period: int, widths: Sequence[int]):
        super().__init__()
        self.period = period
        chans = [1, *widths]
        self.convs = nn.ModuleList(
            nn.Conv2d(c_in, c_out, (5, 1), stride=(3, 1), padding=(2, 0))
            for c_in, c_out in zip(chans[:-1], chans[1:]))
        self.conv_post = nn.Conv2d(chans[-1], 1, (3, 1), padding=(1, 0))

    def forward(self, x):
        b, n = x.shape
        pad = (-n) % self.period
        if pad:
            x = F.pad(x[:, None], (0, pad), mode="reflect" if pad < n else "constant")[:, 0]
        x = x.reshape(b, 1, -1, self.period)
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), LRELU_SLOPE)
            feats.append(x)
        x = self.conv_post(x)
        feats.append(x)
        return x.flatten(1), feats


class ScaleDiscriminator(nn.Module):
    def __init__(self, widths: Sequence[int]):
        super().__init__()
        chans = [1, *widths]
        self.convs = nn.ModuleList(
            nn.Conv1d(c_in, c_out, 15 if i == 0 else 41, stride=1 if i == 0 else 4,
                      padding=7 if i == 0 else 20, groups=1 if i == 0 else min(4, c_in))
            for i, (c_in, c_out) in enumerate(zip(chans[:-1], chans[1:])))
        self.conv_post = nn.Conv1d(chans[-1], 1, 3, padding=1)

    def forward(self, x):
        x = x[:, None]
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), LRELU_SLOPE)
            feats.append(x)
        x = self.conv_post(x)
        feats.append(x)
        return x.flatten(1), feats


class Discriminator(nn.Module):
    """MPD sub-discriminators followed by MSD sub-discriminators (average-pooled per scale)."""

    def __init__(self, cfg: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.cfg = cfg
        self.subs = nn.ModuleList(
            [PeriodDiscriminator(p, cfg.widths) for p in cfg.mpd_periods]
            + [ScaleDiscriminator(cfg.widths) for _ in range(cfg.msd_scales)])
        init_weights(self, cfg.seed)

    def forward(self, x: torch.Tensor):
        """Returns per-sub-discriminator score maps and hidden activations."""
        scores, feats = [], []
        n_mpd = len(self.cfg.mpd_periods)
        for i, sub in enumerate(self.subs):
            inp = x
            if i > n_mpd:
                inp = F.avg_pool1d(x[:, None], 4, 2, padding=2)[:, 0]
                for _ in range(i - n_mpd - 1):
                    inp = F.avg_pool1d(inp[:, None], 4, 2, padding=2)[:, 0]
            s, f = sub(inp)
            scores.append(s)
            feats.append(f)
        return scores, feats


# ---------------------------------------------------------------------------
# watermark detector
# ---------------------------------------------------------------------------

class Detector(nn.Module):
    """Whole-waveform real/generated scorer: 16 kHz log-mel, 2-D convs, mean pooling.

    Contains no normalisation or dropout layers. Higher scores mean "real".
    """

    def __init__(self, cfg: DetectorConfig = DetectorConfig()):
        super().__init__()
        self.cfg = cfg
        self.mel_params = cfg.mel
        chans = [1, *cfg.widths]
        self.convs = nn.ModuleList(
            nn.Conv2d(c_in, c_out, 3, stride=2 if i else 1, padding=1)
            for i, (c_in, c_out) in enumerate(zip(chans[:-1], chans[1:])))
        self.head = nn.Conv2d(chans[-1], 1, 1)
        init_weights(self, cfg.seed, cfg.init_std)

    def min_length(self) -> int:
        """Shortest input (at the source rate) yielding one frontend frame."""
        return math.ceil(self.mel_params.win * self.cfg.source_rate / self.cfg.input_rate)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``(B, T)`` or ``(T,)`` waveform at the source rate -> ``(B,)`` or scalar scores."""
        squeeze = x.dim() == 1
        if squeeze:
            x = x[None]
        if x.shape[-1] < self.min_length():
            raise ValueError(f"input of {x.shape[-1]} samples is too short for one detector frame "
                             f"(need {self.min_length()})")
        x = resample(x, self.cfg.source_rate, self.cfg.input_rate)
        h = log_mel(x, self.mel_params)[:, None]
        for conv in self.convs:
            h = F.leaky_relu(conv(h), LRELU_SLOPE)
        score = self.head(h).mean(dim=(1, 2, 3))
        return score[0] if squeeze else score


def count_norm_and_dropout(model: nn.Module) -> tuple[int, int]:
    """Number of normalisation layers (batch, group, layer, instance) and dropout layers."""
    norm_types = (nn.modules.batchnorm._BatchNorm, nn.GroupNorm, nn.LayerNorm,
                  nn.modules.instancenorm._InstanceNorm)
    drop_types = (nn.Dropout, nn.Dropout1d, nn.Dropout2d, nn.Dropout3d, nn.AlphaDropout)
    mods = list(model.modules())
    n_norm = sum(isinstance(m, norm_types) for m in mods)
    n_drop = sum(isinstance(m, drop_types) for m in mods)
    return n_norm, n_drop


# ---------------------------------------------------------------------------
# gradient clipping
# ---------------------------------------------------------------------------

def clip_gradient_norm(grads: Iterable[torch.Tensor | None], max_norm: float = 1.0) -> float:
    """Rescale ``grads`` in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    grads = [g for g in grads if g is not None]
    if not grads:
        return 0.0
    total = math.sqrt(sum(float(g.detach().double().pow(2).sum()) for g in grads))
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g.mul_(scale)
    return total


def clip_module_grads(module: nn.Module, max_norm: float = 1.0) -> float:
    return clip_gradient_norm((p.grad for p in module.parameters()), max_norm)


def grad_norm(module: nn.Module) -> float:
    return math.sqrt(sum(float(p.grad.double().pow(2).sum()) for p in module.parameters() if p.grad is not None))
