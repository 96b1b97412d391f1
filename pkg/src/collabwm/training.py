"""Three-player fine-tuning: discriminator, watermark detector and generator."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from scipy.signal import lfilter

from .audio import Waveform, crop_or_pad, load_wav, log_mel, save_wav
from .channel import AugmentationPool, RvqCodec, channel_augment
from .config import TrainingConfig, from_dict, to_dict
from .losses import (RoleMode, loss_discriminator, loss_feature_matching, loss_generator_adv,
                     loss_mel, loss_watermark, route_generator_loss)
from .models import Detector, Discriminator, Generator, clip_module_grads, grad_norm

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "collabwm-checkpoint"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    split: str
    entries: list  # [(path, duration_seconds)]

    def __post_init__(self):
        if self.split not in ("train", "dev", "test"):
            raise ValueError(f"unknown split {self.split!r}")
        self.entries = [(str(p), float(d)) for p, d in self.entries]

    def __len__(self):
        return len(self.entries)

    def save(self, path) -> None:
        """Write JSON; entries under the manifest's directory are stored relative to it."""
        root = Path(path).resolve().parent
        entries = []
        for p, d in self.entries:
            full = Path(p).resolve()
            rel = full.relative_to(root) if full.is_relative_to(root) else full
            entries.append({"path": str(rel), "duration": d})
        Path(path).write_text(json.dumps({"split": self.split, "entries": entries}, indent=1))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        data = json.loads(path.read_text())
        entries = []
        for e in data["entries"]:
            p = Path(e["path"])
            if not p.is_absolute():
                p = path.parent / p
            if not p.is_file():
                raise FileNotFoundError(f"manifest entry {p} is not readable")
            entries.append((str(p), e["duration"]))
        return cls(data["split"], entries)

    def load_clips(self) -> list[torch.Tensor]:
        return [load_wav(p).samples for p, _ in self.entries]


def check_disjoint(*manifests: DatasetManifest) -> None:
    seen = {}
    for m in manifests:
        for p, _ in m.entries:
            key = str(Path(p).resolve())
            if key in seen and seen[key] != m.split:
                raise ValueError(f"{p} appears in both {seen[key]} and {m.split} splits")
            seen[key] = m.split


def synth_clip(rng: np.random.Generator, sample_rate: int = 22050) -> np.ndarray:
    """One synthetic voiced-like clip: harmonic tone with vibrato and envelope plus filtered noise."""
    n = int(rng.uniform(1.0, 3.0) * sample_rate)
    t = np.arange(n) / sample_rate
    f0 = rng.uniform(90.0, 260.0)
    vib = 1 + rng.uniform(0.0, 0.03) * np.sin(2 * np.pi * rng.uniform(3, 7) * t)
    phase = 2 * np.pi * np.cumsum(f0 * vib) / sample_rate
    n_harm = int(min(40, (sample_rate / 2 - 200) // (f0 * 1.05)))
    tilt = rng.uniform(0.6, 1.2)
    x = np.zeros(n)
    for k in range(1, n_harm + 1):
        x += np.sin(k * phase + rng.uniform(0, 2 * np.pi)) / k ** tilt
    noise = rng.standard_normal(n)
    # one-pole lowpass on the noise component
    a = rng.uniform(0.3, 0.9)
    filt = lfilter([1 - a], [1, -a], noise)
    x = x / np.max(np.abs(x)) + rng.uniform(0.05, 0.3) * filt / np.max(np.abs(filt))
    n_seg = rng.integers(2, 6)
    knots = np.sort(rng.uniform(0, n, n_seg))
    env = 0.4 + 0.6 * np.abs(np.sin(np.pi * np.interp(np.arange(n), np.r_[0, knots, n], np.linspace(0, n_seg + 1, n_seg + 2)) / 2))
    fade = np.minimum(1.0, np.minimum(np.arange(n), n - 1 - np.arange(n)) / (0.01 * sample_rate))
    x = x * env * fade
    target_rms = rng.uniform(0.05, 0.2)
    x *= target_rms / np.sqrt(np.mean(x ** 2))
    return np.clip(x, -0.99, 0.99)


def make_toy_corpus(n: int, rng: np.random.Generator, out_dir, split: str = "train",
                    sample_rate: int = 22050) -> DatasetManifest:
    """Write ``n`` synthetic WAV clips plus ``manifest.json`` to ``out_dir``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n):
        x = synth_clip(rng, sample_rate)
        path = out_dir / f"{split}_{i:05d}.wav"
        save_wav(Waveform(torch.from_numpy(x.astype(np.float32)), sample_rate), path)
        entries.append((str(path), len(x) / sample_rate))
    manifest = DatasetManifest(split, entries)
    manifest.save(out_dir / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# trainer state
# ---------------------------------------------------------------------------

def _finite_or_raise(**terms):
    for name, value in terms.items():
        if not torch.isfinite(value).all():
            raise FloatingPointError(f"non-finite loss term {name!r} ({value.item()})")


class Trainer:
    """Owns the three models, their optimisers and every rng stream of a run."""

    def __init__(self, cfg: TrainingConfig, neural_codec: Optional[RvqCodec] = None):
        self.cfg = cfg
        self.generator = Generator(cfg.generator)
        self.discriminator = Discriminator(cfg.discriminator)
        self.detector = Detector(cfg.detector)
        if cfg.init_checkpoint:
            load_models(cfg.init_checkpoint, self.generator, self.discriminator, self.detector)
        self.neural_codec = neural_codec
        if self.neural_codec is None and cfg.neural_codec:
            self.neural_codec = load_neural_codec(cfg.neural_codec)
        if self.neural_codec is not None:
            self.neural_codec.requires_grad_(False)
        self.pool = AugmentationPool(cfg.pool, seed=cfg.seed)
        self.data_rng = np.random.default_rng([cfg.seed, 1])
        self.optimizers = {}
        self.schedulers = {}
        for name, model in self.models.items():
            opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=tuple(cfg.betas))
            self.optimizers[name] = opt
            self.schedulers[name] = torch.optim.lr_scheduler.LambdaLR(
                opt, lambda epoch, decay=cfg.lr_decay: decay ** epoch)
        self.step = 0
        self.epoch = 0

    @property
    def models(self) -> dict:
        return {"generator": self.generator, "discriminator": self.discriminator, "detector": self.detector}

    @property
    def lr(self) -> float:
        return self.optimizers["generator"].param_groups[0]["lr"]

    def end_epoch(self) -> None:
        self.epoch += 1
        for s in self.schedulers.values():
            s.step()

    # -- checkpointing ------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": to_dict(self.cfg),
            "models": {k: m.state_dict() for k, m in self.models.items()},
            "optimizers": {k: o.state_dict() for k, o in self.optimizers.items()},
            "schedulers": {k: s.state_dict() for k, s in self.schedulers.items()},
            "rng": {"pool": self.pool.get_state(), "data": self.data_rng.bit_generator.state,
                    "torch": torch.get_rng_state()},
            "step": self.step,
            "epoch": self.epoch,
        }

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(self.state_dict(), tmp)
        tmp.replace(path)

    @classmethod
    def from_checkpoint(cls, path, neural_codec: Optional[RvqCodec] = None) -> "Trainer":
        state = read_checkpoint(path)
        cfg = from_dict(TrainingConfig, state["config"])
        cfg.init_checkpoint = None
        trainer = cls(cfg, neural_codec)
        for k, m in trainer.models.items():
            m.load_state_dict(state["models"][k])
        for k, o in trainer.optimizers.items():
            o.load_state_dict(state["optimizers"][k])
        for k, s in trainer.schedulers.items():
            s.load_state_dict(state["schedulers"][k])
        trainer.pool.set_state(state["rng"]["pool"])
        trainer.data_rng.bit_generator.state = state["rng"]["data"]
        torch.set_rng_state(state["rng"]["torch"])
        trainer.step = state["step"]
        trainer.epoch = state["epoch"]
        return trainer


def read_checkpoint(path) -> dict:
    state = torch.load(path, map_location="cpu", weights_only=False)
    if state.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} archive")
    if state.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {state.get('version')}")
    return state


def load_models(path, generator=None, discriminator=None, detector=None) -> TrainingConfig:
    """Load model weights only (optimiser and scheduler state are not restored)."""
    state = read_checkpoint(path)
    for name, model in (("generator", generator), ("discriminator", discriminator), ("detector", detector)):
        if model is not None:
            model.load_state_dict(state["models"][name])
    return from_dict(TrainingConfig, state["config"])


def save_neural_codec(codec: RvqCodec, path) -> None:
    torch.save({"format": "collabwm-rvq", "version": 1, "strides": codec.strides,
                "state": codec.state_dict()}, path)


def load_neural_codec(path) -> RvqCodec:
    state = torch.load(path, map_location="cpu", weights_only=False)
    if state.get("format") != "collabwm-rvq":
        raise ValueError(f"{path} is not a neural codec archive")
    codec = RvqCodec(strides=state["strides"])
    codec.load_state_dict(state["state"])
    return codec


# ---------------------------------------------------------------------------
# one step
# ---------------------------------------------------------------------------

def train_step(trainer: Trainer, batch: torch.Tensor) -> dict:
    """One update of D, then WM, then G on a ``(B, crop_len)`` batch. Returns step metrics."""
    cfg = trainer.cfg
    G, D, WM = trainer.generator, trainer.discriminator, trainer.detector
    opt = trainer.optimizers
    if batch.shape[-1] != cfg.crop_len:
        raise ValueError(f"batch length {batch.shape[-1]} != crop_len {cfg.crop_len}")
    x_real = batch

    # (1) generate
    with torch.no_grad():
        mel_in = log_mel(x_real, cfg.mel)
    x_gen = G(mel_in)

    # (2) discriminator
    d_real, _ = D(x_real)
    d_gen, _ = D(x_gen.detach())
    loss_d = loss_discriminator(d_real, d_gen)
    _finite_or_raise(loss_d=loss_d)
    opt["discriminator"].zero_grad(set_to_none=True)
    loss_d.backward(inputs=list(D.parameters()))
    gn_d = clip_module_grads(D, cfg.clip_norm)
    opt["discriminator"].step()

    # (3) codec channel: one spec for the whole batch
    spec = trainer.pool.sample()
    x_hat_real, _ = channel_augment(x_real, spec, differentiable=False,
                                    neural_codec=trainer.neural_codec, workers=cfg.codec_workers)
    x_tilde_gen, _ = channel_augment(x_gen, spec, differentiable=True,
                                     neural_codec=trainer.neural_codec, workers=cfg.codec_workers)

    # (4) watermark detector
    wm_real = WM(x_hat_real)
    wm_gen = WM(x_tilde_gen.detach())
    loss_wm = loss_watermark(wm_real, wm_gen)
    _finite_or_raise(loss_wm=loss_wm)
    opt["detector"].zero_grad(set_to_none=True)
    loss_wm.backward(inputs=list(WM.parameters()))
    gn_wm = clip_module_grads(WM, cfg.clip_norm)
    opt["detector"].step()

    # (5) generator
    _, f_real = D(x_real)
    d_gen, f_gen = D(x_gen)
    f_real = [[f.detach() for f in sub] for sub in f_real]
    adv = loss_generator_adv(d_gen)
    fm = loss_feature_matching(f_real, f_gen, cfg.weights.fm_distance)
    mel = loss_mel(x_real, x_gen, cfg.mel)
    if trainer.cfg.role is RoleMode.COLLABORATOR:
        with torch.no_grad():
            wm_real_g = WM(x_hat_real)
        g_wm = loss_watermark(wm_real_g, WM(x_tilde_gen))
    else:
        g_wm = loss_wm.detach()
    total = route_generator_loss(cfg.role, adv, fm, mel, g_wm, cfg.weights)
    _finite_or_raise(loss_g_adv=adv, loss_g_fm=fm, loss_g_mel=mel, loss_g_wm=g_wm)
    opt["generator"].zero_grad(set_to_none=True)
    total.backward(inputs=list(G.parameters()))
    gn_g = grad_norm(G)
    opt["generator"].step()

    trainer.step += 1
    return {
        "step": trainer.step,
        "epoch": trainer.epoch,
        "lr": trainer.lr,
        "codec": str(spec),
        "loss_d": loss_d.item(),
        "loss_wm": loss_wm.item(),
        "loss_g_adv": adv.item(),
        "loss_g_fm": fm.item(),
        "loss_g_mel": mel.item(),
        "loss_g_wm": g_wm.item(),
        "loss_g_total": total.item(),
        "grad_norm_d": gn_d,
        "grad_norm_wm": gn_wm,
        "grad_norm_g": gn_g,
    }


# ---------------------------------------------------------------------------
# epoch loop
# ---------------------------------------------------------------------------

def epoch_batches(trainer: Trainer, clips: list) -> list[torch.Tensor]:
    """Shuffle clips and crop/pad into batches using the trainer's data rng."""
    cfg = trainer.cfg
    rng = trainer.data_rng
    order = rng.permutation(len(clips))
    n_batches = max(1, len(clips) // cfg.batch_size)
    if len(order) < cfg.batch_size:
        order = np.resize(order, cfg.batch_size)
    batches = []
    for b in range(n_batches):
        idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
        batches.append(torch.stack([crop_or_pad(clips[i], cfg.crop_len, rng) for i in idx]))
    return batches


def _truncate_log(path: Path, step: int) -> None:
    if not path.exists():
        return
    kept = [line for line in path.read_text().splitlines() if line and json.loads(line)["step"] <= step]
    path.write_text("".join(line + "\n" for line in kept))


def train(manifest: DatasetManifest, cfg: TrainingConfig, out_dir, resume: bool = False,
          neural_codec: Optional[RvqCodec] = None, stop_after_epochs: Optional[int] = None) -> list[Path]:
    """Run the epoch loop, writing ``metrics.jsonl`` and one checkpoint per epoch to ``out_dir``.

    With ``resume`` the run continues from ``out_dir/last.pt``. ``stop_after_epochs``
    interrupts the run early (used to exercise resumption). Returns checkpoint paths.
    """
    if len(manifest) == 0:
        raise ValueError("training manifest is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "metrics.jsonl"
    last = out_dir / "last.pt"
    if resume and last.exists():
        trainer = Trainer.from_checkpoint(last, neural_codec)
        _truncate_log(log_path, trainer.step)
        logger.info("resumed from %s at epoch %d, step %d", last, trainer.epoch, trainer.step)
    else:
        trainer = Trainer(cfg, neural_codec)
        if log_path.exists():
            log_path.unlink()
    cfg = trainer.cfg
    clips = manifest.load_clips()
    checkpoints = []
    epochs_run = 0
    with log_path.open("a") as log:
        while trainer.epoch < cfg.epochs and (cfg.max_steps is None or trainer.step < cfg.max_steps):
            for batch in epoch_batches(trainer, clips):
                if cfg.max_steps is not None and trainer.step >= cfg.max_steps:
                    break
                metrics = train_step(trainer, batch)
                log.write(json.dumps(metrics) + "\n")
            log.flush()
            trainer.end_epoch()
            path = out_dir / f"epoch_{trainer.epoch:04d}.pt"
            trainer.save(path)
            last.unlink(missing_ok=True)
            last.hardlink_to(path)
            checkpoints.append(path)
            if cfg.keep_checkpoints is not None:
                for stale in sorted(out_dir.glob("epoch_*.pt"))[:-cfg.keep_checkpoints]:
                    stale.unlink()
            epochs_run += 1
            if stop_after_epochs is not None and epochs_run >= stop_after_epochs:
                break
    return checkpoints


def read_metrics(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line]


def pretrain_generator(cfg: TrainingConfig, clips: list, steps: int, lr: float = 1e-3) -> Generator:
    """Warm-start the generator on the mel loss alone, standing in for a pretrained vocoder."""
    rng = np.random.default_rng([cfg.seed, 2])
    G = Generator(cfg.generator)
    opt = torch.optim.AdamW(G.parameters(), lr=lr, betas=tuple(cfg.betas))
    for _ in range(steps):
        idx = rng.integers(len(clips), size=cfg.batch_size)
        x = torch.stack([crop_or_pad(clips[i], cfg.crop_len, rng) for i in idx])
        with torch.no_grad():
            mel_in = log_mel(x, cfg.mel)
        loss = loss_mel(x, G(mel_in), cfg.mel)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return G


def lr_at_epoch(lr_init: float, decay: float, epoch: int) -> float:
    return lr_init * decay ** epoch


def isfinite_metrics(metrics: dict) -> bool:
    return all(math.isfinite(v) for k, v in metrics.items() if isinstance(v, float))
