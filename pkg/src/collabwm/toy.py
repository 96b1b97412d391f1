"""Desk-scale experiment: synthetic corpus, mel warm start, observer vs collaborator runs, EER readout."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .config import TrainingConfig, toy_config
from .evaluation import evaluate_system
from .models import Detector, DetectorConfig, DiscriminatorConfig, Generator, GeneratorConfig
from .training import Trainer, load_models, make_toy_corpus, pretrain_generator, read_metrics, train

logger = logging.getLogger(__name__)

# name -> (role, augmentation pool)
RUNS = {
    "observer": ("observer", ["none"]),
    "collaborator": ("collaborator", ["none"]),
    "collaborator_opus16": ("collaborator", ["opus@16"]),
}


@dataclass
class ToySettings:
    n_train: int = 100
    n_test: int = 40
    steps: int = 1000
    pretrain_steps: int = 300
    crop_len: int = 8192
    batch_size: int = 4
    # one rate for both roles so the comparison isolates the shared gradient
    lr_init: float = 2e-4
    eval_conditions: list = field(default_factory=lambda: ["none", "opus@16"])
    repetitions: int = 3
    runs: list = field(default_factory=lambda: list(RUNS))


def seed_config(seed: int, s: ToySettings, **overrides) -> TrainingConfig:
    """Toy config whose every model init and rng stream derives from ``seed``."""
    base = dict(seed=seed, batch_size=s.batch_size, crop_len=s.crop_len, max_steps=s.steps, lr_init=s.lr_init,
                keep_checkpoints=1, generator=GeneratorConfig(seed=seed), discriminator=DiscriminatorConfig(seed=seed + 100),
                detector=DetectorConfig(seed=seed + 200))
    base.update(overrides)
    return toy_config(**base)


def _eers(G, W, clips, s: ToySettings, system: str) -> dict:
    sets = evaluate_system(G.eval(), W.eval(), clips, s.eval_conditions, repetitions=s.repetitions, system=system)
    out = {}
    for cond in s.eval_conditions:
        vals = [x.eer for x in sets if x.condition == cond]
        out[cond] = float(np.mean(vals))
    return out


def run_seed(seed: int, root, s: Optional[ToySettings] = None) -> dict:
    """Run every configured system for one seed under ``root/seed_<n>``; returns EERs and loss traces.

    Results are cached in ``summary.json`` and reused when the settings match.
    """
    s = s or ToySettings()
    root = Path(root) / f"seed_{seed}"
    summary_path = root / "summary.json"
    settings = dict(s.__dict__)
    if summary_path.exists():
        cached = json.loads(summary_path.read_text())
        if cached.get("settings") == settings:
            return cached
    root.mkdir(parents=True, exist_ok=True)
    train_m = make_toy_corpus(s.n_train, np.random.default_rng([seed, 0]), root / "train", "train")
    test_m = make_toy_corpus(s.n_test, np.random.default_rng([seed, 1]), root / "test", "test")
    test_clips = test_m.load_clips()

    t0 = time.time()
    cfg0 = seed_config(seed, s)
    G0 = pretrain_generator(cfg0, train_m.load_clips(), s.pretrain_steps)
    start = Trainer(cfg0)
    start.generator.load_state_dict(G0.state_dict())
    start_ckpt = root / "start.pt"
    start.save(start_ckpt)
    result = {"settings": settings, "seed": seed,
              "eer": {"init": _eers(start.generator, start.detector, test_clips, s, "init")},
              "loss_wm": {}, "loss_g_mel": {}, "seconds": {"pretrain": time.time() - t0}}

    for name in s.runs:
        role, pool = RUNS[name]
        cfg = seed_config(seed, s, mode=role, pool=pool, init_checkpoint=str(start_ckpt))
        t0 = time.time()
        train(train_m, cfg, root / name)
        G, W = Generator(cfg.generator), Detector(cfg.detector)
        load_models(root / name / "last.pt", G, None, W)
        logs = read_metrics(root / name / "metrics.jsonl")
        result["eer"][name] = _eers(G, W, test_clips, s, name)
        result["loss_wm"][name] = [m["loss_wm"] for m in logs]
        result["loss_g_mel"][name] = [m["loss_g_mel"] for m in logs]
        result["seconds"][name] = time.time() - t0
        logger.info("seed %d %s: %s (%.0f s)", seed, name, result["eer"][name], result["seconds"][name])
    summary_path.write_text(json.dumps(result))
    return result
