"""Command-line entry points: make-corpus, train, evaluate, grad-check, codec-probe, report.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
import traceback
from pathlib import Path

import numpy as np
import torch

logger = logging.getLogger("collabwm")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _codec_label(args) -> str:
    """Build a CodecSpec label from --codec plus --bitrate/--qscale."""
    kind = args.codec
    if kind == "none":
        return "none"
    if kind == "vorbis":
        if args.qscale is None:
            raise UsageError("--codec vorbis needs --qscale")
        return f"vorbis@q{args.qscale}"
    if args.bitrate is None:
        raise UsageError(f"--codec {kind} needs --bitrate")
    return f"{kind}@{args.bitrate}"


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------

def cmd_make_corpus(args) -> int:
    from .training import make_toy_corpus
    m = make_toy_corpus(args.n, np.random.default_rng(args.seed), args.out_dir, split=args.split)
    print(f"wrote {len(m)} clips and manifest.json to {args.out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .config import dump_config, load_config
    from .training import DatasetManifest, read_metrics, train
    if not Path(args.config).is_file():
        raise UsageError(f"config file {args.config} not found")
    cfg = load_config(args.config, args.override, seed=args.seed)
    manifest = DatasetManifest.load(args.manifest)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    ckpts = train(manifest, cfg, out, resume=args.resume)
    logs = read_metrics(out / "metrics.jsonl")
    last = logs[-1] if logs else {}
    print(f"mode={cfg.mode} steps={last.get('step', 0)} epochs={len(ckpts)} "
          f"loss_wm={last.get('loss_wm', float('nan')):.4f} loss_g_mel={last.get('loss_g_mel', float('nan')):.4f}")
    print(f"checkpoint: {out / 'last.pt'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .evaluation import RobustnessMatrix, TABLE_CONDITIONS, emit_report, evaluate_system
    from .models import Detector, Generator
    from .training import DatasetManifest, load_models, load_neural_codec
    cfg = load_models(args.checkpoint)
    G, WM = Generator(cfg.generator), Detector(cfg.detector)
    load_models(args.checkpoint, G, None, WM)
    G.eval()
    WM.eval()
    conditions = args.conditions or [c for c in TABLE_CONDITIONS if args.neural_codec or not c.startswith("neural")]
    codec = load_neural_codec(args.neural_codec) if args.neural_codec else None
    clips = DatasetManifest.load(args.manifest).load_clips()
    system = args.system or Path(args.checkpoint).parent.name
    sets = evaluate_system(G, WM, clips, conditions, repetitions=args.repetitions, seed=args.seed,
                           mel_params=cfg.mel, neural_codec=codec, system=system)
    matrix = RobustnessMatrix.from_score_sets(sets)
    paths = emit_report(matrix, args.out_dir, score_sets=sets)
    print(paths["table"].read_text(), end="")
    return EXIT_OK


def cmd_report(args) -> int:
    from .evaluation import RobustnessMatrix, emit_report, load_scores
    sets = []
    for path in args.inputs:
        sets.extend(load_scores(path))
    paths = emit_report(RobustnessMatrix.from_score_sets(sets), args.out_dir)
    print(paths["table"].read_text(), end="")
    return EXIT_OK


def cmd_codec_probe(args) -> int:
    from .audio import Waveform, load_wav, resample
    from .channel import CodecSpec, codec_roundtrip
    spec = CodecSpec.parse(_codec_label(args))
    w = load_wav(args.input)
    if w.sample_rate != spec.sample_rate:
        w = Waveform(resample(w.samples, w.sample_rate, spec.sample_rate), spec.sample_rate)
    r = codec_roundtrip(w, spec)
    print(f"codec={spec} samples={len(w)} delay_samples={r.delay_samples} snr_db={r.snr_db:.2f}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    """STE exactness on a channel plus finite-difference checks of the differentiable frontends."""
    from .audio import MelParams, mel_spectrogram, resample
    from .channel import CodecSpec, channel_augment
    spec = CodecSpec.parse(_codec_label(args))
    g = torch.Generator().manual_seed(args.seed)

    x = (0.3 * torch.randn(2, 4096, generator=g)).requires_grad_(True)
    x_tilde, _ = channel_augment(x, spec, differentiable=True)
    decoded, _ = channel_augment(x.detach(), spec, differentiable=False)
    w = torch.randn(x.shape, generator=g)
    (w * x_tilde).sum().backward()
    fwd_dev = (x_tilde.detach() - decoded).abs().max().item()
    ste_dev = (x.grad - w).abs().max().item()
    print(f"channel={spec}")
    print(f"ste_forward_max_dev={fwd_dev!r}")
    print(f"ste_deviation={ste_dev!r}")

    p = MelParams(sample_rate=8000, n_fft=128, hop=32, win=128, n_mels=10, f_max=4000)
    checks = {
        "resample_fd_max_dev": lambda v: resample(v, 22050, 16000).pow(2).sum(),
        "mel_fd_max_dev": lambda v: mel_spectrogram(v, p).pow(2).sum(),
    }
    worst = max(fwd_dev, ste_dev)
    for name, f in checks.items():
        v = torch.randn(192, generator=g, dtype=torch.float64, requires_grad=True)
        f(v).backward()
        eps = 1e-6
        fd = torch.empty_like(v)
        with torch.no_grad():
            for i in range(len(v)):
                e = torch.zeros_like(v)
                e[i] = eps
                fd[i] = (f(v + e) - f(v - e)) / (2 * eps)
        dev = (v.grad - fd).abs().max().item()
        worst = max(worst, dev)
        print(f"{name}={dev:.3e}")
    if worst > args.tol:
        print(f"FAILED: max deviation {worst:.3e} > {args.tol:.1e}")
        return EXIT_RUNTIME
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="collabwm", description="Collaborative speech watermarking with codec augmentation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", metavar="verb", parser_class=_Parser)
    sub.required = True

    def codec_flags(sp, default="none"):
        sp.add_argument("--codec", choices=["none", "mp3", "opus", "vorbis"], default=default)
        sp.add_argument("--bitrate", type=int, help="kbps for mp3/opus")
        sp.add_argument("--qscale", type=int, help="quality for vorbis")

    sp = sub.add_parser("make-corpus", help="write a synthetic toy corpus")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--n", type=int, default=100)
    sp.add_argument("--split", default="train", choices=["train", "dev", "test"])
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_make_corpus)

    sp = sub.add_parser("train", help="train an observer or collaborator system")
    sp.add_argument("--config", required=True, help="YAML file with TrainingConfig keys")
    sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                    help="dotted config key override (repeatable)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--in", dest="manifest", required=True, help="training manifest.json")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--resume", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="score a checkpoint under codec conditions")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--in", dest="manifest", required=True, help="test manifest.json")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--conditions", nargs="+", help="codec labels, e.g. none mp3@64 vorbis@q2")
    sp.add_argument("--repetitions", type=int, default=5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--system", help="column name (defaults to the checkpoint directory)")
    sp.add_argument("--neural-codec", help="trained toy neural codec archive")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("grad-check", help="STE and finite-difference gradient checks")
    codec_flags(sp)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.set_defaults(func=cmd_grad_check)

    sp = sub.add_parser("codec-probe", help="one codec round trip; prints delay and SNR")
    codec_flags(sp, default=None)
    sp.add_argument("--in", dest="input", required=True, help="WAV file")
    sp.set_defaults(func=cmd_codec_probe)

    sp = sub.add_parser("report", help="re-render a table from stored raw scores")
    sp.add_argument("--in", dest="inputs", nargs="+", required=True, help="scores.json files")
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def _origin(exc: BaseException) -> str:
    """Module of the innermost package frame that raised ``exc``."""
    name = "collabwm.cli"
    for frame, _ in traceback.walk_tb(exc.__traceback__):
        mod = frame.f_globals.get("__name__", "")
        if mod.startswith("collabwm"):
            name = mod
    return name


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "seed", None) is not None:
        torch.manual_seed(args.seed)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (KeyError, ValueError) as e:
        # config/label validation happens before any work starts
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"error [{_origin(e)}]: {msg}", file=sys.stderr)
        return EXIT_USAGE if _origin(e) in ("collabwm.config", "collabwm.cli") else EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 - report and map to the runtime exit code
        print(f"error [{_origin(e)}]: {type(e).__name__}: {e}", file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())
