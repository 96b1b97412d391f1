"""Detector scoring, equal error rate and the codec-condition robustness matrix."""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .audio import MelParams, Waveform, log_mel
from .channel import CodecKind, CodecSpec, RvqCodec, codec_roundtrip

POOLED = "pooled"
POOLED_NO_NEURAL = "pooled_wo_neural"
REPORT_VERSION = 1

TABLE_CONDITIONS = (
    ["none", "neural@8"]
    + [f"opus@{b}" for b in (16, 32, 64, 128)]
    + [f"mp3@{b}" for b in (16, 32, 64, 128)]
    + [f"vorbis@q{q}" for q in (1, 2, 3)]
)


def compute_eer(real_scores, gen_scores) -> float:
    """Equal error rate in percent; real samples are the positive ("accept") class.

    Thresholds run over the sorted unique scores plus +inf. At threshold ``t``,
    FRR is the fraction of real scores below ``t`` and FAR the fraction of
    generated scores at or above ``t``. The EER is read where FRR - FAR
    changes sign, interpolating linearly between the two bracketing points.
    Anti-separated scores give values above 50.
    """
    real = np.asarray(real_scores, dtype=np.float64).ravel()
    gen = np.asarray(gen_scores, dtype=np.float64).ravel()
    if real.size == 0 or gen.size == 0:
        raise ValueError("compute_eer needs non-empty real and generated score lists")
    if not (np.isfinite(real).all() and np.isfinite(gen).all()):
        raise ValueError("scores must be finite")
    thresholds = np.unique(np.concatenate([real, gen]))
    real_sorted = np.sort(real)
    gen_sorted = np.sort(gen)
    frr = np.searchsorted(real_sorted, thresholds, side="left") / real.size
    far = 1.0 - np.searchsorted(gen_sorted, thresholds, side="left") / gen.size
    frr = np.append(frr, 1.0)
    far = np.append(far, 0.0)
    diff = frr - far
    k = int(np.argmax(diff >= 0))  # first non-negative; diff[0] <= 0 and diff[-1] = 1
    if diff[k] == 0 or k == 0:
        return float(100.0 * frr[k])
    d0, d1 = diff[k - 1], diff[k]
    alpha = -d0 / (d1 - d0)
    return float(100.0 * (frr[k - 1] + alpha * (frr[k] - frr[k - 1])))


# ---------------------------------------------------------------------------
# score sets and the matrix
# ---------------------------------------------------------------------------

@dataclass
class ScoreSet:
    real_scores: list
    gen_scores: list
    condition: str
    repetition: int
    system: str = "system"

    def __post_init__(self):
        if not self.real_scores or not self.gen_scores:
            raise ValueError("score lists must be non-empty")
        self.real_scores = [float(s) for s in self.real_scores]
        self.gen_scores = [float(s) for s in self.gen_scores]
        if not all(math.isfinite(s) for s in self.real_scores + self.gen_scores):
            raise ValueError("scores must be finite")

    @property
    def eer(self) -> float:
        return compute_eer(self.real_scores, self.gen_scores)


def condition_order(label: str) -> tuple:
    if label == POOLED:
        return (90, 0)
    if label == POOLED_NO_NEURAL:
        return (91, 0)
    spec = CodecSpec.parse(label)
    rank = {CodecKind.NONE: 0, CodecKind.NEURAL: 1, CodecKind.OPUS: 2, CodecKind.MP3: 3, CodecKind.VORBIS: 4}
    return (rank[spec.kind], spec.bitrate or spec.quality or 0)


@dataclass
class Record:
    condition: str
    system: str
    repetition: int
    eer_percent: float
    n_real: int
    n_gen: int


@dataclass
class RobustnessMatrix:
    """EER per (condition, system) cell, kept per repetition."""

    records: list = field(default_factory=list)

    @classmethod
    def from_score_sets(cls, score_sets: Sequence[ScoreSet], pooled: bool = True) -> "RobustnessMatrix":
        """Per-condition EERs plus pooled rows over concatenated score sets."""
        records = [Record(s.condition, s.system, s.repetition, s.eer, len(s.real_scores), len(s.gen_scores))
                   for s in score_sets]
        groups = defaultdict(list)
        for s in score_sets:
            groups[(s.system, s.repetition)].append(s)
        conditions = {s.condition for s in score_sets}
        if pooled and len(conditions) > 1:
            has_neural = any(CodecSpec.parse(c).kind is CodecKind.NEURAL for c in conditions)
            for (system, rep), sets in groups.items():
                pools = [(POOLED, sets)]
                if has_neural:
                    pools.append((POOLED_NO_NEURAL,
                                  [s for s in sets if CodecSpec.parse(s.condition).kind is not CodecKind.NEURAL]))
                for label, members in pools:
                    real = [v for s in members for v in s.real_scores]
                    gen = [v for s in members for v in s.gen_scores]
                    records.append(Record(label, system, rep, compute_eer(real, gen), len(real), len(gen)))
        return cls(records)

    @property
    def conditions(self) -> list[str]:
        return sorted({r.condition for r in self.records}, key=condition_order)

    @property
    def systems(self) -> list[str]:
        seen = []
        for r in self.records:
            if r.system not in seen:
                seen.append(r.system)
        return seen

    def cell(self, condition: str, system: str) -> tuple[float, int]:
        """Mean EER over repetitions and the repetition count."""
        vals = [r.eer_percent for r in sorted(self.records, key=lambda r: r.repetition)
                if r.condition == condition and r.system == system]
        if not vals:
            raise KeyError((condition, system))
        return float(np.mean(vals)), len(vals)

    def merge(self, other: "RobustnessMatrix") -> "RobustnessMatrix":
        return RobustnessMatrix(self.records + other.records)


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

def _trim(x: torch.Tensor, hop: int, offset: int) -> torch.Tensor:
    x = x[offset:]
    return x[: (len(x) // hop) * hop]


@torch.no_grad()
def evaluate_system(generator: Callable, detector: Callable, clips: Sequence[torch.Tensor],
                    conditions: Sequence, repetitions: int = 5, seed: int = 0,
                    mel_params: MelParams = MelParams(), neural_codec: Optional[RvqCodec] = None,
                    system: str = "system", sample_rate: int = 22050) -> list[ScoreSet]:
    """Score whole test waveforms, real and regenerated, under every codec condition.

    Each repetition drops a random sub-hop number of leading samples from every
    clip (its own rng stream), so codec framing differs between repetitions.
    Returns one :class:`ScoreSet` per (condition, repetition).
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    specs = [c if isinstance(c, CodecSpec) else CodecSpec.parse(c) for c in conditions]
    hop = mel_params.hop
    out = []
    for rep in range(repetitions):
        rng = np.random.default_rng([seed, rep])
        pairs = []
        for clip in clips:
            x = _trim(clip, hop, int(rng.integers(hop)))
            x_gen = generator(log_mel(x[None], mel_params))[0]
            pairs.append((x, x_gen))
        for spec in specs:
            real_scores, gen_scores = [], []
            for x, x_gen in pairs:
                for sig, bucket in ((x, real_scores), (x_gen, gen_scores)):
                    y = codec_roundtrip(Waveform(sig, sample_rate), spec, neural_codec).output.samples
                    bucket.append(float(detector(y[None])[0]))
            out.append(ScoreSet(real_scores, gen_scores, str(spec), rep, system))
    return out


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

def emit_report(matrix: RobustnessMatrix, out_dir, score_sets: Optional[Sequence[ScoreSet]] = None) -> dict:
    """Write ``eer_table.tsv`` and ``eer_records.json`` (and optionally ``scores.json``)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    systems = matrix.systems
    table = out_dir / "eer_table.tsv"
    with table.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(["condition", *systems])
        for cond in matrix.conditions:
            row = [cond]
            for sys_ in systems:
                try:
                    row.append(f"{matrix.cell(cond, sys_)[0]:.2f}")
                except KeyError:
                    row.append("")
            w.writerow(row)
    records = out_dir / "eer_records.json"
    records.write_text(json.dumps({"version": REPORT_VERSION,
                                   "records": [r.__dict__ for r in matrix.records]}, indent=1),
                       encoding="utf-8")
    paths = {"table": table, "records": records}
    if score_sets is not None:
        paths["scores"] = dump_scores(score_sets, out_dir / "scores.json")
    return paths


def read_records(path) -> RobustnessMatrix:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if data.get("version") != REPORT_VERSION:
        raise ValueError(f"unsupported report version {data.get('version')}")
    return RobustnessMatrix([Record(**r) for r in data["records"]])


def dump_scores(score_sets: Sequence[ScoreSet], path) -> Path:
    path = Path(path)
    path.write_text(json.dumps({"version": REPORT_VERSION, "score_sets": [s.__dict__ for s in score_sets]}),
                    encoding="utf-8")
    return path


def load_scores(path) -> list[ScoreSet]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if data.get("version") != REPORT_VERSION:
        raise ValueError(f"unsupported score dump version {data.get('version')}")
    return [ScoreSet(**s) for s in data["score_sets"]]
