import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from collabwm.evaluation import (POOLED, POOLED_NO_NEURAL, RobustnessMatrix, ScoreSet, compute_eer,
                                 condition_order, emit_report, evaluate_system, load_scores,
                                 read_records)

from oracles import eer_bruteforce

scores = st.lists(st.integers(-5, 5).map(lambda v: v / 2), min_size=1, max_size=10)


def test_perfect_separation():
    assert compute_eer([0.9, 0.8], [0.2, 0.1]) == 0.0


def test_perfect_anti_separation():
    assert compute_eer([0.1], [0.9]) == 100.0


def test_three_by_three_matches_oracle():
    real, gen = [0.9, 0.8, 0.3], [0.7, 0.2, 0.1]
    expected = eer_bruteforce(real, gen)
    assert expected == pytest.approx(100 / 3)
    assert compute_eer(real, gen) == pytest.approx(float(expected), abs=1e-12)


def test_empty_raises():
    with pytest.raises(ValueError):
        compute_eer([], [1.0])


def test_all_tied_scores():
    assert compute_eer([0.5, 0.5], [0.5]) == pytest.approx(float(eer_bruteforce([0.5, 0.5], [0.5])))


@settings(max_examples=300, deadline=None)
@given(scores, scores)
def test_matches_bruteforce(real, gen):
    assert compute_eer(real, gen) == pytest.approx(float(eer_bruteforce(real, gen)), abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(scores, scores, st.floats(-100, 100))
def test_shift_invariance(real, gen, c):
    base = compute_eer(real, gen)
    assert compute_eer([r + c for r in real], [g + c for g in gen]) == pytest.approx(base, abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(scores, scores)
def test_swap_and_negate(real, gen):
    assert compute_eer([-g for g in gen], [-r for r in real]) == pytest.approx(compute_eer(real, gen), abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(scores, scores)
def test_monotone_transform(real, gen):
    f = lambda v: math.exp(v) ** 3 + v
    assert compute_eer([f(r) for r in real], [f(g) for g in gen]) == pytest.approx(compute_eer(real, gen), abs=1e-9)


def test_eer_can_exceed_fifty():
    assert compute_eer([0.1, 0.2, 0.3], [0.6, 0.7, 0.8]) > 50


def test_condition_order_matches_table_layout():
    labels = ["vorbis@q1", POOLED, "mp3@16", "opus@128", "none", "opus@16", "neural@8", POOLED_NO_NEURAL]
    assert sorted(labels, key=condition_order) == [
        "none", "neural@8", "opus@16", "opus@128", "mp3@16", "vorbis@q1", POOLED, POOLED_NO_NEURAL]


def _toy_sets():
    rng = np.random.default_rng(3)
    sets = []
    for rep in range(2):
        for cond in ("none", "mp3@64", "neural@8"):
            sets.append(ScoreSet(list(rng.normal(1, 1, 6)), list(rng.normal(0, 1, 5)), cond, rep, "sysA"))
    return sets


def test_pooled_row_is_concatenation_not_mean():
    sets = _toy_sets()
    m = RobustnessMatrix.from_score_sets(sets)
    for rep in range(2):
        members = [s for s in sets if s.repetition == rep]
        real = [v for s in members for v in s.real_scores]
        gen = [v for s in members for v in s.gen_scores]
        rec = next(r for r in m.records if r.condition == POOLED and r.repetition == rep)
        assert rec.eer_percent == pytest.approx(float(eer_bruteforce(real, gen)), abs=1e-9)
        assert (rec.n_real, rec.n_gen) == (len(real), len(gen))
        no_neural = [s for s in members if s.condition != "neural@8"]
        rec = next(r for r in m.records if r.condition == POOLED_NO_NEURAL and r.repetition == rep)
        assert rec.eer_percent == pytest.approx(
            compute_eer([v for s in no_neural for v in s.real_scores], [v for s in no_neural for v in s.gen_scores]))
    mean, n = m.cell(POOLED, "sysA")
    assert n == 2


def test_report_one_by_one(tmp_path):
    m = RobustnessMatrix.from_score_sets([ScoreSet([1.0, 0.9], [0.0], "none", 0, "s")])
    paths = emit_report(m, tmp_path)
    lines = paths["table"].read_text().splitlines()
    assert lines == ["condition\ts", "none\t0.00"]


def test_report_roundtrip_is_exact(tmp_path):
    sets = _toy_sets()
    m = RobustnessMatrix.from_score_sets(sets)
    paths = emit_report(m, tmp_path, score_sets=sets)
    again = read_records(paths["records"])
    assert again == m
    for cond in m.conditions:
        assert again.cell(cond, "sysA") == m.cell(cond, "sysA")
    reloaded = load_scores(paths["scores"])
    assert RobustnessMatrix.from_score_sets(reloaded) == m
    rec = json.loads(paths["records"].read_text())["records"][0]
    assert set(rec) == {"condition", "system", "repetition", "eer_percent", "n_real", "n_gen"}


def _clips():
    rng = np.random.default_rng(0)
    return [torch.from_numpy(rng.uniform(-0.5, 0.5, n).astype(np.float32)) for n in (4000, 5000, 6100)]


def _zero_generator(mel):
    return torch.zeros(mel.shape[0], mel.shape[-1] * 256)


def _energy_detector(w):
    return (w.abs().sum(-1) > 0).float()


def test_oracle_detector_gives_zero_eer():
    sets = evaluate_system(_zero_generator, _energy_detector, _clips(), ["none", "mp3@64"], repetitions=2)
    assert len(sets) == 4
    assert all(s.eer == 0.0 for s in sets)


def test_inverted_oracle_gives_hundred():
    inv = lambda w: 1 - _energy_detector(w)
    sets = evaluate_system(_zero_generator, inv, _clips(), ["none"], repetitions=1)
    assert sets[0].eer == 100.0


def test_evaluate_deterministic():
    det = lambda w: w.pow(2).mean(-1)
    gen = lambda mel: 0.1 * torch.sin(torch.arange(mel.shape[-1] * 256.0))[None]
    a = evaluate_system(gen, det, _clips(), ["none", "opus@32"], repetitions=1, seed=4)
    b = evaluate_system(gen, det, _clips(), ["none", "opus@32"], repetitions=1, seed=4)
    assert a == b
