import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from breathorder.dataio import PairSample
from breathorder.evaluate import (EmptyPairSetError, SeparationCurve, curve_csv, curve_from_report, curve_svg,
                                  metrics_from_confusion, render_reports, score_predictions)
from breathorder.heads import PairPrediction


def balanced_pairs(M=8, vid="v"):
    return [PairSample(vid, a, b) for a in range(M) for b in range(M) if a != b]


def predict(pairs, rule):
    return [PairPrediction(bool(rule(p)), 1.0, "test") for p in pairs]


def test_oracle_inverted_constant():
    pairs = balanced_pairs()
    oracle = score_predictions(pairs, predict(pairs, lambda p: p.first_is_earlier))
    assert oracle.accuracy == 1.0 and oracle.f1 == 1.0
    inv = score_predictions(pairs, predict(pairs, lambda p: not p.first_is_earlier))
    assert inv.accuracy == 0.0 and inv.f1 == 0.0
    const = score_predictions(pairs, predict(pairs, lambda p: True))
    assert const.accuracy == 0.5 and const.recall == 1.0 and const.precision == 0.5
    assert const.f1 == 2 / 3


def test_oracle_curve_is_flat_one():
    pairs = balanced_pairs(12)
    rep = score_predictions(pairs, predict(pairs, lambda p: p.first_is_earlier))
    curve = curve_from_report(rep)
    assert curve.deltas == list(range(1, 12)) and all(a == 1.0 for a in curve.accuracy)
    assert sum(curve.counts) == rep.n_pairs
    assert curve.low_confidence == [n < 10 for n in curve.counts]


@settings(max_examples=100)
@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_metric_identities(tp, fp, tn, fn):
    if tp + fp + tn + fn == 0:
        return
    m = metrics_from_confusion(tp, fp, tn, fn)
    n = tp + fp + tn + fn
    assert abs(m["accuracy"] - (tp + tn) / n) <= 1e-12
    P, R = m["precision"], m["recall"]
    assert abs(m["f1"] - (2 * P * R / (P + R) if P + R else 0.0)) <= 1e-12


@settings(max_examples=50)
@given(st.lists(st.booleans(), min_size=56, max_size=56))
def test_report_consistent_and_flip_maps_accuracy(guesses):
    pairs = balanced_pairs()
    preds = [PairPrediction(g, 0.0, "m") for g in guesses]
    rep = score_predictions(pairs, preds)
    assert rep.tp + rep.fp + rep.tn + rep.fn == rep.n_pairs == 56
    assert sum(n for n, _ in rep.per_delta.values()) == rep.n_pairs
    m = metrics_from_confusion(rep.tp, rep.fp, rep.tn, rep.fn)
    for k in ("accuracy", "precision", "recall", "f1"):
        assert abs(getattr(rep, k) - m[k]) <= 1e-12
    flipped = score_predictions(pairs, [PairPrediction(not g, 0.0, "m") for g in guesses])
    # exact in counts; the float ratios agree to an ulp
    assert flipped.tp + flipped.tn == rep.fp + rep.fn
    assert abs(flipped.accuracy - (1 - rep.accuracy)) <= 1e-15


def test_errors():
    with pytest.raises(EmptyPairSetError):
        score_predictions([], [])
    with pytest.raises(ValueError):
        score_predictions(balanced_pairs(3), [])


def test_render_files_and_determinism(tmp_path):
    pairs = balanced_pairs(11)
    a = score_predictions(pairs, predict(pairs, lambda p: p.separation > 3 and p.first_is_earlier), posenc="liere")
    b = score_predictions(pairs, predict(pairs, lambda p: True), method="tt_cls", posenc="ape", mgm=True)
    curve = curve_from_report(a)
    render_reports([a, b], curve, tmp_path / "one", {"seed": 3})
    render_reports([a, b], curve, tmp_path / "two", {"seed": 3})
    for name in ("results.csv", "curve.csv", "curve.svg", "run_meta.json"):
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()
    rows = (tmp_path / "one" / "results.csv").read_text().splitlines()
    assert rows[0] == "method,posenc,mgm,accuracy,f1" and len(rows) == 3
    assert rows[2].startswith("tt_cls,ape,on,0.500000,")
    assert len(curve_csv(curve).splitlines()) == 1 + 10
    meta = json.loads((tmp_path / "one" / "run_meta.json").read_text())
    assert meta["seed"] == 3 and "version" in meta and len(meta["reports"]) == 2


def test_svg_structure():
    curve = SeparationCurve([1, 2, 3], [20, 5, 12], [0.5, 0.75, 1.0])
    svg = curve_svg(curve)
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    assert svg.count("<polyline") == 1
    assert svg.count('<circle') == 3
    assert svg.count('r="3" fill="white"') == 1  # the n=5 bucket is hollow


def test_spearman():
    assert SeparationCurve([1, 2, 3, 4], [1] * 4, [0.5, 0.6, 0.7, 0.9]).spearman() == pytest.approx(1.0)
    assert np.isnan(SeparationCurve([1], [1], [0.5]).spearman())
