"""Pairwise temporal-ordering evaluation: accuracy/F1, accuracy by clip
separation, and CSV/SVG/JSON report files.

The positive class is "the first presented clip is the earlier one".
"""
from __future__ import annotations

import csv
import io
import json
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import spearmanr

from . import tensor as tc
from .dataio import PairSample
from .encoder import ClipBank, ClipEncoder
from .heads import PairPrediction, order_from_logit, sob_scores

Predictor = Callable[[Sequence[PairSample]], list[PairPrediction]]

LOW_CONFIDENCE_N = 10


class EmptyPairSetError(ValueError):
    pass


@dataclass
class EvalReport:
    method: str
    n_pairs: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    per_delta: dict[int, tuple[int, int]] = field(default_factory=dict)  # delta -> (n, correct)
    posenc: str = ""
    mgm: bool = False

    def to_dict(self) -> dict:
        out = asdict(self)
        out["per_delta"] = {str(k): list(v) for k, v in sorted(self.per_delta.items())}
        return out


def metrics_from_confusion(tp: int, fp: int, tn: int, fn: int) -> dict[str, float]:
    n = tp + fp + tn + fn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"accuracy": (tp + tn) / n if n else 0.0, "precision": precision, "recall": recall, "f1": f1}


def score_predictions(pairs: Sequence[PairSample], preds: Sequence[PairPrediction],
                      method: str = "", posenc: str = "", mgm: bool = False) -> EvalReport:
    if not pairs:
        raise EmptyPairSetError("cannot evaluate an empty pair set")
    if len(pairs) != len(preds):
        raise ValueError(f"{len(pairs)} pairs but {len(preds)} predictions")
    tp = fp = tn = fn = 0
    per_delta: dict[int, list[int]] = {}
    for pair, pred in zip(pairs, preds):
        truth = pair.first_is_earlier
        guess = pred.first_is_earlier
        if guess and truth:
            tp += 1
        elif guess:
            fp += 1
        elif truth:
            fn += 1
        else:
            tn += 1
        bucket = per_delta.setdefault(pair.separation, [0, 0])
        bucket[0] += 1
        bucket[1] += int(guess == truth)
    m = metrics_from_confusion(tp, fp, tn, fn)
    method = method or (preds[0].method if preds else "")
    return EvalReport(method, len(pairs), m["accuracy"], m["precision"], m["recall"], m["f1"],
                      tp, fp, tn, fn, {k: tuple(v) for k, v in sorted(per_delta.items())}, posenc, mgm)


def evaluate(model: Predictor, pairs: Sequence[PairSample], **tags) -> EvalReport:
    return score_predictions(pairs, model(pairs), **tags)


@dataclass
class SeparationCurve:
    deltas: list[int]
    counts: list[int]
    accuracy: list[float]

    @property
    def low_confidence(self) -> list[bool]:
        return [n < LOW_CONFIDENCE_N for n in self.counts]

    def spearman(self) -> float:
        if len(self.deltas) < 2:
            return float("nan")
        return float(spearmanr(self.deltas, self.accuracy).statistic)


def curve_from_report(report: EvalReport) -> SeparationCurve:
    ds = sorted(report.per_delta)
    return SeparationCurve(ds, [report.per_delta[d][0] for d in ds],
                           [report.per_delta[d][1] / report.per_delta[d][0] for d in ds])


def separation_curve(model: Predictor, pairs: Sequence[PairSample]) -> SeparationCurve:
    return curve_from_report(evaluate(model, pairs))


# -- predictors ----------------------------------------------------------------

class EmbeddingPredictor:
    """Orders pairs by SOB score; each clip is embedded once."""

    method = "embedding"

    def __init__(self, encoder: ClipEncoder, params: dict, bank: ClipBank, batch_size: int = 32):
        self.encoder = encoder
        self.params = params
        self.bank = bank
        self.batch_size = batch_size

    def embeddings(self, keys: Sequence[tuple[str, int]]) -> np.ndarray:
        out = []
        with tc.no_grad():
            for i in range(0, len(keys), self.batch_size):
                out.append(self.encoder(self.bank.batch(keys[i:i + self.batch_size])).data)
        return np.concatenate(out) if out else np.zeros((0, self.encoder.cfg.embed_dim))

    def scores(self, keys: Sequence[tuple[str, int]]) -> dict[tuple[str, int], float]:
        embs = self.embeddings(keys)
        s = sob_scores(embs, self.params["proto.sob"].data, self.params["proto.nosob"].data)
        return dict(zip(keys, s.tolist()))

    def __call__(self, pairs: Sequence[PairSample]) -> list[PairPrediction]:
        keys = sorted({(p.video_id, i) for p in pairs for i in (p.index_a, p.index_b)})
        scores = self.scores(keys)
        out = []
        for p in pairs:
            a, b = scores[(p.video_id, p.index_a)], scores[(p.video_id, p.index_b)]
            out.append(PairPrediction(bool(a >= b), abs(a - b), self.method))
        return out


class TwoTowerPredictor:
    def __init__(self, model, bank: ClipBank, batch_size: int = 16):
        self.model = model
        self.bank = bank
        self.batch_size = batch_size
        self.method = model.method

    def logits(self, pairs: Sequence[PairSample]) -> np.ndarray:
        out = []
        with tc.no_grad():
            for i in range(0, len(pairs), self.batch_size):
                chunk = pairs[i:i + self.batch_size]
                fa = self.bank.batch([(p.video_id, p.index_a) for p in chunk])
                fb = self.bank.batch([(p.video_id, p.index_b) for p in chunk])
                out.append(self.model.logits(fa, fb).data.reshape(-1))
        return np.concatenate(out) if out else np.zeros(0)

    def __call__(self, pairs: Sequence[PairSample]) -> list[PairPrediction]:
        return [order_from_logit(z, self.method) for z in self.logits(pairs)]


# -- report files --------------------------------------------------------------

def version_string() -> str:
    """``git describe``-style identifier, falling back to the package version."""
    from . import __version__

    try:
        res = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"],
                             cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5)
        if res.returncode == 0 and res.stdout.strip():
            return f"v{__version__}-g{res.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def _csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def results_csv(reports: Sequence[EvalReport]) -> str:
    rows = [[r.method, r.posenc, "on" if r.mgm else "off", f"{r.accuracy:.6f}", f"{r.f1:.6f}"] for r in reports]
    return _csv_text(["method", "posenc", "mgm", "accuracy", "f1"], rows)


def curve_csv(curve: SeparationCurve) -> str:
    rows = [[d, n, f"{a:.6f}"] for d, n, a in zip(curve.deltas, curve.counts, curve.accuracy)]
    return _csv_text(["delta", "n", "accuracy"], rows)


def curve_svg(curve: SeparationCurve, width: int = 480, height: int = 320, title: str = "") -> str:
    """Single-polyline accuracy-vs-separation chart; hollow markers flag
    low-confidence buckets."""
    ml, mr, mt, mb = 56, 16, 28, 44
    pw, ph = width - ml - mr, height - mt - mb
    dmin = min(curve.deltas) if curve.deltas else 1
    dmax = max(curve.deltas) if curve.deltas else 2
    span = max(dmax - dmin, 1)

    def sx(d):
        return ml + pw * (d - dmin) / span

    def sy(a):
        return mt + ph * (1.0 - a)

    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>',
    ]
    for k in range(6):
        a = k / 5
        y = sy(a)
        lines.append(f'<line x1="{ml - 4}" y1="{y:.2f}" x2="{ml}" y2="{y:.2f}" stroke="black"/>')
        lines.append(f'<text x="{ml - 8}" y="{y + 4:.2f}" font-size="11" text-anchor="end">{a:.1f}</text>')
    for d in curve.deltas:
        x = sx(d)
        lines.append(f'<line x1="{x:.2f}" y1="{mt + ph}" x2="{x:.2f}" y2="{mt + ph + 4}" stroke="black"/>')
        lines.append(f'<text x="{x:.2f}" y="{mt + ph + 17}" font-size="11" text-anchor="middle">{d}</text>')
    lines.append(f'<text x="{ml + pw / 2:.2f}" y="{height - 8}" font-size="12" text-anchor="middle">'
                 f'clip separation (positions)</text>')
    lines.append(f'<text x="14" y="{mt + ph / 2:.2f}" font-size="12" text-anchor="middle" '
                 f'transform="rotate(-90 14 {mt + ph / 2:.2f})">accuracy</text>')
    if title:
        lines.append(f'<text x="{ml + pw / 2:.2f}" y="18" font-size="13" text-anchor="middle">{title}</text>')
    pts = " ".join(f"{sx(d):.2f},{sy(a):.2f}" for d, a in zip(curve.deltas, curve.accuracy))
    lines.append(f'<polyline points="{pts}" fill="none" stroke="#1f77b4" stroke-width="2"/>')
    for d, a, low in zip(curve.deltas, curve.accuracy, curve.low_confidence):
        fill = "white" if low else "#1f77b4"
        lines.append(f'<circle cx="{sx(d):.2f}" cy="{sy(a):.2f}" r="3" fill="{fill}" stroke="#1f77b4"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def render_reports(reports: Sequence[EvalReport], curve: SeparationCurve | None, out_dir,
                   meta: dict | None = None) -> list[Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    files = {"results.csv": results_csv(reports)}
    if curve is not None:
        files["curve.csv"] = curve_csv(curve)
        files["curve.svg"] = curve_svg(curve, title=reports[0].method if reports else "")
    doc = dict(meta or {})
    doc.setdefault("version", version_string())
    doc["reports"] = [r.to_dict() for r in reports]
    if curve is not None:
        doc["curve"] = {"delta": curve.deltas, "n": curve.counts, "accuracy": curve.accuracy,
                        "low_confidence": curve.low_confidence}
    files["run_meta.json"] = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    written = []
    for name, text in files.items():
        path = out / name
        try:
            path.write_text(text)
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
        written.append(path)
    return written
