"""Reconstruction-error scoring, threshold calibration and detection metrics.

Scores are computed at three granularities:

``batch``
    one cost per assembled batch (4 same-label cycles x 64 random windows);
``cycle``
    the mean per-window cost over a contiguous stride-128 tiling of a cycle;
``sample``
    one cost per window of that tiling.

Faulted is the positive class.  A record is predicted faulted when its score
lies strictly beyond the threshold, so ties count as healthy.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .data import (
    CYCLES_PER_BATCH, FAULTED, HEALTHY, WIDTH, WINDOW, WINDOWS_PER_CYCLE,
    DriveCycle, assemble_batch, cycle_groups, tile_windows,
)
from .errors import ContractError
from .model import AutoencoderParams, forward
from .tensor import Tensor
from .training import cost_terms

GRANULARITIES = ("batch", "cycle", "sample")
HIGHER = "higher"
LOWER = "lower"
SCORE_COLUMNS = ("granularity", "cycle_id", "window_start", "label", "mse", "mae", "std_abs", "J")

# Windows pushed through the network at once while scoring.
SCORING_CHUNK = 64


@dataclass(frozen=True)
class ScoreRecord:
    granularity: str
    cycle_ids: tuple
    label: str
    J: float
    mse: Optional[float] = None
    mae: Optional[float] = None
    std_abs: Optional[float] = None
    window_start: Optional[int] = None
    method: Optional[str] = None


@dataclass(frozen=True)
class FiveNumberSummary:
    min: float
    q25: float
    median: float
    q75: float
    max: float

    def as_tuple(self) -> tuple:
        return (self.min, self.q25, self.median, self.q75, self.max)


@dataclass(frozen=True)
class ThresholdModel:
    threshold: float
    rule: str
    param: float
    orientation: str = HIGHER
    validation: Optional[FiveNumberSummary] = None


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


def window_costs(params: AutoencoderParams, windows: np.ndarray, n_features: int, sigma: str = "matrix") -> np.ndarray:
    """Per-window ``(mse, mae, std_abs, J)`` rows for ``(N, W, width)`` padded windows."""
    dtype = params.layers[0].weights.dtype
    out = []
    for lo in range(0, len(windows), SCORING_CHUNK):
        x = Tensor(windows[lo : lo + SCORING_CHUNK, :, :, None], dtype=dtype)
        rec, _ = forward(params, x)
        terms = cost_terms(x, rec, n_features, sigma, per_sample=True)
        out.append(np.stack([t.numpy() for t in terms], axis=1))
    return np.concatenate(out, axis=0).astype(np.float64) if out else np.zeros((0, 4))


def batch_cost(params: AutoencoderParams, batch_array: np.ndarray, n_features: int, sigma: str = "matrix") -> tuple:
    dtype = params.layers[0].weights.dtype
    x = Tensor(batch_array, dtype=dtype)
    rec, _ = forward(params, x)
    return tuple(float(t.item()) for t in cost_terms(x, rec, n_features, sigma))


def score(
    params: AutoencoderParams,
    cycles: Sequence[DriveCycle],
    granularity: str = "cycle",
    seed: int = 0,
    sigma: str = "matrix",
    window: int = WINDOW,
    width: int = WIDTH,
    windows_per_cycle: int = WINDOWS_PER_CYCLE,
    cycles_per_batch: int = CYCLES_PER_BATCH,
) -> list[ScoreRecord]:
    """Score normalized cycles at the requested granularity."""
    if granularity not in GRANULARITIES:
        raise ContractError(f"granularity must be one of {GRANULARITIES}, got {granularity!r}")
    if not cycles:
        return []
    n_features = cycles[0].n_features
    if granularity == "batch":
        return _score_batches(params, cycles, seed, sigma, window, width, windows_per_cycle, cycles_per_batch)
    records = []
    for c in cycles:
        wins = tile_windows(c, window, width=width)
        costs = window_costs(params, np.stack([w.padded for w in wins]), n_features, sigma)
        if granularity == "sample":
            for w, row in zip(wins, costs):
                records.append(ScoreRecord("sample", (c.id,), c.label, float(row[3]), float(row[0]),
                                           float(row[1]), float(row[2]), w.start_index))
        else:
            m = costs.mean(axis=0)
            records.append(ScoreRecord("cycle", (c.id,), c.label, float(m[3]), float(m[0]), float(m[1]), float(m[2])))
    return records


def _score_batches(params, cycles, seed, sigma, window, width, windows_per_cycle, cycles_per_batch):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    records = []
    n_features = cycles[0].n_features
    for label in (HEALTHY, FAULTED):
        group = [c for c in cycles if c.label == label]
        if not group:
            continue
        for idx in cycle_groups(len(group), cycles_per_batch, rng):
            members = [group[i] for i in idx]
            batch = assemble_batch(members, rng, windows_per_cycle, window, width)
            mse, mae, sd, total = batch_cost(params, batch.array(), n_features, sigma)
            records.append(ScoreRecord("batch", tuple(c.id for c in members), label, total, mse, mae, sd))
    return records


# ---------------------------------------------------------------------------
# summaries, thresholds, metrics
# ---------------------------------------------------------------------------


def _quantile(sorted_vals: np.ndarray, q: float) -> float:
    # Linear interpolation between closest ranks, position q * (n - 1).
    pos = q * (len(sorted_vals) - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, len(sorted_vals) - 1)
    frac = pos - lo
    return float(sorted_vals[lo] + (sorted_vals[hi] - sorted_vals[lo]) * frac)


def _values(scores) -> np.ndarray:
    return np.array([s.J if isinstance(s, ScoreRecord) else s for s in scores], dtype=np.float64)


def summarize(scores) -> FiveNumberSummary:
    """min, 25 %, median, 75 %, max of the scores (records or plain numbers)."""
    v = np.sort(_values(scores))
    if v.size == 0:
        raise ContractError("cannot summarize an empty score set")
    return FiveNumberSummary(float(v[0]), _quantile(v, 0.25), _quantile(v, 0.5), _quantile(v, 0.75), float(v[-1]))


def calibrate_threshold(validation_scores, rule: str = "max-margin", param: float = 1.05,
                        orientation: str = HIGHER) -> ThresholdModel:
    """Decision boundary from healthy validation scores.

    ``max-margin`` puts the boundary at ``param`` times the most extreme
    healthy score (max for higher-is-outlier, min / param for
    lower-is-outlier).  ``quantile`` uses the interpolated ``param``
    quantile (``1 - param`` for lower-is-outlier).
    """
    v = _values(validation_scores)
    if v.size == 0:
        raise ContractError("threshold calibration needs at least one validation score")
    if orientation not in (HIGHER, LOWER):
        raise ContractError(f"orientation must be {HIGHER!r} or {LOWER!r}")
    srt = np.sort(v)
    if rule == "max-margin":
        if param < 1:
            raise ContractError(f"margin must be >= 1, got {param}")
        thr = srt[-1] * param if orientation == HIGHER else srt[0] / param
    elif rule == "quantile":
        if not 0 <= param <= 1:
            raise ContractError(f"quantile must be in [0, 1], got {param}")
        thr = _quantile(srt, param if orientation == HIGHER else 1 - param)
    else:
        raise ContractError(f"rule must be 'max-margin' or 'quantile', got {rule!r}")
    return ThresholdModel(float(thr), rule, float(param), orientation, summarize(v))


def predict(values, threshold: float, orientation: str = HIGHER) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    return v > threshold if orientation == HIGHER else v < threshold


def metrics_from_counts(tp: int, fp: int, tn: int, fn: int) -> MetricsReport:
    total = tp + fp + tn + fn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    accuracy = (tp + tn) / total if total else 0.0
    return MetricsReport(accuracy, precision, recall, f1, tp, fp, tn, fn)


def classify_and_report(scores: Sequence[ScoreRecord], threshold, orientation: Optional[str] = None) -> MetricsReport:
    """Confusion counts and metrics with faulted as the positive class."""
    if isinstance(threshold, ThresholdModel):
        orientation = orientation or threshold.orientation
        threshold = threshold.threshold
    orientation = orientation or HIGHER
    labels = []
    for s in scores:
        if s.label not in (HEALTHY, FAULTED):
            raise ContractError(f"record {s.cycle_ids} is unlabeled")
        labels.append(s.label == FAULTED)
    truth = np.array(labels, dtype=bool)
    pred = predict(_values(scores), threshold, orientation)
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    tn = int(np.sum(~pred & ~truth))
    fn = int(np.sum(~pred & truth))
    return metrics_from_counts(tp, fp, tn, fn)


# ---------------------------------------------------------------------------
# output files
# ---------------------------------------------------------------------------


def _cell(v) -> str:
    return "" if v is None else repr(v)


def _opt(text: str):
    return float(text) if text else None


def write_scores_csv(records: Sequence[ScoreRecord], path, with_method: bool = False) -> None:
    cols = SCORE_COLUMNS + (("method",) if with_method else ())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in records:
            row = [r.granularity, ";".join(r.cycle_ids), "" if r.window_start is None else r.window_start,
                   r.label, _cell(r.mse), _cell(r.mae), _cell(r.std_abs), repr(r.J)]
            if with_method:
                row.append(r.method or "")
            w.writerow(row)


def read_scores_csv(path) -> list[ScoreRecord]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append(ScoreRecord(
                row["granularity"], tuple(row["cycle_id"].split(";")), row["label"], float(row["J"]),
                _opt(row["mse"]), _opt(row["mae"]), _opt(row["std_abs"]),
                int(row["window_start"]) if row["window_start"] else None, row.get("method") or None,
            ))
    return out


def report_dict(metrics: MetricsReport, threshold: Optional[ThresholdModel] = None, **extra) -> dict:
    d = {"metrics": {k: getattr(metrics, k) for k in ("accuracy", "precision", "recall", "f1")},
         "confusion": {k: getattr(metrics, k) for k in ("tp", "fp", "tn", "fn")}}
    if threshold is not None:
        t = asdict(threshold)
        d["threshold"] = t
    d.update(extra)
    return d


def write_report(report: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def boxplot_svg(groups: dict, title: str = "", threshold: Optional[float] = None,
                ylabel: str = "J(X, X')", width: int = 480, height: int = 320) -> str:
    """Static SVG with one five-number box per category."""
    summaries = {k: summarize(v) for k, v in groups.items() if len(v)}
    if not summaries:
        raise ContractError("nothing to plot")
    lo = min(s.min for s in summaries.values())
    hi = max(s.max for s in summaries.values())
    if threshold is not None:
        lo, hi = min(lo, threshold), max(hi, threshold)
    span = (hi - lo) or 1.0
    lo, hi = lo - 0.05 * span, hi + 0.05 * span
    left, right, top, bottom = 70, 20, 30, 40
    pw, ph = width - left - right, height - top - bottom
    y = lambda v: top + ph * (hi - v) / (hi - lo)  # noqa: E731
    slot = pw / len(summaries)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{title}</text>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
        f'<text x="14" y="{top + ph / 2:.1f}" transform="rotate(-90 14 {top + ph / 2:.1f})" '
        f'text-anchor="middle">{ylabel}</text>',
    ]
    for k in range(5):
        v = lo + (hi - lo) * k / 4
        parts.append(f'<line x1="{left - 4}" y1="{y(v):.1f}" x2="{left}" y2="{y(v):.1f}" stroke="black"/>')
        parts.append(f'<text x="{left - 6}" y="{y(v) + 4:.1f}" text-anchor="end">{v:.3g}</text>')
    for i, (name, s) in enumerate(summaries.items()):
        cx = left + slot * (i + 0.5)
        bw = min(60.0, slot * 0.5)
        color = "#c0392b" if name == FAULTED else "#2471a3"
        parts += [
            f'<line x1="{cx:.1f}" y1="{y(s.max):.1f}" x2="{cx:.1f}" y2="{y(s.min):.1f}" stroke="{color}"/>',
            f'<line x1="{cx - bw / 4:.1f}" y1="{y(s.max):.1f}" x2="{cx + bw / 4:.1f}" y2="{y(s.max):.1f}" stroke="{color}"/>',
            f'<line x1="{cx - bw / 4:.1f}" y1="{y(s.min):.1f}" x2="{cx + bw / 4:.1f}" y2="{y(s.min):.1f}" stroke="{color}"/>',
            f'<rect x="{cx - bw / 2:.1f}" y="{y(s.q75):.1f}" width="{bw:.1f}" '
            f'height="{max(y(s.q25) - y(s.q75), 0.5):.1f}" fill="white" stroke="{color}"/>',
            f'<line x1="{cx - bw / 2:.1f}" y1="{y(s.median):.1f}" x2="{cx + bw / 2:.1f}" y2="{y(s.median):.1f}" '
            f'stroke="{color}" stroke-width="2"/>',
            f'<text x="{cx:.1f}" y="{top + ph + 16}" text-anchor="middle">{name}</text>',
        ]
    if threshold is not None:
        parts.append(f'<line x1="{left}" y1="{y(threshold):.1f}" x2="{left + pw}" y2="{y(threshold):.1f}" '
                     f'stroke="gray" stroke-dasharray="4 3"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
