"""Anomaly scoring and the point-adjustment evaluation protocol.

Scores are per-timestamp prediction errors. Evaluation supports three
adjustment modes: ``raw`` (point-wise), ``pa`` (a labeled segment counts
as fully detected if any point inside it is flagged), and ``kpa`` (the
segment only counts when the first flag arrives within ``k`` steps of its
onset; late flags make the whole segment a miss).

``best_f1`` sweeps every distinct score as a candidate threshold. It never
re-adjusts per threshold: precomputed per-segment detection statistics and
sorted negative-position scores give each candidate's confusion counts in
O(log n), so the sweep is O(n log n) overall yet count-for-count identical
to a naive recount.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .data import Scaler, SeriesMatrix, apply_minmax, make_windows
from .errors import DataError
from .model import CadModel

MODES = ("raw", "pa", "kpa")


@dataclass
class ScoreSeries:
    """Per-timestamp scores aligned to the test series; indices before
    ``valid_from`` hold a copy of the first genuine score."""

    scores: np.ndarray
    valid_from: int

    def __len__(self) -> int:
        return len(self.scores)


class BestF1(NamedTuple):
    threshold: float
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class EvalRow:
    """One line of a metrics report."""

    entity: str
    mode: str
    k: int | None
    threshold: float
    precision: float
    recall: float
    f1: float


def score_series(
    model: CadModel,
    test: SeriesMatrix,
    scaler: Scaler | None = None,
    batch: int = 1024,
) -> ScoreSeries:
    """Eval-mode prediction error at every predictable timestamp."""
    if test.shape[1] != model.n_metrics:
        raise DataError(
            f"series has {test.shape[1]} metrics but model expects {model.n_metrics}"
        )
    series = apply_minmax(scaler, test) if scaler is not None else test
    cfg = model.config
    windows = make_windows(series, cfg.l, cfg.h)
    genuine = np.empty(len(windows), dtype=np.float64)
    for start in range(0, len(windows), batch):
        xb = windows.windows[start : start + batch]
        yb = windows.targets[start : start + batch].astype(cfg.np_dtype)
        pred = model.forward_batch(xb, mode="eval")
        err = pred.data - yb
        genuine[start : start + len(xb)] = (err * err).mean(axis=1)

    valid_from = cfg.l + cfg.h - 1
    scores = np.empty(test.shape[0], dtype=np.float64)
    scores[valid_from:] = genuine
    scores[:valid_from] = genuine[0]
    return ScoreSeries(scores=scores, valid_from=valid_from)


# --- adjustment and confusion -------------------------------------------------


def _as_binary(name: str, values) -> np.ndarray:
    arr = np.asarray(values)
    out = arr.astype(np.int8)
    if arr.ndim != 1 or not np.array_equal(out, arr) or not np.isin(out, (0, 1)).all():
        raise ValueError(f"{name} must be a 1-D binary vector")
    return out


def _segments(labels: np.ndarray) -> list[tuple[int, int]]:
    """[start, end) bounds of maximal runs of 1-labels."""
    edges = np.flatnonzero(np.diff(np.concatenate(([0], labels, [0]))))
    return list(zip(edges[0::2], edges[1::2]))


def point_adjust(labels, preds) -> np.ndarray:
    """Flood each labeled segment with 1s if any point inside it is flagged."""
    labels = _as_binary("labels", labels)
    preds = _as_binary("preds", preds)
    if len(labels) != len(preds):
        raise ValueError(f"length mismatch: {len(labels)} labels vs {len(preds)} preds")
    adjusted = preds.copy()
    for start, end in _segments(labels):
        if adjusted[start:end].any():
            adjusted[start:end] = 1
    return adjusted


def kth_point_adjust(labels, preds, k: int) -> np.ndarray:
    """Like PA, but the flag must arrive within ``k`` steps of segment onset
    (delay 0 = at onset); otherwise the whole segment is cleared to 0."""
    labels = _as_binary("labels", labels)
    preds = _as_binary("preds", preds)
    if len(labels) != len(preds):
        raise ValueError(f"length mismatch: {len(labels)} labels vs {len(preds)} preds")
    if k < 0:
        raise ValueError(f"delay budget k must be >= 0, got {k}")
    adjusted = preds.copy()
    for start, end in _segments(labels):
        window_end = min(start + k + 1, end)
        adjusted[start:end] = 1 if preds[start:window_end].any() else 0
    return adjusted


def _prf_from_counts(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def prf(labels, preds) -> tuple[float, float, float]:
    """Precision, recall, F1 with the zero-denominator convention P=R=F1=0."""
    labels = _as_binary("labels", labels)
    preds = _as_binary("preds", preds)
    if len(labels) != len(preds):
        raise ValueError(f"length mismatch: {len(labels)} labels vs {len(preds)} preds")
    tp = int(np.sum((labels == 1) & (preds == 1)))
    fp = int(np.sum((labels == 0) & (preds == 1)))
    fn = int(np.sum((labels == 1) & (preds == 0)))
    return _prf_from_counts(tp, fp, fn)


# --- threshold sweep ----------------------------------------------------------


def best_f1(scores, labels, mode: str = "pa", k: int | None = None) -> BestF1:
    """Best (threshold, P, R, F1) over all candidate thresholds.

    Candidates are the distinct score values plus +inf (the all-negative
    prediction); the rule is ``score >= threshold`` and ties on F1 go to
    the smallest threshold.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "kpa":
        if k is None or k < 0:
            raise ValueError("kpa mode needs a delay budget k >= 0")
    scores = np.asarray(getattr(scores, "scores", scores), dtype=np.float64)
    labels = _as_binary("labels", labels)
    if len(scores) != len(labels):
        raise ValueError(f"length mismatch: {len(scores)} scores vs {len(labels)} labels")
    if not np.isfinite(scores).all():
        raise ValueError("scores contain non-finite values")
    if not labels.any():
        raise ValueError("labels contain no positive points; best F1 is undefined")

    negatives = np.sort(scores[labels == 0])
    candidates = np.concatenate((np.unique(scores), [np.inf]))

    if mode == "raw":
        positives = np.sort(scores[labels == 1])
        tp_at = len(positives) - np.searchsorted(positives, candidates, side="left")
        fn_at = len(positives) - tp_at
    else:
        segs = _segments(labels)
        stats = np.empty(len(segs))
        lengths = np.empty(len(segs), dtype=np.int64)
        for i, (start, end) in enumerate(segs):
            window_end = end if mode == "pa" else min(start + k + 1, end)
            stats[i] = scores[start:window_end].max()
            lengths[i] = end - start
        order = np.argsort(stats, kind="stable")
        stats = stats[order]
        prefix = np.concatenate(([0], np.cumsum(lengths[order])))
        total = prefix[-1]
        # TP(theta) = total length of segments whose detection stat >= theta
        below = np.searchsorted(stats, candidates, side="left")
        tp_at = total - prefix[below]
        fn_at = total - tp_at

    fp_at = len(negatives) - np.searchsorted(negatives, candidates, side="left")

    best = BestF1(threshold=np.inf, precision=0.0, recall=0.0, f1=-1.0)
    for theta, tp, fp, fn in zip(candidates, tp_at, fp_at, fn_at):
        precision, recall, f1 = _prf_from_counts(int(tp), int(fp), int(fn))
        if f1 > best.f1:  # ascending candidates: first max keeps smallest theta
            best = BestF1(float(theta), precision, recall, f1)
    return best


def aggregate_entities(per_entity) -> tuple[float, float, float, float]:
    """(mean F1, mean P, mean R, F1* = harmonic mean of the P/R means)."""
    rows = list(per_entity)
    if not rows:
        raise ValueError("aggregate over an empty entity list")
    p_bar = sum(p for p, _, _ in rows) / len(rows)
    r_bar = sum(r for _, r, _ in rows) / len(rows)
    f1_mean = sum(f for _, _, f in rows) / len(rows)
    f1_star = 2.0 * p_bar * r_bar / (p_bar + r_bar) if p_bar + r_bar else 0.0
    return f1_mean, p_bar, r_bar, f1_star


# --- plain-text interchange ----------------------------------------------------

_METRIC_COLUMNS = ("entity", "mode", "k", "threshold", "P", "R", "F1")


def write_scores(path, scores) -> None:
    values = np.asarray(getattr(scores, "scores", scores), dtype=np.float64)
    Path(path).write_text("".join(f"{v!r}\n" for v in values.tolist()))


def read_scores(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"scores file not found: {path}")
    try:
        return np.array([float(line) for line in path.read_text().split()])
    except ValueError:
        raise DataError(f"{path}: scores file must hold one real per line") from None


def write_metrics(path, rows: list[EvalRow]) -> None:
    lines = ["\t".join(_METRIC_COLUMNS)]
    for r in rows:
        k = "-" if r.k is None else str(r.k)
        lines.append(
            f"{r.entity}\t{r.mode}\t{k}\t{r.threshold!r}\t{r.precision!r}\t{r.recall!r}\t{r.f1!r}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_metrics(path) -> list[EvalRow]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"metrics file not found: {path}")
    lines = path.read_text().splitlines()
    if not lines or lines[0].split("\t") != list(_METRIC_COLUMNS):
        raise DataError(f"{path}: not a metrics report (missing column header)")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split("\t")
        if len(cells) != len(_METRIC_COLUMNS):
            raise DataError(f"{path}: malformed metrics row at line {lineno}")
        entity, mode, k, threshold, p, r, f1 = cells
        rows.append(
            EvalRow(
                entity=entity,
                mode=mode,
                k=None if k == "-" else int(k),
                threshold=float(threshold),
                precision=float(p),
                recall=float(r),
                f1=float(f1),
            )
        )
    return rows
