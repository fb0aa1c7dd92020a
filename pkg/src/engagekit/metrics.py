"""Losses and the concordance correlation coefficient (CCC).

CCC follows Lin's definition with population (1/n) moments:

    ccc(x, y) = 2 cov(x, y) / (var(x) + var(y) + (mean(x) - mean(y))^2)

The same moments are used in the differentiable CCC loss so metric and loss
agree. Session evaluation runs the window pipeline (segment, predict, stitch
the cores, clamp) and scores each session's full timeline.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .segmentation import make_segments, build_window_batch, reassemble
from .tensor import Tensor


def _masked_pair(pred: Tensor, label, mask):
    label = T.constant(np.asarray(label, dtype=pred.dtype))
    if label.shape != pred.shape:
        raise T.ShapeError(f"pred shape {pred.shape} != label shape {label.shape}")
    if mask is None:
        m = np.ones(pred.shape, dtype=pred.data.dtype)
    else:
        m = np.asarray(mask, dtype=pred.data.dtype)
        if m.shape != pred.shape:
            raise T.ShapeError(f"mask shape {m.shape} != pred shape {pred.shape}")
    count = float(m.sum())
    return label, T.constant(m), count


def mse(pred, label, mask=None) -> Tensor:
    """Mean squared error over the masked frames; differentiable in `pred`."""
    pred = T.as_tensor(pred)
    label, m, count = _masked_pair(pred, label, mask)
    if count < 1:
        raise ValueError("mse: mask selects no frames")
    diff = T.sub(pred, label)
    return T.scale(T.tensor_sum(T.mul(T.mul(diff, diff), m)), 1.0 / count)


def ccc(x, y) -> float:
    """Concordance correlation coefficient of two series, in [-1, 1].

    Degenerate case (both series constant with equal means) is defined as 0
    and flagged with a warning.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"ccc: need two equal-length 1-d series, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise ValueError(f"ccc: need length >= 2, got {x.size}")
    # An exactly-constant series has zero variance and zero covariance by
    # definition; computing them numerically would leave rounding dust.
    const_x = bool(np.all(x == x[0]))
    const_y = bool(np.all(y == y[0]))
    mx = float(x[0]) if const_x else x.mean()
    my = float(y[0]) if const_y else y.mean()
    vx = 0.0 if const_x else np.mean((x - mx) ** 2)
    vy = 0.0 if const_y else np.mean((y - my) ** 2)
    cov = 0.0 if (const_x or const_y) else np.mean((x - mx) * (y - my))
    denom = vx + vy + (mx - my) ** 2
    if denom == 0.0:
        warnings.warn("ccc: both series constant with equal means; returning 0",
                      RuntimeWarning, stacklevel=2)
        return 0.0
    return float(2.0 * cov / denom)


def ccc_loss(pred, label, mask=None, per_window: bool = False) -> Tensor:
    """1 - CCC over the masked frames, differentiable in `pred`.

    By default all masked frames of the batch are pooled into one pair of
    series; `per_window=True` instead averages per-window losses over the
    leading axis (each window needs >= 2 masked frames).
    """
    pred = T.as_tensor(pred)
    if per_window:
        if pred.ndim < 2:
            raise T.ShapeError("per-window ccc_loss needs a batch dimension")
        rows = pred.shape[0]
        losses = []
        for i in range(rows):
            row_mask = None if mask is None else np.asarray(mask)[i]
            losses.append(ccc_loss(T.narrow(pred, 0, i, 1), np.asarray(label)[i][None],
                                   None if row_mask is None else row_mask[None]))
        total = losses[0]
        for piece in losses[1:]:
            total = T.add(total, piece)
        return T.scale(total, 1.0 / rows)

    label, m, count = _masked_pair(pred, label, mask)
    if count < 2:
        raise ValueError(f"ccc_loss: need >= 2 masked frames, got {int(count)}")
    inv = 1.0 / count
    xm = T.mul(pred, m)
    mean_x = T.scale(T.tensor_sum(xm), inv)
    mean_y = T.scale(T.tensor_sum(T.mul(label, m)), inv)
    # Center, re-mask so padded positions contribute nothing to the moments.
    cx = T.mul(T.sub(pred, mean_x), m)
    cy = T.mul(T.sub(label, mean_y), m)
    var_x = T.scale(T.tensor_sum(T.mul(cx, cx)), inv)
    var_y = T.scale(T.tensor_sum(T.mul(cy, cy)), inv)
    cov = T.scale(T.tensor_sum(T.mul(cx, cy)), inv)
    gap = T.sub(mean_x, mean_y)
    denom = T.add(T.add(var_x, var_y), T.mul(gap, gap))
    if float(denom.data) == 0.0:
        raise ValueError("ccc_loss: degenerate batch (both series constant, equal means)")
    return T.shift(T.scale(T.div(cov, denom), -2.0), 1.0)


@dataclass
class EvalReport:
    session_ids: list[str] = field(default_factory=list)
    ccc_per_session: list[float] = field(default_factory=list)
    mse_per_session: list[float] = field(default_factory=list)
    frame_counts: list[int] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    @property
    def mean_ccc(self) -> float:
        return float(np.mean(self.ccc_per_session)) if self.ccc_per_session else float("nan")

    def to_dict(self) -> dict:
        return {
            "sessions": [
                {"session_id": sid, "ccc": c, "mse": m, "frames": n}
                for sid, c, m, n in zip(self.session_ids, self.ccc_per_session,
                                        self.mse_per_session, self.frame_counts)
            ],
            "mean_ccc": self.mean_ccc,
            "skipped": self.skipped,
        }

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["session_id", "ccc"])
            for sid, c in zip(self.session_ids, self.ccc_per_session):
                writer.writerow([sid, repr(c)])


class LabelEchoPredictor:
    """Oracle predictor that returns each window's labels; exercises the
    segment/stitch plumbing end to end (perfect plumbing gives CCC = 1)."""

    arch = "oracle"

    def __init__(self, core_len: int = 32, context_len: int = 32):
        self.core_len = core_len
        self.context_len = context_len

    def predict_windows(self, batch) -> np.ndarray:
        return np.asarray(batch.labels)


def predict_session(model, session, batch_size: int = 64) -> np.ndarray:
    """Segment a session, run the model over window batches, stitch the cores
    back together, clamp to the label range."""
    segments = make_segments(session.num_frames, model.core_len, model.context_len)
    preds: list[np.ndarray] = []
    for lo in range(0, len(segments), batch_size):
        chunk = segments[lo:lo + batch_size]
        batch = build_window_batch(session, chunk)
        out = model.predict_windows(batch)
        preds.extend(out[i] for i in range(out.shape[0]))
    series = reassemble(preds, segments, session.num_frames)
    return np.clip(series, 0.0, 1.0)


def evaluate_sessions(model, sessions, batch_size: int = 64) -> EvalReport:
    """Score a model per session (CCC and MSE against the target labels) and
    average across sessions; label-less sessions are skipped with a notice."""
    report = EvalReport()
    for session in sessions:
        if session.roles["target"].labels is None:
            warnings.warn(f"session '{session.session_id}' has no labels; skipped",
                          RuntimeWarning, stacklevel=2)
            report.skipped.append(session.session_id)
            continue
        series = predict_session(model, session, batch_size=batch_size)
        labels = session.roles["target"].labels
        report.session_ids.append(session.session_id)
        report.ccc_per_session.append(ccc(series, labels))
        report.mse_per_session.append(float(np.mean((series - labels) ** 2)))
        report.frame_counts.append(session.num_frames)
    return report
