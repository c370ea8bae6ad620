"""Intention accuracy, confusion matrices and trajectory metrics (minADE, minFDE, miss rate, mAP approx)."""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .render import glyph_mask
from .png import encode_png
from .scenario import DT, FUTURE_FRAMES, AgentTrack, AgentType, IntentionLabel


class LengthMismatch(ValueError):
    pass


class EmptyPrediction(ValueError):
    pass


class NoValidFrames(ValueError):
    pass


CONFUSION_CLASSES = (
    IntentionLabel.STRAIGHT,
    IntentionLabel.LEFT_TURN,
    IntentionLabel.RIGHT_TURN,
    IntentionLabel.LEFT_U_TURN,
    IntentionLabel.RIGHT_U_TURN,
    IntentionLabel.STATIONARY,
)

_STRAIGHTS = {IntentionLabel.STRAIGHT, IntentionLabel.STRAIGHT_LEFT, IntentionLabel.STRAIGHT_RIGHT}


def merge_straight(label: IntentionLabel) -> IntentionLabel:
    return IntentionLabel.STRAIGHT if label in _STRAIGHTS else label


@dataclass
class IntentionEvalResult:
    acc_first: float
    acc_any: float
    acc_merged: float
    confusion: np.ndarray
    classes: tuple[IntentionLabel, ...]
    n: int

    def to_dict(self) -> dict:
        return {
            "acc_first": self.acc_first,
            "acc_any": self.acc_any,
            "acc_merged": self.acc_merged,
            "confusion": self.confusion.astype(int).tolist(),
            "classes": [c.word for c in self.classes],
            "n": self.n,
        }


def intention_accuracy(preds: Sequence[Sequence[IntentionLabel]], gts: Sequence[IntentionLabel]) -> IntentionEvalResult:
    """First-intention, any-intention and straight-merged accuracy plus a 6-class first-intention confusion.

    Confusion rows are ground truth, columns predictions, both after merging
    Straight, Straight-Left and Straight-Right.
    """
    if len(preds) != len(gts):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(gts)} ground truths")
    n = len(gts)
    k = len(CONFUSION_CLASSES)
    conf = np.zeros((k, k), dtype=np.int64)
    if n == 0:
        return IntentionEvalResult(0.0, 0.0, 0.0, conf, CONFUSION_CLASSES, 0)
    first = anyhit = merged = 0
    for i, (p, g) in enumerate(zip(preds, gts)):
        if len(p) == 0:
            raise EmptyPrediction(f"prediction {i} is empty")
        p = [IntentionLabel(x) for x in p]
        g = IntentionLabel(g)
        first += p[0] is g
        anyhit += g in p
        mg = merge_straight(g)
        merged += any(merge_straight(x) is mg for x in p)
        conf[CONFUSION_CLASSES.index(mg), CONFUSION_CLASSES.index(merge_straight(p[0]))] += 1
    return IntentionEvalResult(first / n, anyhit / n, merged / n, conf, CONFUSION_CLASSES, n)


# ---------------------------------------------------------------------------
# trajectory metrics


def _check(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None):
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.ndim == 2:
        pred = pred[None]
    if pred.shape[0] < 1 or pred.shape[1:] != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    mask = np.ones(len(gt), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise NoValidFrames("ground truth has no valid frame")
    return pred, gt, mask


def _dists(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    return np.sqrt(((pred - gt[None]) ** 2).sum(axis=-1))


def min_ade(pred_trajs: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Smallest (over candidates) mean pointwise distance on valid frames."""
    pred, gt, mask = _check(pred_trajs, gt, mask)
    return float(_dists(pred, gt)[:, mask].mean(axis=1).min())


def endpoint_errors(pred_trajs: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Per-candidate distance at the last valid ground-truth frame."""
    pred, gt, mask = _check(pred_trajs, gt, mask)
    last = int(np.flatnonzero(mask)[-1])
    return np.sqrt(((pred[:, last] - gt[last]) ** 2).sum(axis=-1))


def min_fde(pred_trajs: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> float:
    return float(endpoint_errors(pred_trajs, gt, mask).min())


def miss_rate(
    pred_trajs: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    masks: Sequence[np.ndarray | None] | None = None,
    threshold: float = 2.0,
) -> float:
    """Fraction of agents with no candidate endpoint within ``threshold`` meters of the true endpoint."""
    if len(pred_trajs) != len(gts):
        raise LengthMismatch("pred_trajs and gts differ in length")
    if not len(gts):
        return 0.0
    masks = [None] * len(gts) if masks is None else masks
    misses = sum(endpoint_errors(p, g, m).min() > threshold for p, g, m in zip(pred_trajs, gts, masks))
    return misses / len(gts)


def average_precision(scores: Sequence[float], is_tp: Sequence[bool], n_positive: int) -> float:
    """Trapezoid area under the precision-recall curve, starting from (recall 0, precision 1).

    Items are ranked by descending score; equal scores keep input order.
    """
    if n_positive <= 0:
        return 0.0
    order = np.argsort(-np.asarray(scores, dtype=float), kind="stable")
    tp = np.asarray(is_tp, dtype=bool)[order]
    ctp = np.cumsum(tp)
    rank = np.arange(1, len(tp) + 1)
    recall = np.concatenate([[0.0], ctp / n_positive])
    precision = np.concatenate([[1.0], ctp / rank])
    return float(np.sum((recall[1:] - recall[:-1]) * (precision[1:] + precision[:-1]) / 2))


def map_approx(
    pred_trajs: Sequence[np.ndarray],
    confidences: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    buckets: Sequence[object],
    masks: Sequence[np.ndarray | None] | None = None,
    threshold: float = 2.0,
) -> float:
    """Approximate mAP: per ground-truth intention bucket, rank every candidate by confidence.

    A candidate is a true positive when its endpoint is within ``threshold`` and
    it is its agent's highest-confidence such candidate. Bucket APs are averaged
    over non-empty buckets. This is a simplification, not the official Waymo
    definition.
    """
    n = len(gts)
    if not (len(pred_trajs) == len(confidences) == len(buckets) == n):
        raise LengthMismatch("inputs differ in length")
    masks = [None] * n if masks is None else masks
    per_bucket: dict[object, tuple[list, list, int]] = {}
    for p, c, g, b, m in zip(pred_trajs, confidences, gts, buckets, masks):
        err = endpoint_errors(p, g, m)
        c = np.asarray(c, dtype=float)
        if len(c) != len(err):
            raise LengthMismatch("one confidence per candidate required")
        hits = np.flatnonzero(err <= threshold)
        best = -1
        if hits.size:
            best = int(hits[np.argsort(-c[hits], kind="stable")[0]])
        scores, tps, npos = per_bucket.setdefault(b, ([], [], 0))
        scores.extend(c.tolist())
        tps.extend(k == best for k in range(len(c)))
        per_bucket[b] = (scores, tps, npos + 1)
    if not per_bucket:
        return 0.0
    aps = [average_precision(s, t, npos) for s, t, npos in per_bucket.values()]
    return float(np.mean(aps))


@dataclass
class TrajectoryMetrics:
    minADE: float
    minFDE: float
    miss_rate: float
    map_approx: float
    n: int
    per_type: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def trajectory_metrics(
    pred_trajs: Sequence[np.ndarray],
    confidences: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    masks: Sequence[np.ndarray | None],
    agent_types: Sequence[AgentType],
    buckets: Sequence[object],
    threshold: float = 2.0,
    breakdown: bool = True,
) -> TrajectoryMetrics:
    n = len(gts)
    if n == 0:
        return TrajectoryMetrics(0.0, 0.0, 0.0, 0.0, 0)
    ade = float(np.mean([min_ade(p, g, m) for p, g, m in zip(pred_trajs, gts, masks)]))
    fde = float(np.mean([min_fde(p, g, m) for p, g, m in zip(pred_trajs, gts, masks)]))
    mr = miss_rate(pred_trajs, gts, masks, threshold)
    mp = map_approx(pred_trajs, confidences, gts, buckets, masks, threshold)
    per_type = {}
    if breakdown:
        for t in (AgentType.VEHICLE, AgentType.PEDESTRIAN, AgentType.CYCLIST):
            idx = [i for i, a in enumerate(agent_types) if AgentType(a) is t]
            if idx:
                sub = trajectory_metrics(*([x[i] for i in idx] for x in (pred_trajs, confidences, gts, masks,
                                                                            agent_types, buckets)),
                                         threshold=threshold, breakdown=False)
                per_type[t.value] = {k: v for k, v in sub.to_dict().items() if k != "per_type"}
    return TrajectoryMetrics(ade, fde, mr, mp, n, per_type)


# ---------------------------------------------------------------------------
# baseline predictor

# (speed factor, yaw rate rad/s) per candidate
BASELINE_MODES = ((1.0, 0.0), (0.6, 0.0), (1.3, 0.0), (1.0, 0.25), (1.0, -0.25), (0.0, 0.0))
_MODE_INTENT = {
    0: {IntentionLabel.STRAIGHT, IntentionLabel.STRAIGHT_LEFT, IntentionLabel.STRAIGHT_RIGHT},
    1: {IntentionLabel.STRAIGHT},
    2: {IntentionLabel.STRAIGHT},
    3: {IntentionLabel.LEFT_TURN, IntentionLabel.LEFT_U_TURN},
    4: {IntentionLabel.RIGHT_TURN, IntentionLabel.RIGHT_U_TURN},
    5: {IntentionLabel.STATIONARY},
}


def baseline_candidates(track: AgentTrack, intention: IntentionLabel | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Six constant-turn-rate rollouts from the current state, with confidences.

    When an intention is supplied, candidates consistent with it get their
    confidence doubled before renormalization; this is how a context can move
    the ranking-based metric.
    """
    cur = track.current
    v = cur.speed
    heading = math.atan2(cur.vy, cur.vx) if v > 0.1 else cur.heading
    t = np.arange(1, FUTURE_FRAMES + 1) * DT
    cands = np.empty((len(BASELINE_MODES), FUTURE_FRAMES, 2))
    for k, (sf, w) in enumerate(BASELINE_MODES):
        h = heading + w * t
        step = sf * v * DT
        cands[k, :, 0] = cur.x + np.cumsum(step * np.cos(h))
        cands[k, :, 1] = cur.y + np.cumsum(step * np.sin(h))
    conf = np.array([0.3, 0.15, 0.15, 0.15, 0.15, 0.1])
    if intention is not None:
        for k, labs in _MODE_INTENT.items():
            if intention in labs:
                conf[k] *= 2
    return cands, conf / conf.sum()


def future_arrays(track: AgentTrack) -> tuple[np.ndarray, np.ndarray]:
    xy = np.array([[st.x, st.y] for st in track.future], dtype=float)
    mask = np.array([st.valid for st in track.future], dtype=bool)
    return xy, mask


# ---------------------------------------------------------------------------
# report


def format_table(intent: IntentionEvalResult | None, traj: TrajectoryMetrics | None, extras: dict | None = None) -> str:
    lines = ["INTENTION ACCURACY", f"{'n':>6} {'acc_first':>10} {'acc_any':>10} {'acc_merged':>10}"]
    if intent is not None:
        lines.append(f"{intent.n:>6} {intent.acc_first:>10.4f} {intent.acc_any:>10.4f} {intent.acc_merged:>10.4f}")
        lines += ["", "CONFUSION (rows ground truth, columns first intention)"]
        w = max(len(c.word) for c in intent.classes)
        lines.append(" " * (w + 2) + "".join(f" {i + 1:>5}" for i in range(len(intent.classes))))
        for i, c in enumerate(intent.classes):
            lines.append(f"{i + 1} {c.word:<{w}}" + "".join(f" {v:>5d}" for v in intent.confusion[i]))
    lines += ["", "TRAJECTORY METRICS", f"{'type':<11} {'n':>6} {'mAP~':>8} {'minADE':>8} {'minFDE':>8} {'MR':>8}"]
    if traj is not None:
        rows = [("ALL", traj.to_dict())] + sorted(traj.per_type.items())
        for name, m in rows:
            lines.append(f"{name:<11} {m['n']:>6} {m['map_approx']:>8.4f} {m['minADE']:>8.4f} "
                         f"{m['minFDE']:>8.4f} {m['miss_rate']:>8.4f}")
    if extras:
        lines += ["", "OTHER"]
        for k in sorted(extras):
            v = extras[k]
            lines.append(f"{k}: {v:.4f}" if isinstance(v, float) else f"{k}: {v}")
    return "\n".join(lines) + "\n"


def confusion_png(conf: np.ndarray, cell: int = 40) -> bytes:
    """Heatmap of a confusion matrix, white to blue by row-normalized share, counts drawn in cells."""
    k = conf.shape[0]
    pad = cell // 2
    side = pad + k * cell + 1
    px = np.full((side, side, 4), 255, dtype=np.uint8)
    rows = conf.sum(axis=1, keepdims=True)
    share = np.divide(conf, rows, out=np.zeros(conf.shape, dtype=float), where=rows > 0)
    for i in range(k):
        for j in range(k):
            r0, c0 = pad + i * cell, pad + j * cell
            s = share[i, j]
            px[r0:r0 + cell, c0:c0 + cell, :3] = np.round(255 - s * np.array([225, 155, 40])).astype(np.uint8)
            px[r0, c0:c0 + cell, :3] = 128
            px[r0:r0 + cell, c0, :3] = 128
            text = str(int(conf[i, j]))
            m = glyph_mask(text, 2 if len(text) <= 4 else 1)
            rr, cc = r0 + (cell - m.shape[0]) // 2, c0 + (cell - m.shape[1]) // 2
            ink = (255, 255, 255) if s > 0.5 else (0, 0, 0)
            px[rr:rr + m.shape[0], cc:cc + m.shape[1]][m, :3] = ink
        idx = glyph_mask(str(i + 1), 1)
        px[pad + i * cell + cell // 2 - 2:pad + i * cell + cell // 2 + 3, 4:4 + idx.shape[1]][idx, :3] = 0
        px[4:9, pad + i * cell + cell // 2 - 1:pad + i * cell + cell // 2 - 1 + idx.shape[1]][idx, :3] = 0
    px[side - 1, pad:, :3] = 128
    px[pad:, side - 1, :3] = 128
    return encode_png(px)


def report(
    out_dir: str | os.PathLike,
    intent: IntentionEvalResult | None = None,
    traj: TrajectoryMetrics | None = None,
    extras: dict | None = None,
) -> dict:
    """Write report.txt, metrics.json and confusion.png; returns the metrics dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics = {
        "intention": None if intent is None else intent.to_dict(),
        "trajectory": None if traj is None else traj.to_dict(),
        "extras": dict(extras or {}),
    }
    (out / "report.txt").write_text(format_table(intent, traj, extras), encoding="utf-8")
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    conf = intent.confusion if intent is not None else np.zeros((len(CONFUSION_CLASSES),) * 2, dtype=np.int64)
    (out / "confusion.png").write_bytes(confusion_png(conf))
    return metrics
