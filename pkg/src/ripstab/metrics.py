"""Mask-level evaluation: greedy IoU matching, precision/recall, AP, F-beta and Cohen's kappa."""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .annotations import DenseAnnotation
from .maskcore import BinaryMask, iou_matrix
from .records import Detection


class MissingAnnotationError(ValueError):
    pass


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    matched_pairs: list[tuple[int, int, float]] = field(default_factory=list)
    # per prediction, in input order
    correct: list[bool] = field(default_factory=list)


def _as_scored(preds) -> tuple[list[BinaryMask], list[float]]:
    masks, scores = [], []
    for p in preds:
        if isinstance(p, Detection):
            masks.append(p.mask)
            scores.append(float(p.score))
        else:
            m, s = p
            masks.append(m)
            scores.append(float(s))
    return masks, scores


def match_instances(preds, gts: Sequence[BinaryMask], iou_threshold: float = 0.5) -> MatchResult:
    """Greedy matching in descending score order.

    Each prediction takes the still-unmatched ground truth of highest IoU, provided
    that IoU is at least ``iou_threshold`` (and nonzero). ``preds`` holds
    :class:`Detection` objects or ``(mask, score)`` pairs.
    """
    masks, scores = _as_scored(preds)
    ious = iou_matrix(masks, list(gts))
    order = sorted(range(len(masks)), key=lambda i: -scores[i])
    taken = np.zeros(len(gts), dtype=bool)
    correct = [False] * len(masks)
    pairs = []
    for i in order:
        if not len(gts):
            break
        row = np.where(taken, -1.0, ious[i])
        j = int(np.argmax(row))
        if row[j] >= iou_threshold and row[j] > 0:
            taken[j] = True
            correct[i] = True
            pairs.append((i, j, float(ious[i, j])))
    tp = len(pairs)
    return MatchResult(tp=tp, fp=len(masks) - tp, fn=len(gts) - tp, matched_pairs=pairs, correct=correct)


def average_precision(correct: Sequence[bool], total_gt: int, scores: Sequence[float] | None = None,
                      coco_interp: bool = False) -> float:
    """Area under the precision-recall curve as the step sum over ranked predictions.

    ``correct`` must already be in descending-confidence order unless ``scores`` is
    given, in which case it is stably sorted by them first. With ``coco_interp`` the
    101-point interpolated variant is returned instead.
    """
    flags = np.asarray(correct, dtype=bool)
    if scores is not None:
        order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
        flags = flags[order]
    if total_gt == 0:
        if flags.size:
            warnings.warn("average precision with no ground truth instances is defined as 0", stacklevel=2)
        return 0.0
    if not flags.size:
        return 0.0
    tp = np.cumsum(flags)
    precision = tp / np.arange(1, flags.size + 1)
    recall = tp / total_gt
    if coco_interp:
        envelope = np.maximum.accumulate(precision[::-1])[::-1]
        thresholds = np.linspace(0.0, 1.0, 101)
        idx = np.searchsorted(recall, thresholds, side="left")
        vals = np.where(idx < recall.size, envelope[np.minimum(idx, recall.size - 1)], 0.0)
        return float(vals.mean())
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * precision))


def f_beta(precision: float, recall: float, beta: float = 2.0) -> float:
    b2 = beta * beta
    denom = b2 * precision + recall
    if denom == 0:
        return 0.0
    return (1 + b2) * precision * recall / denom


def cohen_kappa(labels_a, labels_b) -> float:
    """Chance-corrected agreement between two paired label sequences."""
    a = np.asarray(labels_a).ravel()
    b = np.asarray(labels_b).ravel()
    if a.size != b.size:
        raise ValueError(f"label sequences differ in length: {a.size} vs {b.size}")
    if a.size == 0:
        raise ValueError("cohen_kappa needs at least one labelled pair")
    cats, inv = np.unique(np.concatenate([a, b]), return_inverse=True)
    ia, ib = inv[: a.size], inv[a.size:]
    k = cats.size
    confusion = np.bincount(ia * k + ib, minlength=k * k).reshape(k, k) / a.size
    p_o = float(np.trace(confusion))
    p_e = float(confusion.sum(axis=1) @ confusion.sum(axis=0))
    if p_e >= 1.0:
        return 1.0
    return (p_o - p_e) / (1.0 - p_e)


def annotation_kappa(a, b, mode: str) -> float:
    """Kappa between two annotators.

    ``mode="pixel"``: ``a`` and ``b`` are sequences of masks (or one mask each),
    compared as rip / no-rip per pixel. ``mode="frame"``: per-frame boolean flags.
    """
    if mode == "pixel":
        return cohen_kappa(_pixel_labels(a), _pixel_labels(b))
    if mode == "frame":
        return cohen_kappa(np.asarray(a, dtype=bool), np.asarray(b, dtype=bool))
    raise ValueError(f"mode must be 'pixel' or 'frame', got {mode!r}")


def _pixel_labels(x) -> np.ndarray:
    if isinstance(x, BinaryMask):
        return x.bits.ravel()
    if isinstance(x, np.ndarray):
        return x.astype(bool).ravel()
    return np.concatenate([_pixel_labels(m) for m in x])


# --- stream evaluation -------------------------------------------------------


@dataclass
class EvalConfig:
    iou_threshold: float = 0.5
    score_threshold: float = 0.5
    coco_interp: bool = False


@dataclass
class Scores:
    precision: float
    recall: float
    ap50: float
    f1: float
    f2: float
    tp: int
    fp: int
    fn: int
    frames_evaluated: int

    @classmethod
    def from_counts(cls, tp, fp, fn, ap, frames) -> "Scores":
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        return cls(p, r, ap, f_beta(p, r, 1.0), f_beta(p, r, 2.0), tp, fp, fn, frames)


@dataclass
class EvalReport:
    per_video: dict[str, Scores]
    aggregate: Scores
    config: EvalConfig
    fps: float | None = None

    def to_dict(self) -> dict:
        d = {
            "config": asdict(self.config),
            "aggregate": asdict(self.aggregate),
            "per_video": {vid: asdict(s) for vid, s in self.per_video.items()},
        }
        if self.fps is not None:
            d["fps"] = self.fps
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_text(self) -> str:
        cols = ("precision", "recall", "ap50", "f1", "f2", "tp", "fp", "fn", "frames_evaluated")
        heads = ("video", "P", "R", "AP50", "F1", "F2", "TP", "FP", "FN", "frames")
        rows = [(vid, s) for vid, s in self.per_video.items()] + [("ALL", self.aggregate)]
        cells = [heads] + [
            (vid,) + tuple(f"{getattr(s, c):.4f}" if isinstance(getattr(s, c), float) else str(getattr(s, c))
                           for c in cols)
            for vid, s in rows
        ]
        widths = [max(len(r[i]) for r in cells) for i in range(len(heads))]
        lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
                 for r in cells]
        if self.fps is not None:
            lines.append(f"fps: {self.fps:.2f}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = list(Scores.__dataclass_fields__)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["video_id", *names])
        for vid, s in self.per_video.items():
            w.writerow([vid, *(getattr(s, n) for n in names)])
        return buf.getvalue()


def evaluate_stream(
    preds: Mapping[str, Mapping[int, Sequence[Detection]]],
    gts: Mapping[str, Mapping[int, DenseAnnotation]],
    cfg: EvalConfig | None = None,
    fps: float | None = None,
) -> EvalReport:
    """Score a prediction stream against annotations on manually annotated frames only.

    Precision and recall count predictions scoring at least ``score_threshold``;
    AP50 ranks every prediction. The aggregate pools counts (micro average) and
    predictions across all videos.
    """
    cfg = cfg or EvalConfig()
    missing = []
    for vid, frames in preds.items():
        ann = gts.get(vid, {})
        lost = sorted(f for f, dets in frames.items() if dets and f not in ann)
        if lost:
            missing.append(f"{vid}: {lost}")
    if missing:
        raise MissingAnnotationError("predictions on frames with no annotation record: " + "; ".join(missing))

    per_video: dict[str, Scores] = {}
    all_flags: list[bool] = []
    all_scores: list[float] = []
    totals = np.zeros(3, dtype=np.int64)
    total_gt = frames_total = 0
    videos = list(gts) + [v for v in preds if v not in gts]
    for vid in videos:
        ann = gts.get(vid, {})
        vpreds = preds.get(vid, {})
        flags: list[bool] = []
        scores: list[float] = []
        counts = np.zeros(3, dtype=np.int64)
        n_gt = frames = 0
        for f in sorted(ann):
            a = ann[f]
            if a.provenance != "manual":
                continue
            frames += 1
            dets = list(vpreds.get(f, ()))
            gt_masks = a.masks
            res = match_instances(dets, gt_masks, cfg.iou_threshold)
            n_gt += len(gt_masks)
            order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
            flags.extend(res.correct[i] for i in order)
            scores.extend(dets[i].score for i in order)
            above = [i for i in range(len(dets)) if dets[i].score >= cfg.score_threshold]
            tp = sum(res.correct[i] for i in above)
            counts += (tp, len(above) - tp, len(gt_masks) - tp)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ap = average_precision(flags, n_gt, scores, cfg.coco_interp)
        per_video[vid] = Scores.from_counts(*map(int, counts), ap, frames)
        all_flags += flags
        all_scores += scores
        totals += counts
        total_gt += n_gt
        frames_total += frames
    ap_all = average_precision(all_flags, total_gt, all_scores, cfg.coco_interp)
    aggregate = Scores.from_counts(*map(int, totals), ap_all, frames_total)
    return EvalReport(per_video=per_video, aggregate=aggregate, config=cfg, fps=fps)
