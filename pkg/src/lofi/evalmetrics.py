"""Grounding metrics: one-to-one IoU matching, P/R/F at an IoU threshold and
robust detection outcome scores (Ro/L, Ro/S).

Ro/L and Ro/S use this package's own pinned definition: a ground-truth box is
*localized* when an unassigned prediction's center falls inside it or its own
center falls inside the prediction (greedy, highest IoU first). Ro/L is the
localized fraction of ground truth; Ro/S the mean IoU over localized pairs.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .boxkit import iou

RO_DEFINITION = "center-hit localization, mean IoU over localized pairs (package definition)"


@dataclass
class MatchResult:
    pairs: List[Tuple[int, int, float]]
    unmatched_pred: List[int]
    unmatched_gt: List[int]

    @property
    def total_iou(self) -> float:
        return sum(p[2] for p in self.pairs)


@dataclass
class EvalReport:
    RoL: float
    RoS: float
    P05: float
    R05: float
    F05: float
    counts: Dict[str, int] = field(default_factory=dict)
    config: Dict = field(default_factory=dict)
    ro_definition: str = RO_DEFINITION

    def to_dict(self) -> Dict:
        return asdict(self)

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def iou_matrix(pred: Sequence[Sequence[float]], gt: Sequence[Sequence[float]]) -> np.ndarray:
    m = np.zeros((len(pred), len(gt)))
    for i, p in enumerate(pred):
        for j, g in enumerate(gt):
            m[i, j] = iou(p, g)
    return m


def match_boxes(pred, gt, iou_thresh: float = 0.5) -> MatchResult:
    """Maximum-cardinality one-to-one matching over pairs with IoU >= thresh,
    breaking ties between maximum matchings by total IoU."""
    if not 0 < iou_thresh <= 1:
        raise ValueError("iou_thresh must lie in (0, 1]")
    n_p, n_g = len(pred), len(gt)
    if n_p == 0 or n_g == 0:
        return MatchResult([], list(range(n_p)), list(range(n_g)))
    ious = iou_matrix(pred, gt)
    edge = ious >= iou_thresh
    # every edge outweighs any sum of IoUs, so cardinality is maximized first
    big = float(min(n_p, n_g) + 1)
    weight = np.where(edge, big + ious, 0.0)
    rows, cols = linear_sum_assignment(weight, maximize=True)
    pairs = [(int(r), int(c), float(ious[r, c])) for r, c in zip(rows, cols) if edge[r, c]]
    pairs.sort()
    mp = {p[0] for p in pairs}
    mg = {p[1] for p in pairs}
    return MatchResult(pairs, [i for i in range(n_p) if i not in mp], [j for j in range(n_g) if j not in mg])


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def prf_at_iou(preds: Sequence[Sequence], gts: Sequence[Sequence], iou_thresh: float = 0.5,
               average: str = "micro") -> Tuple[float, float, float]:
    """Precision, recall and F1 (percent) of one-to-one matches at ``iou_thresh``.

    ``average="micro"`` pools counts over queries; ``"macro"`` averages the
    per-query values.
    """
    if len(preds) != len(gts):
        raise ValueError("preds and gts must be aligned per query")
    if average == "macro":
        vals = [prf_at_iou([p], [g], iou_thresh) for p, g in zip(preds, gts)]
        if not vals:
            return 0.0, 0.0, 0.0
        p = float(np.mean([v[0] for v in vals]))
        r = float(np.mean([v[1] for v in vals]))
        return p, r, _f1(p, r)
    matched = n_pred = n_gt = 0
    for p, g in zip(preds, gts):
        matched += len(match_boxes(p, g, iou_thresh).pairs)
        n_pred += len(p)
        n_gt += len(g)
    precision = 100.0 * matched / n_pred if n_pred else 0.0
    recall = 100.0 * matched / n_gt if n_gt else 0.0
    return precision, recall, _f1(precision, recall)


def _center(b):
    return (0.5 * (b[0] + b[2]), 0.5 * (b[1] + b[3]))


def _contains(b, pt) -> bool:
    return b[0] <= pt[0] <= b[2] and b[1] <= pt[1] <= b[3]


def center_hit(p, g) -> bool:
    return _contains(g, _center(p)) or _contains(p, _center(g))


def localize(pred, gt) -> List[Tuple[int, int, float]]:
    """Greedy center-hit assignment, highest IoU first."""
    cands = []
    for i, p in enumerate(pred):
        for j, g in enumerate(gt):
            if center_hit(p, g):
                cands.append((-iou(p, g), i, j))
    cands.sort()
    used_p, used_g, pairs = set(), set(), []
    for neg, i, j in cands:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        pairs.append((i, j, -neg))
    return pairs


def robust_outcome(preds: Sequence[Sequence], gts: Sequence[Sequence]) -> Tuple[float, float]:
    if len(preds) != len(gts):
        raise ValueError("preds and gts must be aligned per query")
    n_gt = sum(len(g) for g in gts)
    ious = []
    for p, g in zip(preds, gts):
        ious.extend(v for _, _, v in localize(p, g))
    rol = 100.0 * len(ious) / n_gt if n_gt else 0.0
    ros = 100.0 * float(np.mean(ious)) if ious else 0.0
    return rol, ros


def evaluate_grounding(preds, gts, n_malformed: int = 0, n_images: int | None = None,
                       iou_thresh: float = 0.5, average: str = "micro", config: Dict | None = None) -> EvalReport:
    p, r, f = prf_at_iou(preds, gts, iou_thresh, average)
    rol, ros = robust_outcome(preds, gts)
    counts = {
        "n_queries": len(gts),
        "n_images": len(gts) if n_images is None else n_images,
        "n_gt": sum(len(g) for g in gts),
        "n_pred": sum(len(x) for x in preds),
        "n_malformed": n_malformed,
    }
    return EvalReport(RoL=rol, RoS=ros, P05=p, R05=r, F05=f, counts=counts, config=dict(config or {}))


def write_per_query_csv(path, query_ids, preds, gts, iou_thresh: float = 0.5) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["query_id", "n_pred", "n_gt", "matched", "rol_hits"])
        for qid, p, g in zip(query_ids, preds, gts):
            w.writerow([qid, len(p), len(g), len(match_boxes(p, g, iou_thresh).pairs), len(localize(p, g))])
