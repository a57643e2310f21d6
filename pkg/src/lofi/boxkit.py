"""Box geometry: [0, 1000] normalization, box-string serialization, IoU and
weighted box fusion.

Boxes are plain 4-tuples ``(x_min, y_min, x_max, y_max)`` in corner convention.
Pixel boxes are floats, normalized boxes are ints in ``[0, 1000]``.
"""
from __future__ import annotations

import math
import re
from typing import Iterable, List, Sequence, Tuple

Box = Tuple[float, float, float, float]
NormBox = Tuple[int, int, int, int]

NORM_SCALE = 1000
_BOX_RE = re.compile(r"\[(\d+),(\d+),(\d+),(\d+)\]")


def _round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def validate_pixel_box(box: Sequence[float], image_size: Tuple[int, int] | None = None) -> None:
    x0, y0, x1, y1 = box
    if not (x0 < x1 and y0 < y1):
        raise ValueError(f"degenerate box {tuple(box)}")
    if min(x0, y0) < 0:
        raise ValueError(f"negative coordinate in box {tuple(box)}")
    if image_size is not None:
        h, w = image_size
        if x1 > w or y1 > h:
            raise ValueError(f"box {tuple(box)} exceeds image of size {image_size}")


def normalize_box(box: Sequence[float], image_size: Tuple[int, int]) -> NormBox:
    """Scale a pixel box to integer coordinates in [0, 1000].

    ``image_size`` is ``(height, width)``. Rounds half away from zero.
    """
    validate_pixel_box(box, image_size)
    h, w = image_size
    x0, y0, x1, y1 = box
    return (
        _round_half_away(x0 / w * NORM_SCALE),
        _round_half_away(y0 / h * NORM_SCALE),
        _round_half_away(x1 / w * NORM_SCALE),
        _round_half_away(y1 / h * NORM_SCALE),
    )


def denormalize_box(box: Sequence[int], image_size: Tuple[int, int]) -> Box:
    h, w = image_size
    x0, y0, x1, y1 = box
    return (x0 / NORM_SCALE * w, y0 / NORM_SCALE * h, x1 / NORM_SCALE * w, y1 / NORM_SCALE * h)


def is_norm_box(box: Sequence[int]) -> bool:
    if len(box) != 4 or not all(isinstance(v, int) and 0 <= v <= NORM_SCALE for v in box):
        return False
    return box[0] <= box[2] and box[1] <= box[3]


def canonical_order(boxes: Iterable[Sequence[int]]) -> List[NormBox]:
    """Sort by (y_min, x_min), remaining coordinates as tie-break."""
    return sorted((tuple(b) for b in boxes), key=lambda b: (b[1], b[0], b[3], b[2]))


def boxes_to_string(boxes: Sequence[Sequence[int]]) -> str:
    """Serialize normalized boxes as ``[x0,y0,x1,y1];[...]`` in canonical order."""
    if not boxes:
        raise ValueError("cannot serialize an empty box list")
    for b in boxes:
        if not is_norm_box(tuple(b)):
            raise ValueError(f"not a normalized box: {b}")
    return ";".join("[{},{},{},{}]".format(*b) for b in canonical_order(boxes))


def _valid_int(tok: str) -> bool:
    return (tok == "0" or not tok.startswith("0")) and int(tok) <= NORM_SCALE


def string_to_boxes(s: str) -> Tuple[List[NormBox], bool]:
    """Parse decoder output into boxes.

    Returns ``(boxes, malformed)``. Every well-formed box is kept; anything else
    in the string (bad fragments, stray characters, invalid numbers) sets the
    malformed flag. An empty result always has the flag set.
    """
    boxes: List[NormBox] = []
    malformed = False
    pos = 0
    expect_sep = False
    for m in _BOX_RE.finditer(s):
        gap = s[pos:m.start()]
        if gap != (";" if expect_sep else ""):
            malformed = True
        pos = m.end()
        nums = m.groups()
        if all(_valid_int(t) for t in nums):
            box = tuple(int(t) for t in nums)
            if box[0] <= box[2] and box[1] <= box[3]:
                boxes.append(box)  # type: ignore[arg-type]
                expect_sep = True
                continue
        malformed = True
        expect_sep = True
    if s[pos:]:
        malformed = True
    if not boxes:
        malformed = True
    return boxes, malformed


def area(box: Sequence[float]) -> float:
    return max(0.0, box[2] - box[0]) * max(0.0, box[3] - box[1])


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = area(a) + area(b) - inter
    if union <= 0:
        return 0.0
    return min(1.0, inter / union)


def _fusion_pass(boxes, weights, iou_thresh):
    order = sorted(
        range(len(boxes)),
        key=lambda i: (-weights[i], boxes[i][1], boxes[i][0], boxes[i][3], boxes[i][2]),
    )
    fused: List[List[float]] = []
    sums: List[List[float]] = []
    totals: List[float] = []
    for i in order:
        box, w = boxes[i], weights[i]
        for c, fb in enumerate(fused):
            if iou(fb, box) >= iou_thresh:
                totals[c] += w
                sums[c] = [s + w * v for s, v in zip(sums[c], box)]
                fused[c] = [s / totals[c] for s in sums[c]]
                break
        else:
            fused.append(list(box))
            sums.append([w * v for v in box])
            totals.append(w)
    return [tuple(b) for b in fused], totals


def weighted_box_fusion(
    boxes: Sequence[Sequence[float]],
    weights: Sequence[float] | None = None,
    iou_thresh: float = 0.55,
) -> List[Box]:
    """Merge duplicate boxes into weighted coordinate means.

    Boxes are visited in descending weight (ties by ``(y_min, x_min)``); each
    joins the first cluster whose running fused box overlaps it at
    ``iou >= iou_thresh``. The pass is repeated on the fused boxes, carrying the
    summed cluster weights, until nothing merges, so the result is a fixed point.
    """
    if not boxes:
        return []
    if weights is None:
        weights = [1.0] * len(boxes)
    if len(weights) != len(boxes):
        raise ValueError("boxes and weights differ in length")
    if any(w <= 0 for w in weights):
        raise ValueError("weights must be positive")
    cur = [tuple(float(v) for v in b) for b in boxes]
    cur_w = [float(w) for w in weights]
    while True:
        fused, totals = _fusion_pass(cur, cur_w, iou_thresh)
        if len(fused) == len(cur):
            return fused
        cur, cur_w = fused, totals
