"""Masked per-class IoU and mIoU scoring of predicted label grids.

Only voxels with mask == True are counted. The free class (last id) never
receives an IoU entry; classes whose masked union is zero are reported as
undefined and excluded from the mean by default (``strict_zero=True`` scores
them 0 instead).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .grid import ClassTable, LabelGrid, ProbGrid, VoxelMask, argmax_labels, require_same_spec


@dataclass(frozen=True)
class IoUReport:
    """Per-class IoU over the semantic classes (free excluded).

    Attributes:
        per_class: one entry per semantic class; None where the masked union
            is zero (class absent from both grids under the mask).
        miou: mean over defined entries (or over all semantic classes with
            undefined scored 0 when built with strict_zero). NaN when nothing
            is defined.
        counts: per-class (intersection, union) tallies as exact integers.
    """

    per_class: Tuple[Optional[float], ...]
    miou: float
    counts: Tuple[Tuple[int, int], ...]

    def to_json_dict(self, table: Optional[ClassTable] = None) -> dict:
        """JSON-ready report; class keys are names when a table is given."""
        def key(c: int) -> str:
            if table is not None and c < len(table):
                return table.names[c]
            return str(c)

        return {
            "miou": None if math.isnan(self.miou) else self.miou,
            "per_class": {key(c): v for c, v in enumerate(self.per_class)},
            "counts": {key(c): list(iu) for c, iu in enumerate(self.counts)},
        }


def evaluate(
    pred: LabelGrid,
    gt: LabelGrid,
    mask: VoxelMask,
    strict_zero: bool = False,
) -> IoUReport:
    """Scores pred against gt over masked voxels.

    For each semantic class c: intersection = |{v : mask(v), pred(v)=c,
    gt(v)=c}| and union = |{v : mask(v), pred(v)=c or gt(v)=c}|. IoU is
    intersection/union where the union is positive, undefined otherwise.

    Args:
        pred: predicted labels.
        gt: ground-truth labels.
        mask: evaluation mask (camera visibility in the challenge protocol).
        strict_zero: score undefined classes 0 in the mean instead of
            excluding them.
    """
    spec = require_same_spec(pred, gt, mask)
    ncls = spec.num_classes
    m = mask.bits.ravel()
    p = pred.labels.ravel()[m].astype(np.int64)
    g = gt.labels.ravel()[m].astype(np.int64)

    inter = np.bincount(g[p == g], minlength=ncls)
    pred_count = np.bincount(p, minlength=ncls)
    gt_count = np.bincount(g, minlength=ncls)
    union = pred_count + gt_count - inter

    per_class: List[Optional[float]] = []
    counts: List[Tuple[int, int]] = []
    for c in range(ncls - 1):
        counts.append((int(inter[c]), int(union[c])))
        per_class.append(float(inter[c] / union[c]) if union[c] > 0 else None)

    defined = [v for v in per_class if v is not None]
    if strict_zero:
        miou = sum(defined) / (ncls - 1) if ncls > 1 else float("nan")
    else:
        miou = sum(defined) / len(defined) if defined else float("nan")
    return IoUReport(tuple(per_class), float(miou), tuple(counts))


def evaluate_prob(
    pred: ProbGrid,
    gt: LabelGrid,
    mask: VoxelMask,
    strict_zero: bool = False,
) -> IoUReport:
    """evaluate() after argmax-decoding a probability grid."""
    require_same_spec(pred, gt, mask)
    return evaluate(argmax_labels(pred), gt, mask, strict_zero=strict_zero)
