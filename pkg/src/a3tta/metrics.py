"""Dice, ASSD and mIoU on 2D label maps, plus mean/std aggregation."""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._kernels import boundary_mask, min_distances


def dice(pred: np.ndarray, gt: np.ndarray, class_id: int) -> float:
    """2|A n B| / (|A| + |B|); two empty masks score 1."""
    a = np.asarray(pred) == class_id
    b = np.asarray(gt) == class_id
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / denom)


def assd(pred: np.ndarray, gt: np.ndarray, class_id: int, spacing=(1.0, 1.0)) -> float | None:
    """Average symmetric surface distance, or None when either mask is empty."""
    a = np.asarray(pred) == class_id
    b = np.asarray(gt) == class_id
    if not a.any() or not b.any():
        return None
    pa = np.argwhere(boundary_mask(a))
    pb = np.argwhere(boundary_mask(b))
    d_ab = min_distances(pa, pb, spacing)
    d_ba = min_distances(pb, pa, spacing)
    return float(0.5 * (d_ab.mean() + d_ba.mean()))


def iou(pred: np.ndarray, gt: np.ndarray, class_id: int) -> float | None:
    a = np.asarray(pred) == class_id
    b = np.asarray(gt) == class_id
    union = np.logical_or(a, b).sum()
    if union == 0:
        return None
    return float(np.logical_and(a, b).sum() / union)


def miou(pred: np.ndarray, gt: np.ndarray, class_set) -> float:
    vals = [v for v in (iou(pred, gt, c) for c in class_set) if v is not None]
    return float(np.mean(vals)) if vals else float("nan")


@dataclass
class MetricRecord:
    image_id: str
    domain: str
    dice: list[float]
    assd: list[float | None]
    miou: float
    round: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.dice))

    def as_row(self) -> dict:
        return asdict(self)


def evaluate_image(pred, gt, num_classes: int, image_id: str = "", domain: str = "",
                   spacing=(1.0, 1.0), round_: int = 0) -> MetricRecord:
    fg = range(1, num_classes)
    return MetricRecord(
        image_id=image_id, domain=domain,
        dice=[dice(pred, gt, c) for c in fg],
        assd=[assd(pred, gt, c, spacing) for c in fg],
        miou=miou(pred, gt, range(num_classes)),
        round=round_,
    )


def _mean_std(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def aggregate(records: list[MetricRecord], group_by=("domain",)) -> list[dict]:
    """Mean and (population) std per group; undefined ASSD values are excluded and counted."""
    if isinstance(group_by, str):
        group_by = (group_by,)
    groups: dict[tuple, list[MetricRecord]] = defaultdict(list)
    for r in records:
        groups[tuple(getattr(r, g) for g in group_by)].append(r)
    rows = []
    for key, recs in groups.items():
        if not recs:
            continue
        n_cls = len(recs[0].dice)
        row = dict(zip(group_by, key))
        row["n"] = len(recs)
        for c in range(n_cls):
            row[f"dice_{c + 1}_mean"], row[f"dice_{c + 1}_std"] = _mean_std([r.dice[c] for r in recs])
            vals = [r.assd[c] for r in recs if r.assd[c] is not None]
            row[f"assd_{c + 1}_excluded"] = len(recs) - len(vals)
            if vals:
                row[f"assd_{c + 1}_mean"], row[f"assd_{c + 1}_std"] = _mean_std(vals)
            else:
                row[f"assd_{c + 1}_mean"] = row[f"assd_{c + 1}_std"] = float("nan")
        row["dice_mean"], row["dice_std"] = _mean_std([r.mean_dice for r in recs])
        assd_img = [np.mean(v) for v in ([a for a in r.assd if a is not None] for r in recs) if v]
        row["assd_excluded"] = sum(a is None for r in recs for a in r.assd)
        row["assd_mean"], row["assd_std"] = _mean_std(assd_img) if assd_img else (float("nan"),) * 2
        miou_vals = [r.miou for r in recs if not math.isnan(r.miou)]
        row["miou_mean"], row["miou_std"] = _mean_std(miou_vals) if miou_vals else (float("nan"),) * 2
        rows.append(row)
    return rows


def write_table(rows: list[dict], path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys: list[str] = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def write_records(records: list[MetricRecord], path):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.as_row()) + "\n")


def read_records(path) -> list[MetricRecord]:
    with open(path) as fh:
        return [MetricRecord(**json.loads(line)) for line in fh if line.strip()]
