"""Rotated-box PASCAL-VOC average precision and per-corruption result tables."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import OrientedBox, rotated_iou
from .pseudo_label import PseudoLabel

# table column order: noise, blur, weather, digital groups, then the cloud composite
KIND_ORDER = [
    "gaussian_noise", "shot_noise", "impulse_noise", "speckle_noise",
    "defocus_blur", "glass_blur", "motion_blur", "zoom_blur", "gaussian_blur",
    "snow", "frost", "fog", "brightness", "spatter",
    "contrast", "elastic", "pixelate", "jpeg", "saturate",
    "cloudy",
]

TP, FP, IGNORED = 1, 0, -1


@dataclass(frozen=True)
class GtBox:
    """One ground-truth object: oriented box, class id, optional difficult flag."""

    box: OrientedBox
    class_id: int
    difficult: bool = False


@dataclass
class ClassCounts:
    gt: int = 0
    det: int = 0
    tp: int = 0
    fp: int = 0


@dataclass
class EvalResult:
    """Per-class AP (nan where a class has no countable ground truth) and their mean."""

    per_class_ap: np.ndarray
    mean_ap: float
    counts: dict[int, ClassCounts] = field(default_factory=dict)

    @property
    def defined(self) -> bool:
        return not math.isnan(self.mean_ap)


def match_detections(dets: list[PseudoLabel], gts: list[GtBox],
                     iou_thr: float = 0.5) -> tuple[list[int], list[int]]:
    """Greedy one-to-one matching of detections against ground truth.

    Detections are visited in descending score order (ties by input index);
    each grabs the highest-IoU not-yet-matched GT of its class and is a TP
    when that IoU reaches iou_thr, otherwise an FP. Matching a difficult GT
    yields IGNORED (neither TP nor FP).

    Returns (order, flags): detection indices in visit order and the parallel
    TP/FP/IGNORED flag list.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    matched = [False] * len(gts)
    flags = []
    for i in order:
        det = dets[i]
        best_iou, best_g = 0.0, None
        for g, gt in enumerate(gts):
            if gt.class_id != det.class_id or matched[g]:
                continue
            iou = rotated_iou(det.box, gt.box)
            if iou > best_iou:
                best_iou, best_g = iou, g
        if best_g is not None and best_iou >= iou_thr:
            matched[best_g] = True
            flags.append(IGNORED if gts[best_g].difficult else TP)
        else:
            flags.append(FP)
    return order, flags


def average_precision(scores, tp_flags, num_gt: int, use_07_metric: bool = False) -> float:
    """VOC average precision from per-detection flags.

    scores/tp_flags are parallel; IGNORED entries are dropped from the
    ranking. Default is the all-points (2010+) interpolation; use_07_metric
    selects the 11-point variant. Returns nan when num_gt == 0.
    """
    if num_gt < 0:
        raise ValueError("num_gt must be >= 0")
    if num_gt == 0:
        return float("nan")
    pairs = [(s, f) for s, f in zip(scores, tp_flags) if f != IGNORED]
    pairs.sort(key=lambda p: -p[0])
    if not pairs:
        return 0.0
    flags = np.array([f for _, f in pairs], dtype=np.float64)
    ctp = np.cumsum(flags)
    cfp = np.cumsum(1.0 - flags)
    recall = ctp / num_gt
    precision = ctp / np.maximum(ctp + cfp, 1e-12)
    if use_07_metric:
        ap = 0.0
        for t in np.arange(0.0, 1.01, 0.1):
            mask = recall >= t
            ap += (precision[mask].max() if mask.any() else 0.0) / 11.0
        return float(ap)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def evaluate(dets_per_image: list[list[PseudoLabel]], gts_per_image: list[list[GtBox]],
             num_classes: int, iou_thr: float = 0.5, use_07_metric: bool = False) -> EvalResult:
    """Per-class AP over a whole dataset; mAP averages classes with >= 1 countable GT."""
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError("detections and ground truth must cover the same images")
    per_class_ap = np.full(num_classes, np.nan)
    counts = {c: ClassCounts() for c in range(num_classes)}

    # one matching pass per image, then pool flags per class across images
    pooled: dict[int, list[tuple[float, int]]] = {c: [] for c in range(num_classes)}
    for dets, gts in zip(dets_per_image, gts_per_image):
        order, flags = match_detections(dets, gts, iou_thr)
        for i, flag in zip(order, flags):
            det = dets[i]
            pooled[det.class_id].append((det.score, flag))
        for gt in gts:
            if not gt.difficult:
                counts[gt.class_id].gt += 1
    for c in range(num_classes):
        entries = pooled[c]
        counts[c].det = len(entries)
        counts[c].tp = sum(1 for _, f in entries if f == TP)
        counts[c].fp = sum(1 for _, f in entries if f == FP)
        per_class_ap[c] = average_precision(
            [s for s, _ in entries], [f for _, f in entries], counts[c].gt, use_07_metric
        )
    valid = ~np.isnan(per_class_ap)
    mean_ap = float(per_class_ap[valid].mean()) if valid.any() else float("nan")
    return EvalResult(per_class_ap=per_class_ap, mean_ap=mean_ap, counts=counts)


def _fmt(value: float) -> str:
    return "  nan" if math.isnan(value) else f"{value:.3f}"


def corruption_table(results: dict[str, EvalResult], row_label: str = "mAP") -> tuple[str, list[tuple[str, float]]]:
    """Render a one-row per-kind mAP table, kinds in canonical order, plus the mean.

    Returns (aligned text, machine rows); the machine rows end with
    ("mean", value).
    """
    if not results:
        raise ValueError("results must be nonempty")
    kinds = [k for k in KIND_ORDER if k in results]
    extras = sorted(set(results) - set(kinds))
    kinds += extras
    values = [results[k].mean_ap for k in kinds]
    mean = float(np.mean(values))
    rows = [(k, float(v)) for k, v in zip(kinds, values)] + [("mean", mean)]

    headers = kinds + ["mean"]
    cells = [_fmt(v) for v in values] + [_fmt(mean)]
    widths = [max(len(h), len(c)) for h, c in zip(headers, cells)]
    label_w = max(len(row_label), 6)
    header_line = " ".join(["kind".ljust(label_w)] + [h.rjust(w) for h, w in zip(headers, widths)])
    value_line = " ".join([row_label.ljust(label_w)] + [c.rjust(w) for c, w in zip(cells, widths)])
    return header_line + "\n" + value_line + "\n", rows


def methods_table(results: dict[str, dict[str, EvalResult]]) -> str:
    """Multi-method table: one row per method, columns per kind plus the mean."""
    if not results:
        raise ValueError("results must be nonempty")
    all_kinds = set()
    for per_kind in results.values():
        all_kinds.update(per_kind)
    kinds = [k for k in KIND_ORDER if k in all_kinds] + sorted(all_kinds - set(KIND_ORDER))
    headers = kinds + ["mean"]
    label_w = max([len("method")] + [len(m) for m in results])
    widths = [max(len(h), 5) for h in headers]
    lines = [" ".join(["method".ljust(label_w)] + [h.rjust(w) for h, w in zip(headers, widths)])]
    for method, per_kind in results.items():
        values = [per_kind[k].mean_ap for k in kinds if k in per_kind]
        cells = [_fmt(per_kind[k].mean_ap) if k in per_kind else "    -" for k in kinds]
        cells.append(_fmt(float(np.mean(values))) if values else "  nan")
        lines.append(" ".join([method.ljust(label_w)] + [c.rjust(w) for c, w in zip(cells, widths)]))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# interchange files: one text file per image
#
# detection line:    class_id score cx cy w h theta
# ground-truth line: class_id cx cy w h theta [difficult]

def write_detections(path, dets: list[PseudoLabel]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in dets:
            b = d.box
            fh.write(f"{d.class_id} {d.score!r} {b.cx!r} {b.cy!r} {b.w!r} {b.h!r} {b.theta!r}\n")


def read_detections(path) -> list[PseudoLabel]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 7:
                raise ValueError(f"{path}:{line_no}: expected 7 fields, got {len(parts)}")
            cls, score, cx, cy, w, h, theta = parts
            out.append(PseudoLabel(
                box=OrientedBox(float(cx), float(cy), float(w), float(h), float(theta)),
                class_id=int(cls), score=float(score),
            ))
    return out


def write_ground_truth(path, gts: list[GtBox]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for g in gts:
            b = g.box
            tail = " difficult" if g.difficult else ""
            fh.write(f"{g.class_id} {b.cx!r} {b.cy!r} {b.w!r} {b.h!r} {b.theta!r}{tail}\n")


def read_ground_truth(path) -> list[GtBox]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            difficult = False
            if parts[-1] == "difficult":
                difficult = True
                parts = parts[:-1]
            if len(parts) != 6:
                raise ValueError(f"{path}:{line_no}: expected 6 fields (+optional flag)")
            cls, cx, cy, w, h, theta = parts
            out.append(GtBox(
                box=OrientedBox(float(cx), float(cy), float(w), float(h), float(theta)),
                class_id=int(cls), difficult=difficult,
            ))
    return out
