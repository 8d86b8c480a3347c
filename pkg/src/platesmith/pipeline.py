"""Pseudolabel expansion pipeline: assemble, filter, sweep, score, expand.

Detections become plate strings; candidates are accepted as pseudolabels
only when exactly 8 detections survive the confidence threshold and the
assembled text is a valid plate code.  Expansion rounds refit the template
recognizer on everything labeled so far, mirroring round-wise retraining.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DataError
from .grammar import CLASS_CHARS, validate_plate
from .ocr import Detection, TemplateBank, recognize_plate, yolo_box_to_pixel
from .raster import Raster, resize_area

SWEEP_THRESHOLDS = tuple(round(0.1 * k, 1) for k in range(1, 10))
DUPLICATE_IOU = 0.5


@dataclass
class LabeledExample:
    """An image with character detections and their provenance."""

    image_ref: str
    detections: list[Detection]
    source: str = "manual"  # "manual" or "pseudolabel:<round>"
    accepted: bool = True
    text: str = ""

    def __post_init__(self):
        if self.source != "manual" and not self.source.startswith("pseudolabel:"):
            raise DataError(f"bad source {self.source!r}")


def _iou(a: Detection, b: Detection) -> float:
    ax0, ay0, ax1, ay1 = yolo_box_to_pixel(a.box, 1, 1)
    bx0, by0, bx1, by1 = yolo_box_to_pixel(b.box, 1, 1)
    ix = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    iy = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = ix * iy
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def suppress_duplicates(detections: Sequence[Detection]) -> list[Detection]:
    """Collapse overlapping boxes (IoU > 0.5), keeping higher confidence."""
    kept: list[Detection] = []
    for det in sorted(detections, key=lambda d: -d.confidence):
        if all(_iou(det, other) <= DUPLICATE_IOU for other in kept):
            kept.append(det)
    return kept


def assemble_string(detections: Sequence[Detection]) -> str:
    """Characters of the surviving detections, left to right."""
    kept = suppress_duplicates(detections)
    kept.sort(key=lambda d: d.box[0])
    return "".join(CLASS_CHARS[d.class_id] for d in kept)


@dataclass(frozen=True)
class AcceptDecision:
    accepted: bool
    reason: str | None = None  # wrong_count | low_confidence | validation reason
    text: str = ""

    def __bool__(self) -> bool:
        return self.accepted


def accept_pseudolabel(detections: Sequence[Detection], tau: float) -> AcceptDecision:
    """Acceptance rule: 8 surviving detections, min confidence >= tau, valid text."""
    if not 0.0 < tau < 1.0:
        raise DataError(f"threshold {tau} outside (0, 1)")
    survivors = [d for d in suppress_duplicates(detections) if d.confidence >= tau]
    text = assemble_string(survivors)
    if len(survivors) != 8:
        return AcceptDecision(False, "wrong_count", text)
    result = validate_plate(text)
    if not result.valid:
        return AcceptDecision(False, result.reason, text)
    return AcceptDecision(True, None, text)


def binary_accuracy(pairs: Iterable[tuple[str, str]]) -> float:
    """Exact-string-match rate; any wrong character zeroes the whole plate."""
    pairs = list(pairs)
    if not pairs:
        raise DataError("no prediction/truth pairs to score")
    return sum(1 for pred, truth in pairs if pred == truth) / len(pairs)


@dataclass
class SweepTable:
    thresholds: tuple[float, ...]
    accuracies: list[float]
    chosen: float

    def rows(self) -> list[tuple[float, float]]:
        return list(zip(self.thresholds, self.accuracies))


def sweep_thresholds(
    recognizer: Callable[[Raster], tuple[str, list[Detection]]],
    validation: Sequence[tuple[Raster, str]],
) -> SweepTable:
    """Score binary accuracy per confidence threshold; ties pick the lowest."""
    if not validation:
        raise DataError("validation set is empty")
    recognized = [recognizer(img) for img, _ in validation]
    accuracies = []
    for tau in SWEEP_THRESHOLDS:
        pairs = []
        for (_, truth), (_, dets) in zip(validation, recognized):
            kept = [d for d in dets if d.confidence >= tau]
            pairs.append((assemble_string(kept), truth))
        accuracies.append(binary_accuracy(pairs))
    best = max(accuracies)
    chosen = SWEEP_THRESHOLDS[accuracies.index(best)]
    return SweepTable(SWEEP_THRESHOLDS, accuracies, chosen)


def tune_pseudolabel_threshold(
    recognizer: Callable[[Raster], tuple[str, list[Detection]]],
    validation: Sequence[tuple[Raster, str]],
) -> tuple[float, list[tuple[float, int, float]]]:
    """Pick the acceptance threshold on a labeled validation split.

    Correlation confidences are not calibrated like detector scores, so the
    filtering threshold is tuned rather than assumed: for each candidate tau
    the score is the fraction of accepted pseudolabels whose text is correct.
    Returns the lowest tau attaining the best score plus the full
    (tau, accepted, precision) table.
    """
    if not validation:
        raise DataError("validation set is empty")
    recognized = [recognizer(img) for img, _ in validation]
    table = []
    for tau in SWEEP_THRESHOLDS:
        accepted, correct = 0, 0
        for (_, truth), (_, dets) in zip(validation, recognized):
            decision = accept_pseudolabel(dets, tau)
            if decision.accepted:
                accepted += 1
                correct += decision.text == truth
        precision = correct / accepted if accepted else 1.0
        table.append((tau, accepted, precision))
    best = max(precision for _, _, precision in table)
    chosen = next(tau for tau, _, precision in table if precision == best)
    return chosen, table


@dataclass
class RoundReport:
    round_id: int
    pool_size: int
    accepted: int = 0
    rejected: dict[str, int] = field(default_factory=dict)

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.pool_size if self.pool_size else 0.0


def fit_templates(
    examples: Sequence[LabeledExample],
    loader: Callable[[str], Raster],
    template_size: tuple[int, int] = (7, 5),
) -> TemplateBank:
    """Average labeled glyph crops per class into a new template bank.

    Classes with no crops fall back to the built-in font.  Crops are taken
    from each detection's box, converted to ink polarity, and area-resized
    to a common shape before averaging.
    """
    th, tw = template_size
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for ex in examples:
        img = loader(ex.image_ref)
        gray = img.to_gray()
        for det in ex.detections:
            x0, y0, x1, y1 = yolo_box_to_pixel(det.box, img.width, img.height)
            patch = gray[int(y0) : max(int(np.ceil(y1)), int(y0) + 1),
                         int(x0) : max(int(np.ceil(x1)), int(x0) + 1)]
            if patch.size == 0:
                continue
            ink = 255.0 - resize_area(patch, th, tw)
            sums[det.class_id] = sums.get(det.class_id, 0.0) + ink
            counts[det.class_id] = counts.get(det.class_id, 0) + 1
    templates = {cid: sums[cid] / counts[cid] for cid in sums}
    return TemplateBank(templates)


def expansion_round(
    labeled: Sequence[LabeledExample],
    pool: Sequence[tuple[str, Raster]],
    tau: float,
    round_id: int,
    loader: Callable[[str], Raster] | None = None,
    recognizer: Callable[[Raster], tuple[str, list[Detection]]] | None = None,
) -> tuple[list[LabeledExample], RoundReport]:
    """Pseudolabel a pool with a recognizer refit on the current labeled set.

    ``pool`` holds (ref, image) pairs disjoint from the labeled set.  When no
    recognizer is supplied, template averaging over the labeled examples
    (via ``loader``) builds one; without a loader the built-in font is used.
    Returns the enlarged labeled list plus a per-reason rejection report.
    """
    if not pool:
        raise DataError("unlabeled pool is empty")
    labeled_refs = {ex.image_ref for ex in labeled}
    overlap = labeled_refs & {ref for ref, _ in pool}
    if overlap:
        raise DataError(f"pool overlaps labeled set: {sorted(overlap)[:3]}")
    if recognizer is None:
        bank = fit_templates(labeled, loader) if loader is not None else TemplateBank()
        recognizer = lambda img: recognize_plate(img, bank=bank)

    out = list(labeled)
    report = RoundReport(round_id=round_id, pool_size=len(pool))
    for ref, img in pool:
        _, detections = recognizer(img)
        decision = accept_pseudolabel(detections, tau)
        if decision.accepted:
            survivors = [d for d in suppress_duplicates(detections) if d.confidence >= tau]
            survivors.sort(key=lambda d: d.box[0])
            out.append(
                LabeledExample(
                    image_ref=ref,
                    detections=survivors,
                    source=f"pseudolabel:{round_id}",
                    accepted=True,
                    text=decision.text,
                )
            )
            report.accepted += 1
        else:
            report.rejected[decision.reason] = report.rejected.get(decision.reason, 0) + 1
    return out, report
