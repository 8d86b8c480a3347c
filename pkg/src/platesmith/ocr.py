"""Template-matching character recognizer for plate rasters.

Segmentation is Otsu binarization plus column projection; classification is
normalized cross-correlation against tight-cropped glyph templates, either
the built-in font or templates fitted from labeled crops.  Confidence is the
best correlation rescaled from [-1, 1] to [0, 1]; it is a similarity score,
not a calibrated probability.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .font import glyph_tight_crop
from .grammar import CLASS_CHARS
from .raster import Raster, resize_area
from .render import RenderStyle

N_CLASSES = len(CLASS_CHARS)


@dataclass(frozen=True)
class Detection:
    """One recognized character: class id, normalized center box, confidence."""

    class_id: int
    box: tuple[float, float, float, float]  # (x_center, y_center, w, h) in [0, 1]
    confidence: float

    def __post_init__(self):
        if not 0 <= self.class_id < N_CLASSES:
            raise DataError(f"class_id {self.class_id} out of range")
        x, y, w, h = self.box
        if not (0 <= x <= 1 and 0 <= y <= 1 and 0 < w <= 1 and 0 < h <= 1):
            raise DataError(f"box {self.box} outside unit square")
        if not 0.0 <= self.confidence <= 1.0:
            raise DataError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def char(self) -> str:
        return CLASS_CHARS[self.class_id]


def pixel_box_to_yolo(
    box: tuple[float, float, float, float], width: int, height: int
) -> tuple[float, float, float, float]:
    x0, y0, x1, y1 = box
    return ((x0 + x1) / 2 / width, (y0 + y1) / 2 / height, (x1 - x0) / width, (y1 - y0) / height)


def yolo_box_to_pixel(
    box: tuple[float, float, float, float], width: int, height: int
) -> tuple[float, float, float, float]:
    cx, cy, w, h = box
    return ((cx - w / 2) * width, (cy - h / 2) * height, (cx + w / 2) * width, (cy + h / 2) * height)


def _otsu_threshold(gray: np.ndarray) -> float:
    hist, edges = np.histogram(gray, bins=256, range=(0.0, 255.0))
    total = gray.size
    centers = (edges[:-1] + edges[1:]) / 2
    weight = np.cumsum(hist)
    mean = np.cumsum(hist * centers)
    mean_total = mean[-1]
    best_t, best_var = 127.5, -1.0
    for i in range(255):
        w0 = weight[i]
        w1 = total - w0
        if w0 == 0 or w1 == 0:
            continue
        m0 = mean[i] / w0
        m1 = (mean_total - mean[i]) / w1
        var = w0 * w1 * (m0 - m1) ** 2
        if var > best_var:
            best_var, best_t = var, centers[i]
    return best_t


def segment_glyphs(
    img: Raster, style_hint: RenderStyle | None = None
) -> list[tuple[float, float, float, float]]:
    """Locate glyph boxes by column projection; x-sorted, any count.

    Full-height ink runs (the band, borders) are dropped.  When a style hint
    is given and projection does not yield 8 boxes, the hint's grid is used.
    """
    gray = img.to_gray()
    threshold = _otsu_threshold(gray)
    ink = gray < threshold
    min_rows = max(1, int(0.08 * img.height))
    col_counts = ink.sum(axis=0)
    is_ink_col = col_counts >= min_rows

    boxes = []
    x = 0
    while x < img.width:
        if not is_ink_col[x]:
            x += 1
            continue
        run_start = x
        while x < img.width and is_ink_col[x]:
            x += 1
        run = ink[:, run_start:x]
        rows = np.nonzero(run.any(axis=1))[0]
        if rows.size == 0:
            continue
        y0, y1 = int(rows.min()), int(rows.max()) + 1
        # a run spanning nearly full height is the band or a border, not a glyph
        if (y1 - y0) >= 0.95 * img.height:
            continue
        boxes.append((float(run_start), float(y0), float(x), float(y1)))

    if style_hint is not None and len(boxes) != 8:
        boxes = _grid_boxes(style_hint, img.width, img.height)
    return boxes


def _grid_boxes(style: RenderStyle, width: int, height: int):
    top = style.glyph_top_frac * height
    bottom = top + style.glyph_height_frac * height
    return [
        (x_frac * width, top, (x_frac + w_frac) * width, bottom)
        for x_frac, w_frac in style.slots
    ]


class TemplateBank:
    """Normalized glyph templates; defaults to the built-in font crops."""

    def __init__(self, templates: dict[int, np.ndarray] | None = None):
        self.templates = {}
        for class_id in range(N_CLASSES):
            patch = None if templates is None else templates.get(class_id)
            if patch is None:
                patch = glyph_tight_crop(CLASS_CHARS[class_id])
            self.templates[class_id] = self._normalize(np.asarray(patch, dtype=np.float64))

    @staticmethod
    def _normalize(patch: np.ndarray) -> np.ndarray:
        centered = patch - patch.mean()
        norm = np.sqrt((centered**2).sum())
        return centered / norm if norm > 0 else centered

    def correlate(self, patch: np.ndarray) -> tuple[int, float]:
        """Best (class_id, ncc) over all templates; ties keep the lowest id."""
        if patch.size == 0 or patch.std() == 0:
            return 0, -1.0
        best_id, best_ncc = 0, -np.inf
        for class_id in range(N_CLASSES):
            tmpl = self.templates[class_id]
            resized = resize_area(patch, tmpl.shape[0], tmpl.shape[1])
            centered = resized - resized.mean()
            norm = np.sqrt((centered**2).sum())
            if norm == 0:
                continue
            ncc = float((centered / norm * tmpl).sum())
            if ncc > best_ncc:
                best_id, best_ncc = class_id, ncc
        if not np.isfinite(best_ncc):
            return 0, -1.0
        return best_id, best_ncc


_DEFAULT_BANK = TemplateBank()


def _rescale(ncc: float) -> float:
    """Map correlation from [-1, 1] to a [0, 1] confidence."""
    return min(1.0, max(0.0, (ncc + 1.0) / 2.0))


def classify_glyph(patch: Raster | np.ndarray, bank: TemplateBank | None = None) -> tuple[int, float]:
    """Classify one glyph patch; returns (class_id, confidence in [0, 1]).

    Zero-variance patches get confidence 0 and class 0.
    """
    bank = bank or _DEFAULT_BANK
    gray = patch.to_gray() if isinstance(patch, Raster) else np.asarray(patch, dtype=np.float64)
    # templates are ink=high; image glyphs are dark on light, so invert
    class_id, ncc = bank.correlate(255.0 - gray if isinstance(patch, Raster) else gray)
    if ncc == -1.0 and gray.std() == 0:
        return 0, 0.0
    return class_id, _rescale(ncc)


def recognize_plate(
    img: Raster,
    bank: TemplateBank | None = None,
    style_hint: RenderStyle | None = None,
) -> tuple[str, list[Detection]]:
    """Segment, classify, and assemble left-to-right; never raises on content."""
    bank = bank or _DEFAULT_BANK
    boxes = segment_glyphs(img, style_hint)
    detections = []
    chars = []
    gray = img.to_gray()
    for x0, y0, x1, y1 in boxes:
        patch = gray[int(y0) : int(np.ceil(y1)), int(x0) : int(np.ceil(x1))]
        class_id, ncc = bank.correlate(255.0 - patch)
        conf = 0.0 if patch.std() == 0 else _rescale(ncc)
        class_id = class_id if conf > 0 else 0
        detections.append(
            Detection(class_id, pixel_box_to_yolo((x0, y0, x1, y1), img.width, img.height), conf)
        )
        chars.append(CLASS_CHARS[class_id])
    return "".join(chars), detections
