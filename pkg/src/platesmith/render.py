"""Deterministic template renderer for plate rasters plus seeded augmentations.

Rendering is exact: glyph bitmaps are scaled by integer nearest-neighbor
factors and placed on a fixed slot grid, and every render also returns the
ink bounding box of each of the 8 characters.  Sizes whose slots are too
small for direct placement are rendered at an integer supersample and then
box-filtered down, keeping block means exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DataError
from .font import FONT_H, FONT_W, glyph_bitmap, scale_nearest
from .grammar import PlateSpec, SampleWeights, sample_plate
from .raster import Raster, resize_area


@dataclass(frozen=True)
class RenderStyle:
    """Plate look: colors, optional left band, and the 8-slot glyph grid.

    The grid is stored as width/height fractions so one style serves any
    canvas size; ``slots`` are (x_offset, width) pairs with strictly
    increasing offsets.
    """

    glyph_color: tuple[int, int, int] = (20, 20, 20)
    ev_glyph_color: tuple[int, int, int] = (0, 110, 40)
    background: tuple[int, int, int] = (242, 242, 242)
    band: bool = True
    band_color: tuple[int, int, int] = (0, 70, 190)
    band_frac: float = 0.12
    slots: tuple[tuple[float, float], ...] = field(
        default_factory=lambda: tuple(
            (0.145 + i * 0.105, 0.080) for i in range(8)
        )
    )
    glyph_top_frac: float = 0.17
    glyph_height_frac: float = 0.66

    def __post_init__(self):
        if len(self.slots) != 8:
            raise DataError("style must define exactly 8 glyph slots")
        xs = [x for x, _ in self.slots]
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise DataError("slot x-offsets must be strictly increasing")
        if any(x < 0 or x + w > 1.0 for x, w in self.slots):
            raise DataError("slots must lie within plate bounds")


DEFAULT_STYLE = RenderStyle()
REFERENCE_SIZE = (193, 72)


def _grid_pixels(style: RenderStyle, size: tuple[int, int]):
    """Slot rectangles in pixels, or None if glyphs cannot be placed."""
    w, h = size
    top = int(round(style.glyph_top_frac * h))
    gh = int(round(style.glyph_height_frac * h))
    ky = gh // FONT_H
    if ky < 1:
        return None
    rects = []
    for x_frac, w_frac in style.slots:
        sx = int(round(x_frac * w))
        sw = int(round(w_frac * w))
        kx = sw // FONT_W
        if kx < 1:
            return None
        rects.append((sx, top, sw, gh, kx, ky))
    return rects


def render_plate(
    spec: PlateSpec, style: RenderStyle = DEFAULT_STYLE, size: tuple[int, int] = REFERENCE_SIZE
) -> tuple[Raster, list[tuple[float, float, float, float]]]:
    """Render a plate; returns the raster and 8 ink boxes (x0, y0, x1, y1).

    Rejects sizes where any slot is narrower than the 5x7 font grid.
    """
    w, h = size
    grid = _grid_pixels(style, size)
    if grid is None:
        raise DataError(f"size {size} too small to place 8 glyphs")
    img = np.empty((h, w, 3), dtype=np.float64)
    img[:] = style.background
    if style.band:
        img[:, : int(round(style.band_frac * w))] = style.band_color

    color = np.array(style.ev_glyph_color if spec.ev else style.glyph_color, dtype=np.float64)
    boxes = []
    for char, (sx, top, sw, gh, kx, ky) in zip(spec.text, grid):
        bmp = glyph_bitmap(char)
        scaled = scale_nearest(bmp, kx, ky)
        gw, gh_px = FONT_W * kx, FONT_H * ky
        gx = sx + (sw - gw) // 2
        gy = top + (gh - gh_px) // 2
        region = img[gy : gy + gh_px, gx : gx + gw]
        mask = scaled[:, :, None].astype(bool)
        np.copyto(region, color, where=mask)
        ys, xs = np.nonzero(bmp)
        boxes.append(
            (
                float(gx + xs.min() * kx),
                float(gy + ys.min() * ky),
                float(gx + (xs.max() + 1) * kx),
                float(gy + (ys.max() + 1) * ky),
            )
        )
    return Raster.from_array(img), boxes


# Hard bounds on augmentation magnitudes; params outside these are rejected.
MAX_BRIGHTNESS = 255.0
MAX_CONTRAST_GAIN = 4.0
MAX_NOISE_SIGMA = 128.0
MAX_BLUR_RADIUS = 8.0
MAX_ROTATION_DEG = 30.0
MAX_PERSPECTIVE = 0.2


@dataclass(frozen=True)
class AugmentParams:
    brightness: float = 0.0
    contrast: float = 1.0
    noise_sigma: float = 0.0
    blur_radius: float = 0.0
    rotation_deg: float = 0.0
    perspective: float = 0.0
    seed: int = 0

    def __post_init__(self):
        checks = [
            abs(self.brightness) <= MAX_BRIGHTNESS,
            0.0 < self.contrast <= MAX_CONTRAST_GAIN,
            0.0 <= self.noise_sigma <= MAX_NOISE_SIGMA,
            0.0 <= self.blur_radius <= MAX_BLUR_RADIUS,
            abs(self.rotation_deg) <= MAX_ROTATION_DEG,
            0.0 <= self.perspective <= MAX_PERSPECTIVE,
        ]
        if not all(checks):
            raise DataError(f"augmentation magnitudes out of bounds: {self}")

    @property
    def is_identity(self) -> bool:
        return (
            self.brightness == 0.0
            and self.contrast == 1.0
            and self.noise_sigma == 0.0
            and self.blur_radius == 0.0
            and self.rotation_deg == 0.0
            and self.perspective == 0.0
        )


def _homography_from_points(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 homography mapping src points onto dst (4-point DLT)."""
    a, b = [], []
    for (x, y), (u, v) in zip(src, dst):
        a.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        a.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b.extend([u, v])
    sol = np.linalg.solve(np.array(a), np.array(b))
    return np.append(sol, 1.0).reshape(3, 3)


def _warp_matrix(w: int, h: int, params: AugmentParams, rng: np.random.Generator) -> np.ndarray:
    """Forward homography: rotation about center composed with corner jitter."""
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    th = math.radians(params.rotation_deg)
    rot = np.array(
        [
            [math.cos(th), -math.sin(th), cx - cx * math.cos(th) + cy * math.sin(th)],
            [math.sin(th), math.cos(th), cy - cx * math.sin(th) - cy * math.cos(th)],
            [0, 0, 1],
        ]
    )
    corners = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
    jitter = rng.uniform(-params.perspective, params.perspective, size=(4, 2))
    jitter *= np.array([w, h], dtype=np.float64)
    persp = _homography_from_points(corners, corners + jitter)
    return persp @ rot


def _apply_homography(points: np.ndarray, hmat: np.ndarray) -> np.ndarray:
    p = np.hstack([points, np.ones((len(points), 1))]) @ hmat.T
    return p[:, :2] / p[:, 2:3]


def _warp_image(img: np.ndarray, hmat: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    inv = np.linalg.inv(hmat)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dst = np.stack([xx.ravel(), yy.ravel()], axis=1).astype(np.float64)
    src = _apply_homography(dst, inv)
    coords = np.stack([src[:, 1].reshape(h, w), src[:, 0].reshape(h, w)])
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        out[:, :, c] = ndimage.map_coordinates(img[:, :, c], coords, order=1, mode="nearest")
    return out


def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(3 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k /= k.sum()
    padded = np.pad(img, ((radius, radius), (radius, radius), (0, 0)), mode="edge")
    out = np.apply_along_axis(lambda r: np.convolve(r, k, mode="valid"), 1, padded)
    out = np.apply_along_axis(lambda col: np.convolve(col, k, mode="valid"), 0, out)
    return out


def augment(img: Raster, params: AugmentParams) -> Raster:
    """Seeded augmentation; zero-magnitude params return the input bytes."""
    out, _ = augment_with_boxes(img, [], params)
    return out


def augment_with_boxes(
    img: Raster,
    boxes: list[tuple[float, float, float, float]],
    params: AugmentParams,
) -> tuple[Raster, list[tuple[float, float, float, float]]]:
    """Augment an image and carry its ground-truth boxes through the warp."""
    if params.is_identity:
        return img, list(boxes)
    rng = np.random.default_rng(params.seed)
    arr = img.to_float()
    new_boxes = list(boxes)
    if params.rotation_deg != 0.0 or params.perspective != 0.0:
        hmat = _warp_matrix(img.width, img.height, params, rng)
        arr = _warp_image(arr, hmat)
        new_boxes = []
        for x0, y0, x1, y1 in boxes:
            pts = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=np.float64)
            warped = _apply_homography(pts, hmat)
            new_boxes.append(
                (
                    float(np.clip(warped[:, 0].min(), 0, img.width)),
                    float(np.clip(warped[:, 1].min(), 0, img.height)),
                    float(np.clip(warped[:, 0].max(), 0, img.width)),
                    float(np.clip(warped[:, 1].max(), 0, img.height)),
                )
            )
    if params.blur_radius > 0.0:
        arr = _gaussian_blur(arr, params.blur_radius)
    if params.noise_sigma > 0.0:
        arr = arr + rng.normal(0.0, params.noise_sigma, size=arr.shape)
    if params.contrast != 1.0:
        arr = (arr - 128.0) * params.contrast + 128.0
    if params.brightness != 0.0:
        arr = arr + params.brightness
    return Raster.from_array(arr), new_boxes


@dataclass(frozen=True)
class AugmentRanges:
    """Per-item sampling bounds for dataset augmentation."""

    brightness: float = 0.0
    contrast_delta: float = 0.0
    noise_sigma: float = 0.0
    blur_radius: float = 0.0
    rotation_deg: float = 0.0
    perspective: float = 0.0

    def draw(self, rng: np.random.Generator) -> AugmentParams:
        return AugmentParams(
            brightness=rng.uniform(-self.brightness, self.brightness) if self.brightness else 0.0,
            contrast=1.0 + (rng.uniform(-self.contrast_delta, self.contrast_delta) if self.contrast_delta else 0.0),
            noise_sigma=rng.uniform(0.0, self.noise_sigma) if self.noise_sigma else 0.0,
            blur_radius=rng.uniform(0.0, self.blur_radius) if self.blur_radius else 0.0,
            rotation_deg=rng.uniform(-self.rotation_deg, self.rotation_deg) if self.rotation_deg else 0.0,
            perspective=rng.uniform(0.0, self.perspective) if self.perspective else 0.0,
            seed=int(rng.integers(2**31)),
        )


@dataclass
class RenderedItem:
    image: Raster
    spec: PlateSpec
    boxes: list[tuple[float, float, float, float]]


def _supersample_factor(style: RenderStyle, size: tuple[int, int]) -> int:
    for k in range(1, 17):
        if _grid_pixels(style, (size[0] * k, size[1] * k)) is not None:
            return k
    raise DataError(f"size {size} too small to place 8 glyphs at any supersample")


def render_plate_any_size(
    spec: PlateSpec, style: RenderStyle, size: tuple[int, int]
) -> tuple[Raster, list[tuple[float, float, float, float]]]:
    """Render at any size, supersampling then box-filtering when needed."""
    k = _supersample_factor(style, size)
    if k == 1:
        return render_plate(spec, style, size)
    img, boxes = render_plate(spec, style, (size[0] * k, size[1] * k))
    small = Raster.from_array(resize_area(img.to_float(), size[1], size[0]))
    return small, [tuple(v / k for v in b) for b in boxes]


def render_dataset(
    n: int,
    style: RenderStyle = DEFAULT_STYLE,
    size: tuple[int, int] = REFERENCE_SIZE,
    weights: SampleWeights | None = None,
    augment_ranges: AugmentRanges | None = None,
    seed: int = 0,
) -> list[RenderedItem]:
    """Render ``n`` sampled plates, reproducibly from ``seed``."""
    if n < 1:
        raise DataError("dataset size must be >= 1")
    rng = np.random.default_rng(seed)
    items = []
    for _ in range(n):
        spec = sample_plate(rng, weights)
        img, boxes = render_plate_any_size(spec, style, size)
        if augment_ranges is not None:
            img, boxes = augment_with_boxes(img, boxes, augment_ranges.draw(rng))
        items.append(RenderedItem(img, spec, boxes))
    return items
