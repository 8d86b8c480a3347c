"""8-bit image buffer and exact, deterministic resampling helpers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class Raster:
    """Row-major 8-bit image; ``data`` has shape (height, width, channels)."""

    width: int
    height: int
    channels: int
    data: np.ndarray

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise DataError("raster dimensions must be >= 1")
        if self.channels not in (1, 3):
            raise DataError("raster must have 1 or 3 channels")
        if self.data.dtype != np.uint8:
            raise DataError("raster data must be uint8")
        if self.data.shape != (self.height, self.width, self.channels):
            raise DataError(
                f"raster data shape {self.data.shape} does not match "
                f"{(self.height, self.width, self.channels)}"
            )

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Raster":
        """Build from an array, clipping and rounding to uint8."""
        if arr.ndim == 2:
            arr = arr[:, :, None]
        data = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
        h, w, c = data.shape
        return cls(width=w, height=h, channels=c, data=data)

    def to_float(self) -> np.ndarray:
        return self.data.astype(np.float64)

    def to_gray(self) -> np.ndarray:
        """Luma as float64 (h, w) in [0, 255]."""
        f = self.to_float()
        if self.channels == 1:
            return f[:, :, 0]
        return 0.299 * f[:, :, 0] + 0.587 * f[:, :, 1] + 0.114 * f[:, :, 2]


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) matrix averaging input over output cells."""
    edges = np.linspace(0.0, n_in, n_out + 1)
    w = np.zeros((n_out, n_in))
    for j in range(n_out):
        lo, hi = edges[j], edges[j + 1]
        first, last = int(np.floor(lo)), int(np.ceil(hi))
        for i in range(first, min(last, n_in)):
            w[j, i] = min(hi, i + 1) - max(lo, i)
    return w / w.sum(axis=1, keepdims=True)


def resize_area(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Area-average resize of a float (h, w) or (h, w, c) array.

    Exact box filtering: each output pixel is the mean of the input area it
    covers, so integer-factor downscales are plain block means.
    """
    if out_h < 1 or out_w < 1:
        raise DataError("resize target must be >= 1 in both dimensions")
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    rh = _area_weights(h, out_h)
    rw = _area_weights(w, out_w)
    out = np.einsum("oh,hwc->owc", rh, arr.astype(np.float64))
    out = np.einsum("pw,owc->opc", rw, out)
    return out[:, :, 0] if squeeze else out


def downsample_raster(img: Raster, out_w: int, out_h: int) -> Raster:
    """Box-filter a raster down to (out_w, out_h)."""
    return Raster.from_array(resize_area(img.to_float(), out_h, out_w))
