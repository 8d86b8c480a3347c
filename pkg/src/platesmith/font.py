"""Embedded 5x7 monochrome glyph bitmaps for the 24 plate characters.

The digit 0 is slashed and B/8, I/1 are drawn with distinct strokes so the
template matcher can tell look-alike pairs apart without positional hints.
"""

from __future__ import annotations

import numpy as np

from .grammar import CLASS_CHARS

FONT_W, FONT_H = 5, 7

_GLYPHS = {
    "0": ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    "1": ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    "2": ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    "3": ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    "4": ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    "5": ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    "6": ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    "7": ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    "8": ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    "9": ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
    "A": ("01110", "10001", "10001", "11111", "10001", "10001", "10001"),
    "B": ("11110", "10001", "10001", "11110", "10001", "10001", "11110"),
    "C": ("01110", "10001", "10000", "10000", "10000", "10001", "01110"),
    "E": ("11111", "10000", "10000", "11110", "10000", "10000", "11111"),
    "H": ("10001", "10001", "10001", "11111", "10001", "10001", "10001"),
    "I": ("01110", "00100", "00100", "00100", "00100", "00100", "01110"),
    "K": ("10001", "10010", "10100", "11000", "10100", "10010", "10001"),
    "M": ("10001", "11011", "10101", "10101", "10001", "10001", "10001"),
    "O": ("01110", "10001", "10001", "10001", "10001", "10001", "01110"),
    "P": ("11110", "10001", "10001", "11110", "10000", "10000", "10000"),
    "T": ("11111", "00100", "00100", "00100", "00100", "00100", "00100"),
    "X": ("10001", "10001", "01010", "00100", "01010", "10001", "10001"),
    "Y": ("10001", "10001", "01010", "00100", "00100", "00100", "00100"),
    "Z": ("11111", "00001", "00010", "00100", "01000", "10000", "11111"),
}

assert set(_GLYPHS) == set(CLASS_CHARS)


def glyph_bitmap(char: str) -> np.ndarray:
    """5x7 float array, 1.0 where ink."""
    rows = _GLYPHS[char]
    return np.array([[float(c) for c in row] for row in rows])


def glyph_tight_crop(char: str) -> np.ndarray:
    """Bitmap cropped to its ink bounding box (used as an OCR template)."""
    bmp = glyph_bitmap(char)
    ys, xs = np.nonzero(bmp)
    return bmp[ys.min() : ys.max() + 1, xs.min() : xs.max() + 1]


def scale_nearest(bitmap: np.ndarray, kx: int, ky: int) -> np.ndarray:
    """Integer nearest-neighbor upscale."""
    return np.repeat(np.repeat(bitmap, ky, axis=0), kx, axis=1)
