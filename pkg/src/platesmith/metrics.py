"""Frechet-distance scoring and character/region distribution analytics.

The distance between two image sets is computed over Gaussian fits of a
pluggable feature extractor; the default extractor is an 8x8 grayscale
downsample of each image, so scores here are deterministic pixel statistics
and are not comparable with scores computed over learned features.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DataError, NumericsError
from .grammar import DIGITS, PlateSpec, SUFFIX_LETTERS, region_of_prefix, validate_plate
from .raster import Raster, resize_area

# Relative clamp for slightly negative covariance eigenvalues.
EIG_CLAMP_REL = 1e-10


@dataclass(frozen=True)
class FidStats:
    """Gaussian fit of a feature cloud: mean, covariance, sample count."""

    mu: np.ndarray
    sigma: np.ndarray
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise DataError("need at least 2 samples for covariance")
        d = self.mu.shape[0]
        if self.sigma.shape != (d, d):
            raise DataError("mean/covariance dimensions disagree")


def pixel_features(imgs: Sequence[Raster], grid: int = 8) -> np.ndarray:
    """Default feature extractor: grayscale, area-resized to grid x grid, in [0, 1]."""
    return np.stack([resize_area(img.to_gray(), grid, grid).ravel() / 255.0 for img in imgs])


def feature_extract(
    imgs: Sequence[Raster],
    extractor: Callable[[Sequence[Raster]], np.ndarray] = pixel_features,
) -> FidStats:
    """Fit a Gaussian to extracted features; unbiased covariance."""
    if len(imgs) < 2:
        raise DataError("need at least 2 images to estimate feature statistics")
    feats = np.asarray(extractor(imgs), dtype=np.float64)
    mu = feats.mean(axis=0)
    sigma = np.cov(feats, rowvar=False, bias=False)
    sigma = np.atleast_2d(sigma)
    return FidStats(mu=mu, sigma=sigma, n=len(imgs))


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition; clamps tiny negatives."""
    sym = (mat + mat.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    top = float(vals.max(initial=0.0))
    tol = EIG_CLAMP_REL * max(top, 1.0)
    if (vals < -tol).any():
        raise NumericsError(f"covariance not PSD: min eigenvalue {vals.min():.3e}")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(stats_a: FidStats, stats_b: FidStats) -> float:
    """Frechet distance between two Gaussian fits.

    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)), with the cross
    term evaluated as Tr sqrt(S_a^(1/2) S_b S_a^(1/2)) so only symmetric
    eigendecompositions are needed.
    """
    if stats_a.mu.shape != stats_b.mu.shape:
        raise DataError("feature dimensions differ")
    sqrt_a = _psd_sqrt(stats_a.sigma)
    inner = sqrt_a @ ((stats_b.sigma + stats_b.sigma.T) / 2.0) @ sqrt_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    top = float(vals.max(initial=0.0))
    tol = EIG_CLAMP_REL * max(top, 1.0)
    if (vals < -tol).any():
        raise NumericsError(f"cross covariance not PSD: min eigenvalue {vals.min():.3e}")
    trace_sqrt = float(np.sqrt(np.clip(vals, 0.0, None)).sum())
    diff = stats_a.mu - stats_b.mu
    value = float(diff @ diff + np.trace(stats_a.sigma) + np.trace(stats_b.sigma) - 2.0 * trace_sqrt)
    return max(value, 0.0)


# --- plate text analytics ---------------------------------------------------

POSITION_SUPPORTS: tuple[tuple[str, ...], ...] = (
    SUFFIX_LETTERS, SUFFIX_LETTERS, DIGITS, DIGITS, DIGITS, DIGITS, SUFFIX_LETTERS, SUFFIX_LETTERS,
)


@dataclass
class DistributionReport:
    """Histograms over plate text plus divergences against a reference."""

    per_position: list[dict[str, int]]
    prefix_letters: dict[str, int] = field(default_factory=dict)
    digit_symbols: dict[str, int] = field(default_factory=dict)
    suffix_letters: dict[str, int] = field(default_factory=dict)
    regions: dict[str, int] = field(default_factory=dict)
    divergences: dict[str, dict[str, float]] = field(default_factory=dict)
    n: int = 0

    def to_json(self) -> str:
        return json.dumps(
            {
                "n": self.n,
                "per_position": self.per_position,
                "prefix_letters": self.prefix_letters,
                "digit_symbols": self.digit_symbols,
                "suffix_letters": self.suffix_letters,
                "regions": self.regions,
                "divergences": self.divergences,
            },
            sort_keys=True,
            indent=2,
        )

    def histogram_csv(self) -> str:
        lines = ["group,symbol,count"]
        for name, hist in (
            ("prefix", self.prefix_letters),
            ("digit", self.digit_symbols),
            ("suffix", self.suffix_letters),
            ("region", self.regions),
        ):
            for key in sorted(hist):
                lines.append(f"{name},{key},{hist[key]}")
        return "\n".join(lines) + "\n"


def char_position_histogram(plates: Iterable[PlateSpec]) -> list[dict[str, int]]:
    """Eight per-position histograms: letters at 1-2/7-8, digits at 3-6."""
    hists = [{sym: 0 for sym in support} for support in POSITION_SUPPORTS]
    for spec in plates:
        for pos, char in enumerate(spec.text):
            hists[pos][char] += 1
    return hists


def region_distribution(plates: Iterable[PlateSpec]) -> dict[str, int]:
    """Counts per region; both prefix series of a region pool together."""
    counts = Counter(spec.region for spec in plates)
    return dict(counts)


def compare_distributions(
    observed: dict[str, int | float], reference: dict[str, float]
) -> dict[str, float]:
    """Chi-square statistic and total variation between two histograms.

    The reference is rescaled to the observed total.  Support keys where
    the reference is zero but the observed is positive are merged into an
    ``other`` bucket before scoring.
    """
    total_obs = float(sum(observed.values()))
    if total_obs <= 0:
        raise DataError("observed histogram is empty")
    keys = sorted(set(observed) | set(reference))
    obs = {k: float(observed.get(k, 0.0)) for k in keys}
    ref = {k: float(reference.get(k, 0.0)) for k in keys}
    bad = [k for k in keys if ref[k] <= 0 and obs[k] > 0]
    if bad:
        obs["other"] = sum(obs.pop(k) for k in bad)
        other_ref = sum(ref.pop(k) for k in bad)
        ref["other"] = other_ref if other_ref > 0 else min(v for v in ref.values() if v > 0)
    keys = [k for k in obs if ref[k] > 0]
    total_ref = sum(ref[k] for k in keys)
    chi2 = 0.0
    tv = 0.0
    for k in keys:
        expected = ref[k] / total_ref * total_obs
        chi2 += (obs[k] - expected) ** 2 / expected
        tv += abs(obs[k] / total_obs - ref[k] / total_ref)
    return {"chi_square": chi2, "total_variation": tv / 2.0}


def distribution_report(
    plates: Sequence[PlateSpec], reference: "DistributionReport | None" = None
) -> DistributionReport:
    """Full analytics bundle; divergences computed when a reference is given."""
    per_position = char_position_histogram(plates)
    report = DistributionReport(per_position=per_position, n=len(plates))
    report.prefix_letters = _merge(per_position[0], per_position[1])
    report.digit_symbols = _merge(*per_position[2:6])
    report.suffix_letters = _merge(per_position[6], per_position[7])
    report.regions = region_distribution(plates)
    if reference is not None and plates:
        report.divergences = {
            "prefix_letters": compare_distributions(report.prefix_letters, reference.prefix_letters),
            "digit_symbols": compare_distributions(report.digit_symbols, reference.digit_symbols),
            "suffix_letters": compare_distributions(report.suffix_letters, reference.suffix_letters),
            "regions": compare_distributions(report.regions, reference.regions),
        }
    return report


def uniform_reference() -> DistributionReport:
    """Expected histogram weights for a sampler uniform over valid codes.

    Digits and suffix letters are flat; prefix-letter and region weights
    follow from uniform choice over the 54 table prefixes.
    """
    from .grammar import REGION_TABLE, VALID_PREFIXES

    pos0 = Counter(p[0] for p in VALID_PREFIXES)
    pos1 = Counter(p[1] for p in VALID_PREFIXES)
    per_position: list[dict[str, int]] = [
        {sym: pos0.get(sym, 0) for sym in SUFFIX_LETTERS},
        {sym: pos1.get(sym, 0) for sym in SUFFIX_LETTERS},
        *({d: 1 for d in DIGITS} for _ in range(4)),
        {s: 1 for s in SUFFIX_LETTERS},
        {s: 1 for s in SUFFIX_LETTERS},
    ]
    report = DistributionReport(per_position=per_position, n=len(VALID_PREFIXES))
    report.prefix_letters = _merge(per_position[0], per_position[1])
    report.digit_symbols = {d: 4 for d in DIGITS}
    report.suffix_letters = {s: 2 for s in SUFFIX_LETTERS}
    report.regions = {entry.region: 1 for entry in REGION_TABLE}
    return report


def _merge(*hists: dict[str, int]) -> dict[str, int]:
    merged: Counter = Counter()
    for h in hists:
        merged.update(h)
    return dict(merged)


# --- generated-image classification -----------------------------------------


@dataclass(frozen=True)
class Classification:
    category: str  # success_type1 | success_ev | failure
    reason: str | None = None  # unreadable | bad_pattern | invalid_prefix | invalid_suffix
    text: str = ""

    @property
    def success(self) -> bool:
        return self.category.startswith("success")


def classify_generated(
    img: Raster,
    recognizer: Callable[[Raster], tuple[str, list]],
    threshold: float = 0.8,
) -> Classification:
    """Apply the success criteria to a generated raster.

    Unreadable (no glyphs, or any glyph confidence under threshold) takes
    precedence; otherwise the assembled text is validated and the failure
    reason carried through.  EV success requires a Y/Z suffix letter.
    """
    text, detections = recognizer(img)
    if not detections or any(d.confidence < threshold for d in detections):
        return Classification("failure", "unreadable", text)
    result = validate_plate(text)
    if not result.valid:
        return Classification("failure", result.reason, text)
    ev = any(c in ("Y", "Z") for c in text[6:])
    return Classification("success_ev" if ev else "success_type1", None, text)
