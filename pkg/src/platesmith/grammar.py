"""Grammar for one-line Ukrainian license plate codes (2004-2021 series).

A valid code is eight characters, ``LLDDDDLL``: a two-letter regional
prefix, four digits, and a two-letter suffix.  The prefix must be one of
the 54 codes in the bundled region table (27 regions, one 2004-series and
one 2013-series code each).  Suffix letters come from the 12 Latin-visual
letters used on plates plus Y and Z, which mark electric vehicles.
"""

from __future__ import annotations

import csv
import enum
import re
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .errors import DataError

# The 12 Latin-visual letters allowed on plates, alphabetical.
BASE_LETTERS = ("A", "B", "C", "E", "H", "I", "K", "M", "O", "P", "T", "X")
# Electric-vehicle marker letters, valid only in the suffix.
EV_LETTERS = ("Y", "Z")
SUFFIX_LETTERS = BASE_LETTERS + EV_LETTERS
DIGITS = tuple(str(d) for d in range(10))

# Fixed 24-class map shared by detections, label files, and manifests:
# ids 0-9 are the digits, ids 10-23 the letters in alphabetical order.
CLASS_CHARS = DIGITS + SUFFIX_LETTERS
CHAR_TO_CLASS = {c: i for i, c in enumerate(CLASS_CHARS)}

_PATTERN = re.compile(r"^[A-Z]{2}[0-9]{4}[A-Z]{2}$")


class Era(enum.Enum):
    P2004 = "2004"
    P2013 = "2013"


@dataclass(frozen=True)
class RegionEntry:
    prefix2004: str
    prefix2013: str
    region: str


def _load_region_table() -> tuple[RegionEntry, ...]:
    text = resources.files("platesmith.data").joinpath("region_codes.csv").read_text()
    rows = [r for r in csv.reader(text.splitlines()) if r and not r[0].startswith("#")]
    entries = tuple(RegionEntry(p04, p13, region) for p04, p13, region in rows)
    if len(entries) != 27:
        raise DataError(f"region table must have 27 entries, found {len(entries)}")
    prefixes = [e.prefix2004 for e in entries] + [e.prefix2013 for e in entries]
    if len(set(prefixes)) != 54:
        raise DataError("region table prefixes are not all distinct")
    return entries


REGION_TABLE: tuple[RegionEntry, ...] = _load_region_table()
_PREFIX_2004 = {e.prefix2004: e for e in REGION_TABLE}
_PREFIX_2013 = {e.prefix2013: e for e in REGION_TABLE}
VALID_PREFIXES = tuple(sorted(_PREFIX_2004) + sorted(_PREFIX_2013))


@dataclass(frozen=True)
class PlateSpec:
    """Parsed plate text: ``prefix + digits + suffix`` with derived fields."""

    prefix: str
    digits: str
    suffix: str
    region: str
    era: Era
    ev: bool

    def format(self) -> str:
        return self.prefix + self.digits + self.suffix

    @property
    def text(self) -> str:
        return self.format()


@dataclass(frozen=True)
class ValidationResult:
    valid: bool
    reason: str | None = None  # bad_pattern | invalid_prefix | invalid_suffix

    def __bool__(self) -> bool:
        return self.valid


def validate_plate(text: str) -> ValidationResult:
    """Check a string against the plate code rules.

    Failures report the first violated rule, checked in fixed order:
    pattern, then prefix, then suffix.
    """
    if not isinstance(text, str) or not _PATTERN.match(text):
        return ValidationResult(False, "bad_pattern")
    if text[:2] not in _PREFIX_2004 and text[:2] not in _PREFIX_2013:
        return ValidationResult(False, "invalid_prefix")
    if any(c not in SUFFIX_LETTERS for c in text[6:]):
        return ValidationResult(False, "invalid_suffix")
    return ValidationResult(True)


def parse_plate(text: str) -> PlateSpec:
    """Parse a valid plate string; raises DataError with the failure reason."""
    result = validate_plate(text)
    if not result.valid:
        raise DataError(f"invalid plate {text!r}: {result.reason}")
    prefix, digits, suffix = text[:2], text[2:6], text[6:]
    if prefix in _PREFIX_2004:
        entry, era = _PREFIX_2004[prefix], Era.P2004
    else:
        entry, era = _PREFIX_2013[prefix], Era.P2013
    ev = any(c in EV_LETTERS for c in suffix)
    return PlateSpec(prefix, digits, suffix, entry.region, era, ev)


def region_of_prefix(prefix: str) -> str | None:
    """Region for a two-letter prefix from either series, or None if unknown."""
    entry = _PREFIX_2004.get(prefix) or _PREFIX_2013.get(prefix)
    return entry.region if entry else None


@dataclass
class SampleWeights:
    """Optional per-position frequency tables for plate sampling.

    ``prefix`` weighs whole two-letter prefixes; ``digits`` and ``suffix``
    weigh single characters and are shared across their four/two positions
    unless a per-position sequence of tables is given.
    """

    prefix: dict[str, float] | None = None
    digits: dict[str, float] | list[dict[str, float]] | None = None
    suffix: dict[str, float] | list[dict[str, float]] | None = None


def _weight_vector(table: dict[str, float] | None, support: tuple[str, ...]) -> np.ndarray:
    if table is None:
        return np.full(len(support), 1.0 / len(support))
    w = np.array([float(table.get(s, 0.0)) for s in support])
    if (w < 0).any():
        raise DataError("sampling weights must be nonnegative")
    total = w.sum()
    if total <= 0:
        raise DataError("sampling weights must have positive total mass")
    return w / total


def _per_position(tables, support, n):
    if tables is None or isinstance(tables, dict):
        vec = _weight_vector(tables, support)
        return [vec] * n
    if len(tables) != n:
        raise DataError(f"expected {n} per-position tables, got {len(tables)}")
    return [_weight_vector(t, support) for t in tables]


def sample_plate(rng: np.random.Generator, weights: SampleWeights | None = None) -> PlateSpec:
    """Draw a plate; uniform over valid codes unless weights are given."""
    weights = weights or SampleWeights()
    prefix_w = _weight_vector(weights.prefix, VALID_PREFIXES)
    digit_w = _per_position(weights.digits, DIGITS, 4)
    suffix_w = _per_position(weights.suffix, SUFFIX_LETTERS, 2)

    prefix = VALID_PREFIXES[rng.choice(len(VALID_PREFIXES), p=prefix_w)]
    digits = "".join(DIGITS[rng.choice(10, p=w)] for w in digit_w)
    suffix = "".join(SUFFIX_LETTERS[rng.choice(len(SUFFIX_LETTERS), p=w)] for w in suffix_w)
    return parse_plate(prefix + digits + suffix)
