"""Bit-exact dataset persistence: images, label files, manifests, verdicts.

Label files use the one-line-per-object detection format (class id plus
normalized center/size), fixed to six decimal places so round trips are
byte-identical.  All writes go through write-temp-then-rename so readers
never observe partial files.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError
from .grammar import CLASS_CHARS
from .raster import Raster

LABEL_PRECISION = 6


def atomic_write_bytes(path: Path | str, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path | str, text: str) -> None:
    atomic_write_bytes(path, text.encode())


# --- label files -------------------------------------------------------------


@dataclass
class AnnotationRecord:
    """Per-image label file: (class_id, x_center, y_center, w, h) lines."""

    image_path: str
    lines: list[tuple[int, float, float, float, float]] = field(default_factory=list)

    def label_path(self) -> str:
        return str(Path(self.image_path).with_suffix(".txt"))

    def text(self) -> str:
        rows = []
        for class_id, cx, cy, w, h in self.lines:
            if not all(0.0 <= v <= 1.0 for v in (cx, cy, w, h)):
                raise DataError(f"box {(cx, cy, w, h)} outside unit square")
            rows.append(
                f"{class_id} {cx:.{LABEL_PRECISION}f} {cy:.{LABEL_PRECISION}f} "
                f"{w:.{LABEL_PRECISION}f} {h:.{LABEL_PRECISION}f}"
            )
        return "".join(row + "\n" for row in rows)

    def plate_text(self) -> str:
        """Characters read off the boxes left to right."""
        ordered = sorted(self.lines, key=lambda ln: ln[1])
        return "".join(CLASS_CHARS[ln[0]] for ln in ordered)


def write_annotation(record: AnnotationRecord, path: Path | str) -> None:
    atomic_write_text(path, record.text())


def read_annotation(path: Path | str, image_path: str = "") -> AnnotationRecord:
    record = AnnotationRecord(image_path=image_path or str(path))
    try:
        content = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read annotation {path}: {exc}") from exc
    for lineno, line in enumerate(content.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise FormatError(f"expected 5 fields, got {len(parts)}", line=lineno)
        try:
            class_id = int(parts[0])
            coords = tuple(float(p) for p in parts[1:])
        except ValueError as exc:
            raise FormatError(str(exc), line=lineno) from exc
        if class_id < 0 or class_id >= len(CLASS_CHARS):
            raise FormatError(f"class id {class_id} out of range", line=lineno)
        if any(not 0.0 <= v <= 1.0 for v in coords):
            raise FormatError(f"coordinate out of [0,1]: {coords}", line=lineno)
        record.lines.append((class_id, *coords))
    return record


# --- image codecs ------------------------------------------------------------


def encode_ppm(img: Raster) -> bytes:
    """Binary P6 (RGB) or P5 (grayscale), 8-bit."""
    magic = b"P6" if img.channels == 3 else b"P5"
    header = magic + f"\n{img.width} {img.height}\n255\n".encode()
    return header + img.data.tobytes()


def decode_ppm(payload: bytes) -> Raster:
    try:
        magic, rest = payload.split(None, 1)
    except ValueError as exc:
        raise FormatError("empty or headerless PPM payload") from exc
    if magic not in (b"P6", b"P5"):
        raise FormatError(f"unsupported magic {magic!r}")
    fields = []
    pos = 0
    while len(fields) < 3:
        while pos < len(rest) and rest[pos : pos + 1].isspace():
            pos += 1
        if rest[pos : pos + 1] == b"#":  # comment to end of line
            while pos < len(rest) and rest[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(rest) and not rest[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header")
        fields.append(rest[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise FormatError(f"bad PPM header fields {fields}") from exc
    if maxval != 255:
        raise FormatError(f"only 8-bit supported, maxval={maxval}")
    channels = 3 if magic == b"P6" else 1
    expected = width * height * channels
    raw = rest[pos : pos + expected]
    if len(raw) != expected:
        raise FormatError(f"payload truncated: expected {expected} bytes, got {len(raw)}")
    data = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, channels)
    return Raster(width=width, height=height, channels=channels, data=data.copy())


def encode_image(img: Raster, path: Path | str) -> None:
    """Write losslessly by extension: .ppm/.pgm native, .png via Pillow."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".ppm", ".pgm"):
        atomic_write_bytes(path, encode_ppm(img))
    elif suffix == ".png":
        import io

        from PIL import Image

        mode = "RGB" if img.channels == 3 else "L"
        arr = img.data if img.channels == 3 else img.data[:, :, 0]
        buffer = io.BytesIO()
        Image.fromarray(arr, mode=mode).save(buffer, format="PNG")
        atomic_write_bytes(path, buffer.getvalue())
    else:
        raise DataError(f"unsupported image extension {suffix!r}")


def decode_image(path: Path | str) -> Raster:
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    suffix = path.suffix.lower()
    if suffix in (".ppm", ".pgm"):
        return decode_ppm(payload)
    if suffix == ".png":
        import io

        from PIL import Image

        try:
            with Image.open(io.BytesIO(payload)) as im:
                im = im.convert("RGB") if im.mode not in ("L", "RGB") else im
                arr = np.asarray(im)
        except Exception as exc:
            raise FormatError(f"bad PNG {path}: {exc}") from exc
        if arr.ndim == 2:
            arr = arr[:, :, None]
        return Raster(width=arr.shape[1], height=arr.shape[0], channels=arr.shape[2], data=arr)
    raise DataError(f"unsupported image extension {suffix!r}")


# --- manifests ---------------------------------------------------------------

MANIFEST_VERSION = 1
PROVENANCES = ("rendered", "generated", "human-verified")  # plus pseudolabeled:<round>


@dataclass
class ManifestItem:
    image: str  # path relative to the manifest directory
    label: str
    provenance: str = "rendered"

    def __post_init__(self):
        if self.provenance not in PROVENANCES and not self.provenance.startswith(
            "pseudolabeled:"
        ):
            raise DataError(f"unknown provenance {self.provenance!r}")


@dataclass
class Manifest:
    name: str
    seed: int = 0
    splits: dict[str, list[ManifestItem]] = field(default_factory=dict)

    def all_items(self) -> list[ManifestItem]:
        return [item for split in ("train", "val", "test") for item in self.splits.get(split, [])]

    def to_json(self) -> str:
        payload = {
            "format_version": MANIFEST_VERSION,
            "name": self.name,
            "seed": self.seed,
            "class_map": {str(i): c for i, c in enumerate(CLASS_CHARS)},
            "splits": {
                split: [
                    {"image": it.image, "label": it.label, "provenance": it.provenance}
                    for it in items
                ]
                for split, items in self.splits.items()
            },
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def save_manifest(manifest: Manifest, path: Path | str) -> None:
    seen: set[str] = set()
    for items in manifest.splits.values():
        for it in items:
            if it.image in seen:
                raise DataError(f"item {it.image} appears in more than one split")
            seen.add(it.image)
    atomic_write_text(path, manifest.to_json())


def load_manifest(path: Path | str, check_integrity: bool = True) -> Manifest:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad manifest JSON: {exc}") from exc
    if payload.get("format_version") != MANIFEST_VERSION:
        raise DataError(f"unsupported manifest version {payload.get('format_version')}")
    expected_map = {str(i): c for i, c in enumerate(CLASS_CHARS)}
    if payload.get("class_map") != expected_map:
        raise DataError("manifest class map does not match the fixed 24-class order")
    manifest = Manifest(name=payload.get("name", path.stem), seed=payload.get("seed", 0))
    seen: set[str] = set()
    for split, items in payload.get("splits", {}).items():
        rows = []
        for entry in items:
            item = ManifestItem(
                image=entry["image"], label=entry["label"], provenance=entry["provenance"]
            )
            if item.image in seen:
                raise DataError(f"item {item.image} appears in more than one split")
            seen.add(item.image)
            rows.append(item)
        manifest.splits[split] = rows
    if check_integrity:
        base = path.parent
        for item in manifest.all_items():
            for rel in (item.image, item.label):
                if not (base / rel).exists():
                    raise DataError(f"manifest references missing file {rel}")
    return manifest


def write_dataset(
    directory: Path | str,
    name: str,
    entries: list[tuple[Raster, AnnotationRecord, str]],
    seed: int = 0,
    splits: dict[str, float] | None = None,
    image_format: str = "png",
) -> Manifest:
    """Materialize images/, labels/, and manifest.json under ``directory``.

    ``entries`` are (image, record, provenance); split fractions default to
    all-train.  Item order inside splits follows input order.
    """
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "labels").mkdir(parents=True, exist_ok=True)
    fractions = splits or {"train": 1.0}
    counts = {s: int(round(f * len(entries))) for s, f in fractions.items()}
    manifest = Manifest(name=name, seed=seed)
    index = 0
    for split in fractions:
        rows = []
        for _ in range(counts[split]):
            if index >= len(entries):
                break
            img, record, provenance = entries[index]
            stem = f"{index:06d}"
            image_rel = f"images/{stem}.{image_format}"
            label_rel = f"labels/{stem}.txt"
            encode_image(img, directory / image_rel)
            write_annotation(record, directory / label_rel)
            rows.append(ManifestItem(image=image_rel, label=label_rel, provenance=provenance))
            index += 1
        manifest.splits[split] = rows
    save_manifest(manifest, directory / "manifest.json")
    return manifest
