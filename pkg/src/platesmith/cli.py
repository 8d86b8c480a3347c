"""Command-line entry point tying the whole workflow together.

Precedence for every option: built-in default < config file (--config or
the PLATESMITH_CONFIG env var, JSON mapping command name to flag defaults)
< explicit command-line flag.  Exit codes: 1 usage error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .errors import DataError, NumericsError

CONFIG_ENV = "PLATESMITH_CONFIG"


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors must exit 1, not argparse's 2
        raise UsageError(message)


def _parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError as exc:
        raise UsageError(f"bad size {text!r}, expected WIDTHxHEIGHT") from exc


def _parse_splits(text: str) -> dict[str, float]:
    out = {}
    try:
        for part in text.split(","):
            name, frac = part.split("=")
            out[name] = float(frac)
    except ValueError as exc:
        raise UsageError(f"bad splits {text!r}, expected name=frac[,name=frac...]") from exc
    return out


def _manifest_path(arg: str) -> Path:
    path = Path(arg)
    if path.is_dir():
        path = path / "manifest.json"
    return path


def _load_images(manifest_path: Path, split: str | None = None):
    from .dataset_io import decode_image, load_manifest

    manifest = load_manifest(manifest_path)
    items = manifest.splits.get(split, []) if split else manifest.all_items()
    base = manifest_path.parent
    return manifest, [(item, decode_image(base / item.image)) for item in items]


def _ground_truths(manifest_path: Path, split: str | None = None) -> dict[str, str]:
    """Plate text per image stem, read off each item's label file."""
    from .dataset_io import load_manifest, read_annotation

    manifest = load_manifest(manifest_path)
    items = manifest.splits.get(split, []) if split else manifest.all_items()
    base = manifest_path.parent
    out = {}
    for item in items:
        record = read_annotation(base / item.label, image_path=item.image)
        if record.lines:
            out[Path(item.image).stem] = record.plate_text()
    return out


def _emit(payload: dict, as_json: bool, human: str = "") -> None:
    if as_json:
        print(json.dumps(payload, sort_keys=True, indent=2))
    else:
        print(human or json.dumps(payload, sort_keys=True, indent=2))


# --- commands ----------------------------------------------------------------


def cmd_render_dataset(args) -> int:
    from .dataset_io import AnnotationRecord, write_dataset
    from .ocr import pixel_box_to_yolo
    from .render import AugmentRanges, render_dataset
    from .grammar import CHAR_TO_CLASS

    size = _parse_size(args.size)
    ranges = None
    if any((args.noise, args.rotation, args.brightness, args.blur)):
        ranges = AugmentRanges(
            noise_sigma=args.noise,
            rotation_deg=args.rotation,
            brightness=args.brightness,
            blur_radius=args.blur,
        )
    items = render_dataset(
        args.count, size=size, augment_ranges=ranges, seed=args.seed
    )
    entries = []
    for item in items:
        lines = [
            (CHAR_TO_CLASS[c], *pixel_box_to_yolo(box, item.image.width, item.image.height))
            for c, box in zip(item.spec.text, item.boxes)
        ]
        record = AnnotationRecord(image_path="", lines=lines)
        entries.append((item.image, record, "rendered"))
    manifest = write_dataset(
        args.out,
        name=Path(args.out).name,
        entries=entries,
        seed=args.seed,
        splits=_parse_splits(args.splits),
        image_format=args.format,
    )
    counts = {split: len(items) for split, items in manifest.splits.items()}
    _emit(
        {"out": args.out, "count": args.count, "splits": counts},
        args.json,
        f"wrote {args.count} plates to {args.out} (splits: {counts})",
    )
    return 0


def cmd_train(args) -> int:
    from .diffusion import (
        TrainConfig, from_uint8, make_schedule, save_checkpoint, train_denoiser,
    )
    from .nn import PROFILES, UNetDenoiser

    if args.profile not in PROFILES:
        raise UsageError(f"unknown profile {args.profile!r}; options: {sorted(PROFILES)}")
    net_cfg = PROFILES[args.profile]
    manifest_path = _manifest_path(args.data)
    _, pairs = _load_images(manifest_path, split="train")
    if not pairs:
        raise DataError(f"no train split in {manifest_path}")
    expected = (net_cfg.base_size[0], net_cfg.base_size[1], net_cfg.in_channels)
    data = []
    for item, img in pairs:
        if img.data.shape != expected:
            raise DataError(
                f"{item.image}: shape {img.data.shape} does not match profile {expected}"
            )
        data.append(from_uint8(img.data).transpose(2, 0, 1))
    data = np.stack(data)

    sched = make_schedule(args.t_steps, args.beta_start, args.beta_end)
    cfg = TrainConfig(
        batch_size=args.batch,
        base_lr=args.lr,
        warmup_steps=args.warmup,
        total_steps=args.steps,
        ema_decay=args.ema_decay,
        dropout=net_cfg.dropout,
        epochs=1,
    )
    net = UNetDenoiser(net_cfg)
    dtype = np.float32 if args.dtype == "float32" else np.float64
    result = train_denoiser(
        net, data, sched, cfg, seed=args.seed, log_every=args.log_every, dtype=dtype
    )
    save_checkpoint(
        args.out, net_cfg, sched, result.params, result.ema_params, result.steps
    )
    losses_path = Path(args.out).with_suffix(".losses.json")
    losses_path.write_text(json.dumps([round(v, 6) for v in result.losses]))
    payload = {
        "checkpoint": args.out,
        "steps": result.steps,
        "initial_loss": round(float(np.mean(result.losses[:10])), 6),
        "final_loss": round(float(np.mean(result.losses[-10:])), 6),
    }
    _emit(payload, args.json, f"trained {result.steps} steps -> {args.out} "
          f"(loss {payload['initial_loss']} -> {payload['final_loss']})")
    return 0


def cmd_sample(args) -> int:
    from .dataset_io import AnnotationRecord, write_dataset
    from .diffusion import load_checkpoint, sample_loop, to_uint8
    from .nn import UNetDenoiser
    from .nn.autograd import compute_dtype
    from .raster import Raster, resize_area

    net_cfg, sched, params, ema_params, _, _ = load_checkpoint(args.checkpoint)
    net = UNetDenoiser(net_cfg)
    chosen = ema_params if args.use_ema else params
    rng = np.random.default_rng(args.seed)
    shape = (args.count, net_cfg.in_channels, *net_cfg.base_size)
    dtype = np.float32 if args.dtype == "float32" else np.float64
    outputs = []
    remaining = args.count
    with compute_dtype(dtype):
        while remaining > 0:
            batch = min(remaining, args.batch)
            out = sample_loop(
                lambda x, t: net.predict(chosen, x, t),
                sched,
                (batch, *shape[1:]),
                rng,
            )
            outputs.append(out)
            remaining -= batch
    samples = np.concatenate(outputs)
    entries = []
    for sample in samples:
        arr = to_uint8(sample).transpose(1, 2, 0)
        if args.resize:
            w, h = _parse_size(args.resize)
            arr = np.clip(np.rint(resize_area(arr.astype(np.float64), h, w)), 0, 255).astype(
                np.uint8
            )
        img = Raster.from_array(arr)
        entries.append((img, AnnotationRecord(image_path="", lines=[]), "generated"))
    write_dataset(
        args.out, name=Path(args.out).name, entries=entries, seed=args.seed,
        image_format=args.format,
    )
    _emit(
        {"out": args.out, "count": args.count},
        args.json,
        f"sampled {args.count} images -> {args.out}",
    )
    return 0


def cmd_classify(args) -> int:
    from .metrics import classify_generated
    from .ocr import recognize_plate

    manifest_path = _manifest_path(getattr(args, "in"))
    _, pairs = _load_images(manifest_path)
    counts: dict[str, int] = {}
    rows = []
    for item, img in pairs:
        result = classify_generated(img, recognize_plate, threshold=args.threshold)
        key = result.category if result.success else f"failure_{result.reason}"
        counts[key] = counts.get(key, 0) + 1
        rows.append({"image": item.image, "category": key, "text": result.text})
    payload = {"counts": counts, "items": rows if args.verbose else None, "n": len(pairs)}
    human = "\n".join(f"{k:24s} {v:6d}" for k, v in sorted(counts.items()))
    _emit(payload, args.json, human + f"\ntotal {len(pairs)}")
    return 0


def cmd_analyze(args) -> int:
    from .grammar import parse_plate, validate_plate
    from .metrics import distribution_report, uniform_reference

    manifest_path = _manifest_path(getattr(args, "in"))
    truths = _ground_truths(manifest_path)
    plates = [parse_plate(t) for t in truths.values() if validate_plate(t).valid]
    if args.reference:
        ref_truths = _ground_truths(_manifest_path(args.reference))
        ref_plates = [parse_plate(t) for t in ref_truths.values() if validate_plate(t).valid]
        reference = distribution_report(ref_plates)
    else:
        reference = uniform_reference()
    report = distribution_report(plates, reference)
    if args.csv:
        Path(args.csv).write_text(report.histogram_csv())
    print(report.to_json())
    return 0


def cmd_fid(args) -> int:
    from .metrics import feature_extract, fid

    _, pairs_a = _load_images(_manifest_path(args.a))
    _, pairs_b = _load_images(_manifest_path(args.b))
    stats_a = feature_extract([img for _, img in pairs_a])
    stats_b = feature_extract([img for _, img in pairs_b])
    value = fid(stats_a, stats_b)
    _emit({"fid": value, "n_a": len(pairs_a), "n_b": len(pairs_b)}, args.json, f"{value:.6f}")
    return 0


def cmd_ocr(args) -> int:
    from .dataset_io import decode_image
    from .ocr import recognize_plate

    img = decode_image(getattr(args, "in"))
    text, detections = recognize_plate(img)
    payload = {
        "text": text,
        "detections": [
            {"class_id": d.class_id, "char": d.char, "box": list(d.box),
             "confidence": round(d.confidence, 4)}
            for d in detections
        ],
    }
    _emit(payload, args.json, f"{text}  " + " ".join(
        f"{d.char}:{d.confidence:.2f}" for d in detections))
    return 0


def cmd_pseudolabel(args) -> int:
    from .dataset_io import (
        AnnotationRecord, decode_image, load_manifest, read_annotation, write_dataset,
    )
    from .ocr import Detection
    from .pipeline import LabeledExample, expansion_round

    labeled_path = _manifest_path(args.labeled)
    pool_path = _manifest_path(args.pool)
    labeled_manifest = load_manifest(labeled_path)
    labeled = []
    for item in labeled_manifest.all_items():
        record = read_annotation(labeled_path.parent / item.label, image_path=item.image)
        detections = [Detection(ln[0], tuple(ln[1:]), 1.0) for ln in record.lines]
        labeled.append(
            LabeledExample(
                image_ref=str(labeled_path.parent / item.image),
                detections=detections,
                source="manual",
                text=record.plate_text(),
            )
        )
    pool_manifest = load_manifest(pool_path)
    pool = [
        (str(pool_path.parent / item.image), decode_image(pool_path.parent / item.image))
        for item in pool_manifest.all_items()
    ]
    loader = lambda ref: decode_image(ref)
    enlarged, report = expansion_round(
        labeled, pool, args.tau, args.round, loader=loader
    )
    entries = []
    for example in enlarged:
        img = decode_image(example.image_ref)
        lines = [(d.class_id, *d.box) for d in example.detections]
        provenance = "rendered" if example.source == "manual" else (
            "pseudolabeled:" + example.source.split(":")[1]
        )
        entries.append((img, AnnotationRecord(image_path="", lines=lines), provenance))
    write_dataset(args.out, name=Path(args.out).name, entries=entries, seed=0,
                  image_format=args.format)
    payload = {
        "round": report.round_id,
        "pool": report.pool_size,
        "accepted": report.accepted,
        "rejected": report.rejected,
        "labeled_total": len(enlarged),
        "out": args.out,
    }
    _emit(payload, args.json, json.dumps(payload, sort_keys=True, indent=2))
    return 0


def cmd_sweep(args) -> int:
    from .dataset_io import decode_image, load_manifest, read_annotation
    from .ocr import Detection, recognize_plate
    from .pipeline import LabeledExample, fit_templates, sweep_thresholds

    val_path = _manifest_path(args.val)
    _, pairs = _load_images(val_path)
    truths = _ground_truths(val_path)
    validation = [
        (img, truths[Path(item.image).stem])
        for item, img in pairs
        if Path(item.image).stem in truths
    ]
    if args.labeled:
        labeled_path = _manifest_path(args.labeled)
        labeled_manifest = load_manifest(labeled_path)
        labeled = []
        for item in labeled_manifest.all_items():
            record = read_annotation(labeled_path.parent / item.label, image_path=item.image)
            detections = [Detection(ln[0], tuple(ln[1:]), 1.0) for ln in record.lines]
            labeled.append(LabeledExample(
                image_ref=str(labeled_path.parent / item.image), detections=detections))
        bank = fit_templates(labeled, lambda ref: decode_image(ref))
        recognizer = lambda img: recognize_plate(img, bank=bank)
    else:
        recognizer = recognize_plate
    table = sweep_thresholds(recognizer, validation)
    payload = {
        "thresholds": list(table.thresholds),
        "accuracies": [round(a, 4) for a in table.accuracies],
        "chosen": table.chosen,
    }
    human = "\n".join(f"tau={t:.1f}  accuracy={a:.4f}" for t, a in table.rows())
    _emit(payload, args.json, human + f"\nchosen tau = {table.chosen}")
    return 0


def cmd_evaluate(args) -> int:
    from .pipeline import binary_accuracy

    try:
        predictions = json.loads(Path(args.pred).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read predictions {args.pred}: {exc}") from exc
    truths = _ground_truths(_manifest_path(args.truth))
    pairs = [(predictions.get(stem, ""), truth) for stem, truth in sorted(truths.items())]
    accuracy = binary_accuracy(pairs)
    _emit(
        {"accuracy": accuracy, "n": len(pairs)},
        args.json,
        f"binary accuracy {accuracy:.4f} over {len(pairs)} plates",
    )
    return 0


def cmd_serve(args) -> int:
    from .service import serve

    serve(
        manifest_path=str(_manifest_path(args.manifest)),
        port=args.port,
        host=args.host,
        verdicts_path=args.verdicts,
        ui_dir=args.ui_dir,
        lease_seconds=args.lease_seconds,
    )
    return 0


# --- parser wiring -----------------------------------------------------------


def build_parser() -> Parser:
    parser = Parser(prog="platesmith", description=__doc__)
    parser.add_argument("--config", default=None, help="JSON config file path")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **flags):
        p = sub.add_parser(name)
        p.set_defaults(fn=fn)
        for flag, spec in flags.items():
            p.add_argument(f"--{flag.replace('_', '-')}", **spec)
        p.add_argument("--json", action="store_true", default=None)
        return p

    add(
        "render-dataset", cmd_render_dataset,
        count={"type": int, "default": None},
        seed={"type": int, "default": None},
        size={"default": None},
        out={"default": None},
        splits={"default": None},
        format={"default": None, "choices": ["png", "ppm"]},
        noise={"type": float, "default": None},
        rotation={"type": float, "default": None},
        brightness={"type": float, "default": None},
        blur={"type": float, "default": None},
    )
    add(
        "train", cmd_train,
        data={"default": None}, out={"default": None}, profile={"default": None},
        steps={"type": int, "default": None}, batch={"type": int, "default": None},
        lr={"type": float, "default": None}, warmup={"type": int, "default": None},
        ema_decay={"type": float, "default": None}, seed={"type": int, "default": None},
        t_steps={"type": int, "default": None}, beta_start={"type": float, "default": None},
        beta_end={"type": float, "default": None}, dtype={"default": None},
        log_every={"type": int, "default": None},
    )
    add(
        "sample", cmd_sample,
        checkpoint={"default": None}, count={"type": int, "default": None},
        out={"default": None}, seed={"type": int, "default": None},
        batch={"type": int, "default": None}, resize={"default": None},
        format={"default": None, "choices": ["png", "ppm"]},
        use_ema={"action": "store_true", "default": None},
        dtype={"default": None},
    )
    p = add("classify", cmd_classify,
            threshold={"type": float, "default": None},
            verbose={"action": "store_true", "default": None})
    p.add_argument("--in", dest="in", default=None)
    p = add("analyze", cmd_analyze, reference={"default": None}, csv={"default": None})
    p.add_argument("--in", dest="in", default=None)
    add("fid", cmd_fid, a={"default": None}, b={"default": None})
    p = add("ocr", cmd_ocr)
    p.add_argument("--in", dest="in", default=None)
    add(
        "pseudolabel", cmd_pseudolabel,
        labeled={"default": None}, pool={"default": None},
        tau={"type": float, "default": None}, out={"default": None},
        round={"type": int, "default": None},
        format={"default": None, "choices": ["png", "ppm"]},
    )
    add("sweep", cmd_sweep, val={"default": None}, labeled={"default": None})
    add("evaluate", cmd_evaluate, pred={"default": None}, truth={"default": None})
    add(
        "serve", cmd_serve,
        manifest={"default": None}, port={"type": int, "default": None},
        host={"default": None}, verdicts={"default": None}, ui_dir={"default": None},
        lease_seconds={"type": float, "default": None},
    )
    return parser


DEFAULTS: dict[str, dict] = {
    "render-dataset": {
        "count": 100, "seed": 0, "size": "193x72", "splits": "train=1.0",
        "format": "png", "noise": 0.0, "rotation": 0.0, "brightness": 0.0, "blur": 0.0,
        "json": False,
    },
    "train": {
        "profile": "desk-32x16", "steps": 400, "batch": 32, "lr": 1e-3, "warmup": 50,
        "ema_decay": 0.999, "seed": 0, "t_steps": 100, "beta_start": 1e-3, "beta_end": 0.2,
        "dtype": "float32", "log_every": 0, "json": False,
    },
    "sample": {
        "count": 16, "seed": 0, "batch": 128, "resize": None, "format": "png",
        "use_ema": False, "dtype": "float32", "json": False,
    },
    "classify": {"threshold": 0.8, "verbose": False, "json": False},
    "analyze": {"reference": None, "csv": None, "json": True},
    "fid": {"json": False},
    "ocr": {"json": False},
    "pseudolabel": {"tau": 0.8, "round": 1, "format": "png", "json": False},
    "sweep": {"labeled": None, "json": False},
    "evaluate": {"json": False},
    "serve": {
        "port": 8400, "host": "127.0.0.1", "verdicts": None, "ui_dir": None,
        "lease_seconds": 600.0, "json": False,
    },
}

REQUIRED: dict[str, tuple[str, ...]] = {
    "render-dataset": ("out",),
    "train": ("data", "out"),
    "sample": ("checkpoint", "out"),
    "classify": ("in",),
    "analyze": ("in",),
    "fid": ("a", "b"),
    "ocr": ("in",),
    "pseudolabel": ("labeled", "pool", "out"),
    "sweep": ("val",),
    "evaluate": ("pred", "truth"),
    "serve": ("manifest",),
}


def _apply_config(args: argparse.Namespace) -> None:
    """Fill unset flags from the config file, then from built-in defaults."""
    config_path = args.config or os.environ.get(CONFIG_ENV)
    config: dict = {}
    if config_path:
        try:
            config = json.loads(Path(config_path).read_text())
        except OSError as exc:
            raise DataError(f"cannot read config {config_path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"bad config JSON in {config_path}: {exc}") from exc
    section = config.get(args.command, {})
    defaults = DEFAULTS.get(args.command, {})
    for key, value in {**defaults, **section}.items():
        attr = key.replace("-", "_") if key != "in" else "in"
        if getattr(args, attr, None) is None:
            setattr(args, attr, value)
    missing = [k for k in REQUIRED.get(args.command, ()) if getattr(args, k, None) is None]
    if missing:
        raise UsageError(f"missing required flags for {args.command}: "
                         + ", ".join(f"--{m}" for m in missing))


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _apply_config(args)
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericsError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
