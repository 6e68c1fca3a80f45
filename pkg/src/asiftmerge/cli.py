"""Command-line entry point: ``train``, ``detect`` and ``eval``.

Exit statuses: 0 success (including "object not found"), 1 usage error,
2 I/O, format or no-keypoint error, 3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .asift import AsiftParams
from .errors import (AsiftError, DimensionMismatchError, ImageFormatError, InvariantError,
                     NoObjectSeedError)
from .imageio import read_color, read_mask, write_color, write_mask
from .matcher import ObjectModel, detect_test_features, matched_points, params_fingerprint, train_model
from .segmerge import (Metric, MergeParams, extract_boundary, format_contours, initial_segment,
                       merge_regions, seed_labels)
from .sift import PyramidParams

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_INVARIANT = 0, 1, 2, 3
OVERLAY_COLOR = (0, 255, 0)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two boolean masks; 1 when both are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def format_rate(detected: int, tested: int) -> str:
    """``100 * detected / tested`` truncated (not rounded) to two decimals."""
    if tested <= 0:
        raise ValueError("no tests")
    q = 10000 * detected // tested
    return f"{q // 100}.{q % 100:02d}"


# --------------------------------------------------------------------------
# parameter plumbing

def _asift_params(args) -> AsiftParams:
    return AsiftParams(max_tilt_exponent=args.max_tilt_exponent, phi_step_base=args.phi_step,
                       sift=PyramidParams())


def _merge_params(args) -> MergeParams:
    return MergeParams(metric=Metric(args.metric), spatial_bandwidth=args.spatial_bandwidth,
                       range_bandwidth=args.range_bandwidth, min_region_px=args.min_region_px,
                       min_seed_keypoints=args.min_seeds,
                       filtered_histograms=args.filtered_histograms)


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {k: _jsonable(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, Metric):
        return obj.value
    return obj


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


class _Clock:
    def __init__(self):
        self.stages: dict[str, float] = {}

    @contextmanager
    def stage(self, name):
        t0 = time.perf_counter()
        yield
        self.stages[name] = round(time.perf_counter() - t0, 6)


# --------------------------------------------------------------------------
# detection

@dataclasses.dataclass
class Detection:
    mask: np.ndarray
    contours: list
    found: bool
    detected_keypoints: int
    matched_keypoints: int
    initial_regions: int
    final_regions: int
    timings: dict


def run_detection(img: np.ndarray, model: ObjectModel, ap: AsiftParams, mp: MergeParams,
                  ratio: float = 0.8, fast: bool = False) -> Detection:
    clock = _Clock()
    with clock.stage("keypoints"):
        feats = detect_test_features(img, ap, fast)
        pts = matched_points(feats, model, img.shape[:2], ratio)
    with clock.stage("segmentation"):
        seg = initial_segment(img, mp)
    found = True
    with clock.stage("merging"):
        try:
            g = seed_labels(seg, img, pts, mp)
            mask = merge_regions(g, mp)
            final = len(g)
        except NoObjectSeedError:
            found = False
            mask = np.zeros(img.shape[:2], dtype=bool)
            final = seg.region_count
    with clock.stage("boundary"):
        contours = extract_boundary(mask)
    return Detection(mask, contours, found, len(feats), len(pts), seg.region_count, final,
                     clock.stages)


def draw_overlay(img: np.ndarray, contours) -> np.ndarray:
    out = np.array(img, dtype=np.uint8, copy=True)
    for c in contours:
        if c:
            xy = np.asarray(c)
            out[xy[:, 1], xy[:, 0]] = OVERLAY_COLOR
    return out


def _params_echo(args, ap, mp) -> dict:
    return {
        "asift": _jsonable(ap),
        "fast": bool(args.fast),
        "iou_threshold": args.iou_threshold,
        "merge": _jsonable(mp),
        "ratio_threshold": args.ratio,
    }


def _load_model(path, ap: AsiftParams) -> ObjectModel:
    model = ObjectModel.load(path)
    if model.params_fingerprint != params_fingerprint(ap):
        print(f"warning: model {path} was trained with different detector parameters",
              file=sys.stderr)
    return model


def cmd_train(args) -> int:
    ap = _asift_params(args)
    images = [read_color(p) for p in args.images]
    model = train_model(images, args.model, ap, consensus=args.consensus, ratio_threshold=args.ratio)
    model.save(args.out)
    print(f"{model.name}: {len(model.descriptors)} descriptors from {model.source_count} image(s)")
    return EXIT_OK


def cmd_detect(args) -> int:
    ap = _asift_params(args)
    mp = _merge_params(args)
    model = _load_model(args.model, ap)
    img = read_color(args.image)
    det = run_detection(img, model, ap, mp, args.ratio, args.fast)
    prefix = args.out
    write_mask(f"{prefix}_mask.pgm", det.mask)
    write_color(f"{prefix}_overlay.png", draw_overlay(img, det.contours))
    Path(f"{prefix}_contours.txt").write_text(format_contours(det.contours), encoding="utf-8")
    report = {
        "found": det.found,
        "image": str(args.image),
        "keypoints": {"detected": det.detected_keypoints, "matched": det.matched_keypoints},
        "model": model.name,
        "object_pixels": int(np.count_nonzero(det.mask)),
        "params": _params_echo(args, ap, mp),
        "regions": {"initial": det.initial_regions, "final": det.final_regions},
    }
    if args.truth:
        score = iou(det.mask, read_mask(args.truth))
        report["iou"] = score
        report["full_detection"] = score >= args.iou_threshold
    if args.timings:
        report["timings"] = det.timings
    Path(f"{prefix}_report.json").write_text(_dumps(report), encoding="utf-8")
    status = "found" if det.found else "object not found"
    print(f"{status}: {report['object_pixels']} object pixels, "
          f"{det.matched_keypoints}/{det.detected_keypoints} keypoints matched")
    return EXIT_OK


def _read_manifest(path: Path) -> list[dict]:
    try:
        entries = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ImageFormatError(f"{path}: {exc}") from exc
    if not isinstance(entries, list) or not entries:
        raise ImageFormatError(f"{path}: manifest must be a non-empty JSON array")
    for i, e in enumerate(entries):
        if not isinstance(e, dict) or "image" not in e or "truth_mask" not in e:
            raise ImageFormatError(f"{path}: entry {i} needs 'image' and 'truth_mask'")
    return entries


def cmd_eval(args) -> int:
    manifest = Path(args.manifest)
    entries = _read_manifest(manifest)
    base = manifest.parent

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    needs_model = any("prediction" not in e for e in entries)
    if needs_model and not args.model:
        raise UsageError("--model is required unless every manifest entry has a prediction")
    ap = _asift_params(args)
    mp = _merge_params(args)
    model = _load_model(args.model, ap) if needs_model else None
    out_dir = Path(args.out_dir) if args.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for i, e in enumerate(entries):
        truth = read_mask(resolve(e["truth_mask"]))
        if "prediction" in e:
            pred = read_mask(resolve(e["prediction"]))
        else:
            img = read_color(resolve(e["image"]))
            det = run_detection(img, model, ap, mp, args.ratio, args.fast)
            pred = det.mask
            if out_dir:
                write_mask(out_dir / f"{i:04d}_mask.pgm", pred)
        score = iou(pred, truth)
        rows.append({"image": e["image"], "iou": score, "detected": score >= args.iou_threshold})

    n = len(rows)
    d = sum(r["detected"] for r in rows)
    rate = format_rate(d, n)
    summary = {
        "accuracy_rate": rate,
        "dataset": args.name or manifest.stem,
        "iou_threshold": args.iou_threshold,
        "n_detected": d,
        "n_tested": n,
        "results": rows,
    }
    if out_dir:
        (out_dir / "summary.json").write_text(_dumps(summary), encoding="utf-8")
    sys.stdout.write(_dumps({k: v for k, v in summary.items() if k != "results"}))
    print(f"{'dataset':<20}{'tested':>8}{'detected':>10}{'accuracy':>11}")
    print(f"{summary['dataset']:<20}{n:>8}{d:>10}{rate + ' %':>11}")
    return EXIT_OK


# --------------------------------------------------------------------------

def _add_detector_args(p):
    p.add_argument("--max-tilt-exponent", type=int, default=5,
                   help="tilts 2^(k/2) for k = 0..N (default 5)")
    p.add_argument("--phi-step", type=float, default=72.0,
                   help="longitude step numerator in degrees; step = value / t (default 72)")
    p.add_argument("--ratio", type=float, default=0.8, help="nearest-neighbour ratio threshold")


def _add_merge_args(p):
    p.add_argument("--fast", action="store_true", help="plain SIFT on the test image")
    p.add_argument("--metric", choices=[m.value for m in Metric], default="euclidean")
    p.add_argument("--min-seeds", type=int, default=1, help="matched points needed to seed a region")
    p.add_argument("--iou-threshold", type=float, default=0.9, help="IoU counted as full detection")
    p.add_argument("--spatial-bandwidth", type=float, default=8.0)
    p.add_argument("--range-bandwidth", type=float, default=6.0)
    p.add_argument("--min-region-px", type=int, default=20)
    p.add_argument("--filtered-histograms", action="store_true",
                   help="build region histograms from mean-shift filtered colors")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="asiftmerge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="build an object model from training images")
    p.add_argument("--model", required=True, help="model name stored in the file")
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument("--consensus", action="store_true",
                   help="keep only descriptors matched in another training image")
    _add_detector_args(p)
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="detect the modelled object in one image")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--truth", help="ground-truth mask; adds IoU to the report")
    p.add_argument("--timings", action="store_true", help="add per-stage timings to the report")
    _add_detector_args(p)
    _add_merge_args(p)
    p.add_argument("image")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="detection rate over a manifest of test images")
    p.add_argument("--model", help="model file (optional if every entry has a prediction)")
    p.add_argument("--manifest", required=True,
                   help="JSON array of {image, truth_mask[, prediction]}")
    p.add_argument("--name", help="dataset name (default: manifest file stem)")
    p.add_argument("--out-dir", help="write predicted masks and summary.json here")
    _add_detector_args(p)
    _add_merge_args(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        for name in ("ratio",):
            if not 0 < getattr(args, name) < 1:
                raise UsageError(f"--{name} must lie in (0, 1)")
        if getattr(args, "min_seeds", 1) < 1:
            raise UsageError("--min-seeds must be positive")
        return args.func(args)
    except UsageError as exc:
        print(f"asiftmerge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvariantError as exc:
        print(f"asiftmerge: internal error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (AsiftError, OSError) as exc:
        print(f"asiftmerge: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"asiftmerge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
