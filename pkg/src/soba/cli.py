"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 internal
failure. Every report is JSON with sorted keys and metrics rounded to four
decimals, written atomically (temp file + rename); rerunning a command with
identical inputs, flags, and seed reproduces the bytes exactly.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
import traceback

import numpy as np

from . import augment as augment_mod
from . import dataset as dataset_mod
from . import evaluation as eval_mod
from . import pairing as pairing_mod
from .applications import (
    Placement,
    estimate_light,
    remove_association,
    transfer_object,
)
from .augment import AugmentConfig, Scene, augment_dataset
from .errors import DataError
from .losses import run_self_checks

DEFAULT_THREADS_ENV = "SOBA_THREADS"
METRIC_DECIMALS = 4


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; the contract here is exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _round_floats(value, ndigits=METRIC_DECIMALS):
    if isinstance(value, float):
        return round(value, ndigits)
    if isinstance(value, dict):
        return {k: _round_floats(v, ndigits) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_round_floats(v, ndigits) for v in value]
    return value


def write_json_atomic(path, payload):
    payload = _round_floats(payload)
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".soba-", suffix=".json", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _default_threads():
    raw = os.environ.get(DEFAULT_THREADS_ENV, "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _load_image(path):
    from PIL import Image

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except FileNotFoundError:
        raise DataError(f"image file not found: {path}") from None


def _save_image(path, pixels):
    from PIL import Image

    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".soba-", suffix=".png", dir=directory)
    os.close(fd)
    try:
        Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _resolve_manifest(path):
    if os.path.isdir(path):
        return os.path.join(path, "manifest.json")
    return path


def _scene_for_image(ds, image_id, manifest_path):
    if image_id not in ds.images:
        raise DataError(f"image {image_id} is not part of the dataset")
    record = ds.images[image_id]
    image_path = os.path.join(os.path.dirname(os.path.abspath(manifest_path)), record.file_name)
    return Scene(
        image=_load_image(image_path),
        instances=sorted(ds.instances_of_image(image_id), key=lambda i: i.id),
        associations=sorted(ds.associations_of_image(image_id), key=lambda a: a.id),
    )


# --- subcommands -------------------------------------------------------------

def cmd_import_soba(args):
    ds = dataset_mod.import_coco_file(
        args.annotations,
        shadow_category_id=args.shadow_category,
        object_category_id=args.object_category,
        association_category_id=args.association_category,
        association_key=args.association_key,
    )
    write_json_atomic(args.out, dataset_mod.dataset_to_manifest(ds))
    print(f"imported {len(ds.images)} images / {len(ds.associations)} pairs -> {args.out}")
    return 0


def cmd_validate(args):
    ds = dataset_mod.load_dataset(_resolve_manifest(args.data))
    report = dataset_mod.validate_dataset(ds)
    if args.out:
        write_json_atomic(args.out, report.to_json())
    for violation in report.violations:
        print(f"[{violation.kind}] {violation.message}")
    print(f"{len(report.violations)} violation(s) in {len(ds.images)} images")
    return 0 if report.ok else 2


def cmd_stats(args):
    ds = dataset_mod.load_dataset(_resolve_manifest(args.data))
    stats = dataset_mod.compute_stats(ds)
    if args.out:
        write_json_atomic(args.out, stats.to_json())
    print(
        f"{stats.image_count:,} images / {stats.pair_count:,} pairs "
        f"(mean {stats.mean_pairs_per_image:.2f} pairs per image)"
    )
    return 0


def _metric_line(name, metrics):
    def fmt(v):
        return "n/a" if v is None else f"{v:.1f}"

    return (
        f"{name}: SOAP {fmt(metrics.soap)}  SOAP50 {fmt(metrics.soap50)}  "
        f"SOAP75 {fmt(metrics.soap75)}  assoc AP {fmt(metrics.association_ap)}  "
        f"instance AP {fmt(metrics.instance_ap)}"
    )


def cmd_eval(args):
    ds = dataset_mod.load_dataset(_resolve_manifest(args.gt))
    triples, lone = eval_mod.load_prediction_file(args.pred)
    modes = ("segm", "bbox") if args.mode == "both" else (args.mode,)
    result = eval_mod.evaluate(triples, ds, modes=modes, extra_instances=lone, threads=args.threads)
    write_json_atomic(args.out, result.to_json())
    for mode in modes:
        print(_metric_line(mode, getattr(result, mode)))
    print(f"report -> {args.out}")
    return 0


def cmd_pair(args):
    dets = pairing_mod.load_detection_bundle(args.bundle)
    results = pairing_mod.run_pairing(
        dets,
        strategy=args.strategy,
        score_threshold=args.score_threshold,
        nms_threshold=args.nms_threshold,
        offset_radius_fraction=args.offset_radius,
    )
    triples, lone = pairing_mod.pairing_to_predictions(results)
    eval_mod.write_prediction_file(
        args.out,
        triples,
        lone,
        metadata={
            "strategy": args.strategy,
            "score_threshold": args.score_threshold,
            "nms_threshold": args.nms_threshold,
            "binarization_threshold": pairing_mod.BINARIZE_THRESHOLD,
        },
    )
    print(f"{len(triples)} pairs, {len(lone)} lone instances -> {args.out}")
    return 0


def cmd_augment(args):
    manifest = _resolve_manifest(args.input)
    ds = dataset_mod.load_dataset(manifest)
    root = os.path.dirname(os.path.abspath(manifest))
    config = AugmentConfig(strategy=args.strategy, seed=args.seed, prob=args.prob)

    def provider(image_id):
        return _load_image(os.path.join(root, ds.images[image_id].file_name))

    out_ds, images = augment_dataset(ds, config, provider, threads=args.threads)
    os.makedirs(args.out, exist_ok=True)
    write_json_atomic(os.path.join(args.out, "manifest.json"), dataset_mod.dataset_to_manifest(out_ds))
    for image_id, pixels in sorted(images.items()):
        _save_image(os.path.join(args.out, out_ds.images[image_id].file_name), pixels)
    added = len(out_ds.associations) - len(ds.associations)
    print(f"augmented {len(ds.images)} images (+{added} pasted pairs) -> {args.out}")
    return 0


def cmd_loss_check(args):
    results = run_self_checks(seed=args.seed)
    width = max(len(name) for name, _, _ in results)
    failures = 0
    for name, ok, detail in results:
        status = "PASS" if ok else "FAIL"
        suffix = f"  ({detail})" if detail else ""
        print(f"{status}  {name:<{width}}{suffix}")
        failures += not ok
    if args.out:
        write_json_atomic(
            args.out,
            {"checks": [{"name": n, "passed": p, "detail": d} for n, p, d in results]},
        )
    if failures:
        print(f"{failures} check(s) failed")
        return 3
    print(f"all {len(results)} checks passed")
    return 0


def cmd_light(args):
    triples, _ = eval_mod.load_prediction_file(args.pred)
    by_image = {}
    for t in triples:
        by_image.setdefault(t.image_id, []).append(t)
    image_ids = [args.image_id] if args.image_id is not None else sorted(by_image)
    report = {"images": []}
    for image_id in image_ids:
        if image_id not in by_image:
            raise DataError(f"no pairs for image {image_id} in {args.pred}")
        entries = []
        directions = []
        excluded = []
        for t in sorted(by_image[image_id], key=lambda t: t.id):
            try:
                light = estimate_light(t.shadow_box, t.object_box)
            except DataError:
                excluded.append(t.id)
                continue
            directions.append(light)
            entries.append(
                {
                    "pair_id": t.id,
                    "vector": list(light.vector),
                    "angle_degrees": light.angle_degrees,
                }
            )
        image_report = {"image_id": image_id, "pairs": entries, "excluded_pair_ids": excluded}
        if directions:
            from .applications import aggregate_light

            agg = aggregate_light(directions)
            image_report["aggregate"] = {
                "vector": list(agg.vector),
                "angle_degrees": agg.angle_degrees,
                "circular_std_degrees": agg.circular_std_degrees,
                "count": agg.count,
            }
            print(
                f"image {image_id}: light azimuth {agg.angle_degrees:.1f} deg "
                f"(std {agg.circular_std_degrees:.1f}, n={agg.count})"
            )
        else:
            image_report["aggregate"] = None
            print(f"image {image_id}: no usable pairs")
        report["images"].append(image_report)
    if args.out:
        write_json_atomic(args.out, report)
    return 0


def cmd_edit_remove(args):
    manifest = _resolve_manifest(args.data)
    ds = dataset_mod.load_dataset(manifest)
    assoc_ids = args.assoc
    for assoc_id in assoc_ids:
        if assoc_id not in ds.associations:
            raise DataError(f"association {assoc_id} is not in the dataset")
    image_ids = {ds.associations[a].image_id for a in assoc_ids}
    if len(image_ids) != 1:
        raise DataError("all removed associations must live on the same image")
    scene = _scene_for_image(ds, image_ids.pop(), manifest)
    image, mask = remove_association(
        scene, assoc_ids, dilation=args.dilate, inpaint_command=args.inpaint_cmd
    )
    _save_image(args.out, image)
    if args.mask_out:
        _save_image(args.mask_out, mask.pixels.astype(np.uint8) * 255)
    print(f"removed {len(assoc_ids)} association(s) -> {args.out}")
    return 0


def cmd_edit_transfer(args):
    src_manifest = _resolve_manifest(args.src)
    src_ds = dataset_mod.load_dataset(src_manifest)
    if args.src_assoc not in src_ds.associations:
        raise DataError(f"association {args.src_assoc} is not in the source dataset")
    src_scene = _scene_for_image(src_ds, src_ds.associations[args.src_assoc].image_id, src_manifest)

    dst_manifest = _resolve_manifest(args.dst)
    dst_ds = dataset_mod.load_dataset(dst_manifest)
    dst_scene = _scene_for_image(dst_ds, args.dst_image, dst_manifest)

    try:
        x_str, y_str = args.at.split(",")
        placement = Placement(x=float(x_str), y=float(y_str), scale=args.scale)
    except ValueError:
        raise DataError(f"--at must be 'x,y', got {args.at!r}") from None

    result = transfer_object(src_scene, args.src_assoc, dst_scene, placement)
    _save_image(args.out, result.image)
    print(
        f"transferred association {args.src_assoc} (shadow rotated "
        f"{result.rotation_degrees:.1f} deg) -> {args.out}"
    )
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="soba", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("import-soba", parents=[], help="convert COCO-structured annotations to a manifest")
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--shadow-category", type=int, default=1)
    p.add_argument("--object-category", type=int, default=2)
    p.add_argument("--association-category", type=int, default=3)
    p.add_argument("--association-key", default="association_id")
    p.set_defaults(func=cmd_import_soba)

    p = sub.add_parser("validate", help="check a manifest; exit 2 on violations")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("stats", help="dataset statistics")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("eval", help="evaluate predicted pairs against ground truth")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--mode", choices=["segm", "bbox", "both"], default="both")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=_default_threads())
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pair", help="pair raw detections into associations")
    p.add_argument("--bundle", required=True)
    p.add_argument("--strategy", choices=list(pairing_mod.STRATEGIES), default="associated_mask")
    p.add_argument("--out", required=True)
    p.add_argument("--score-threshold", type=float, default=pairing_mod.DEFAULT_SCORE_THRESHOLD)
    p.add_argument("--nms-threshold", type=float, default=pairing_mod.DEFAULT_NMS_THRESHOLD)
    p.add_argument("--offset-radius", type=float, default=pairing_mod.DEFAULT_OFFSET_RADIUS_FRACTION)
    p.set_defaults(func=cmd_pair)

    p = sub.add_parser("augment", help="shadow-aware copy-and-paste augmentation")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strategy", choices=list(augment_mod.STRATEGIES), default="full")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prob", type=float, default=0.5)
    p.add_argument("--threads", type=int, default=_default_threads())
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("loss-check", help="run the loss kernels' self-check table")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_loss_check)

    p = sub.add_parser("light", help="estimate 2D light direction from paired output")
    p.add_argument("--pred", required=True)
    p.add_argument("--image-id", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_light)

    p = sub.add_parser("edit", help="shadow-aware photo editing")
    edit_sub = p.add_subparsers(dest="edit_command", required=True)

    pr = edit_sub.add_parser("remove", help="emit an inpainted image without an association")
    pr.add_argument("--data", required=True)
    pr.add_argument("--assoc", type=int, action="append", required=True)
    pr.add_argument("--dilate", type=int, default=0)
    pr.add_argument("--inpaint-cmd", help="external tool template with {image} {mask} {output}")
    pr.add_argument("--out", required=True)
    pr.add_argument("--mask-out")
    pr.set_defaults(func=cmd_edit_remove)

    pt = edit_sub.add_parser("transfer", help="move an object with its shadow between photos")
    pt.add_argument("--src", required=True)
    pt.add_argument("--src-assoc", type=int, required=True)
    pt.add_argument("--dst", required=True)
    pt.add_argument("--dst-image", type=int, required=True)
    pt.add_argument("--scale", type=float, default=1.0)
    pt.add_argument("--at", required=True, help="destination anchor as 'x,y'")
    pt.add_argument("--out", required=True)
    pt.set_defaults(func=cmd_edit_transfer)

    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except DataError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    except Exception:
        traceback.print_exc()
        return 3


def main():
    sys.exit(run())
