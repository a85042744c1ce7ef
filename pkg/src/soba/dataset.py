"""Dataset manifests: loading, validation, derivation, and statistics.

A dataset is a single JSON manifest listing images, shadow/object instance
annotations, and shadow-object association records; masks travel as
column-major RLE. See docs/formats.md for the field-by-field contract.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .masks import (
    BitMask,
    Box,
    RleMask,
    decode_rle,
    encode_rle,
    mask_difference,
    mask_to_box,
    rle_from_json,
    rle_to_json,
)

SCHEMA_VERSION = 1
CATEGORIES = ("shadow", "object")

# Hand-annotated masks are not set-exact; object == association \ shadow is
# enforced only up to this fraction of the association area.
DERIVATION_TOLERANCE = 0.01

AREA_HISTOGRAM_BINS = 20


@dataclass(frozen=True)
class ImageRecord:
    id: int
    file_name: str
    width: int
    height: int


@dataclass(frozen=True)
class InstanceAnnotation:
    """One shadow or object instance. ``association_id`` is None only for
    deliberately lone objects (e.g. object-only augmentation output)."""

    id: int
    image_id: int
    category: str
    mask: RleMask
    box: Box
    association_id: int | None
    score: float | None = None


@dataclass(frozen=True)
class AssociationRecord:
    """A shadow-object pair and its combined mask."""

    id: int
    image_id: int
    shadow_id: int
    object_id: int
    mask: RleMask
    box: Box
    score: float | None = None


@dataclass
class Dataset:
    images: dict[int, ImageRecord] = field(default_factory=dict)
    instances: dict[int, InstanceAnnotation] = field(default_factory=dict)
    associations: dict[int, AssociationRecord] = field(default_factory=dict)

    def instances_of_image(self, image_id: int) -> list[InstanceAnnotation]:
        return [i for i in self.instances.values() if i.image_id == image_id]

    def associations_of_image(self, image_id: int) -> list[AssociationRecord]:
        return [a for a in self.associations.values() if a.image_id == image_id]

    def shadow_of(self, assoc: AssociationRecord) -> InstanceAnnotation:
        return self.instances[assoc.shadow_id]

    def object_of(self, assoc: AssociationRecord) -> InstanceAnnotation:
        return self.instances[assoc.object_id]


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str
    image_id: int | None = None
    record_id: int | None = None

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "message": self.message,
            "image_id": self.image_id,
            "record_id": self.record_id,
        }


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def of_kind(self, kind: str) -> list[Violation]:
        return [v for v in self.violations if v.kind == kind]

    def to_json(self) -> dict:
        return {
            "ok": self.ok,
            "violation_count": len(self.violations),
            "violations": [v.to_json() for v in self.violations],
        }


@dataclass
class DatasetStats:
    image_count: int
    pair_count: int
    mean_pairs_per_image: float
    pairs_per_image: dict[int, int]
    shadow_area_histogram: list[int]
    object_area_histogram: list[int]

    def to_json(self) -> dict:
        return {
            "image_count": self.image_count,
            "pair_count": self.pair_count,
            "mean_pairs_per_image": self.mean_pairs_per_image,
            "pairs_per_image": {str(k): v for k, v in sorted(self.pairs_per_image.items())},
            "area_histogram_bins": AREA_HISTOGRAM_BINS,
            "shadow_area_histogram": self.shadow_area_histogram,
            "object_area_histogram": self.object_area_histogram,
        }


def _require(condition, message):
    if not condition:
        raise DataError(message)


def _int_field(obj, key, what):
    try:
        return int(obj[key])
    except (KeyError, TypeError, ValueError):
        raise DataError(f"{what}: missing or non-integer field '{key}'") from None


def _parse_image(obj) -> ImageRecord:
    what = f"image {obj.get('id', '?')}"
    rec = ImageRecord(
        id=_int_field(obj, "id", what),
        file_name=str(obj.get("file_name", "")),
        width=_int_field(obj, "width", what),
        height=_int_field(obj, "height", what),
    )
    _require(rec.width > 0 and rec.height > 0, f"{what}: dimensions must be positive")
    return rec


def _parse_box(obj, what) -> Box:
    raw = obj.get("bbox")
    _require(isinstance(raw, (list, tuple)) and len(raw) == 4, f"{what}: bbox must be [x, y, w, h]")
    try:
        return Box(*(int(v) for v in raw))
    except DataError as exc:
        raise DataError(f"{what}: {exc}") from exc


def _parse_score(obj, what) -> float | None:
    raw = obj.get("score")
    if raw is None:
        return None
    score = float(raw)
    _require(np.isfinite(score), f"{what}: score must be finite")
    return score


def _parse_instance(obj) -> InstanceAnnotation:
    what = f"instance {obj.get('id', '?')}"
    category = obj.get("category")
    _require(category in CATEGORIES, f"{what}: category must be one of {CATEGORIES}")
    assoc_raw = obj.get("association_id")
    return InstanceAnnotation(
        id=_int_field(obj, "id", what),
        image_id=_int_field(obj, "image_id", what),
        category=category,
        mask=rle_from_json(obj.get("segmentation"), what=what),
        box=_parse_box(obj, what),
        association_id=None if assoc_raw is None else int(assoc_raw),
        score=_parse_score(obj, what),
    )


def _parse_association(obj) -> AssociationRecord:
    what = f"association {obj.get('id', '?')}"
    return AssociationRecord(
        id=_int_field(obj, "id", what),
        image_id=_int_field(obj, "image_id", what),
        shadow_id=_int_field(obj, "shadow_id", what),
        object_id=_int_field(obj, "object_id", what),
        mask=rle_from_json(obj.get("segmentation"), what=what),
        box=_parse_box(obj, what),
        score=_parse_score(obj, what),
    )


def dataset_from_manifest(doc: dict) -> Dataset:
    """Build a cross-referenced dataset from a parsed manifest document."""
    version = doc.get("schema_version")
    _require(version == SCHEMA_VERSION, f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")

    ds = Dataset()
    for obj in doc.get("images", []):
        rec = _parse_image(obj)
        _require(rec.id not in ds.images, f"image {rec.id}: duplicate id")
        ds.images[rec.id] = rec
    for obj in doc.get("instances", []):
        rec = _parse_instance(obj)
        _require(rec.id not in ds.instances, f"instance {rec.id}: duplicate id")
        _require(rec.image_id in ds.images, f"instance {rec.id}: dangling image_id {rec.image_id}")
        img = ds.images[rec.image_id]
        _require(
            (rec.mask.width, rec.mask.height) == (img.width, img.height),
            f"instance {rec.id}: mask is {rec.mask.width}x{rec.mask.height}, "
            f"image {img.id} is {img.width}x{img.height}",
        )
        ds.instances[rec.id] = rec
    for obj in doc.get("associations", []):
        rec = _parse_association(obj)
        _require(rec.id not in ds.associations, f"association {rec.id}: duplicate id")
        _require(rec.image_id in ds.images, f"association {rec.id}: dangling image_id {rec.image_id}")
        img = ds.images[rec.image_id]
        _require(
            (rec.mask.width, rec.mask.height) == (img.width, img.height),
            f"association {rec.id}: mask dimensions disagree with image {img.id}",
        )
        for side, inst_id in (("shadow", rec.shadow_id), ("object", rec.object_id)):
            _require(
                inst_id in ds.instances,
                f"association {rec.id}: dangling {side}_id {inst_id}",
            )
            inst = ds.instances[inst_id]
            _require(
                inst.category == side,
                f"association {rec.id}: {side}_id {inst_id} refers to a {inst.category} instance",
            )
            _require(
                inst.image_id == rec.image_id,
                f"association {rec.id}: {side}_id {inst_id} lives on image {inst.image_id}, "
                f"association on image {rec.image_id}",
            )
            _require(
                inst.association_id == rec.id,
                f"association {rec.id}: {side} instance {inst_id} back-references "
                f"association {inst.association_id}",
            )
        ds.associations[rec.id] = rec
    # every instance that claims an association must be claimed back
    for inst in ds.instances.values():
        if inst.association_id is None:
            continue
        _require(
            inst.association_id in ds.associations,
            f"instance {inst.id}: dangling association_id {inst.association_id}",
        )
        assoc = ds.associations[inst.association_id]
        claimed = assoc.shadow_id if inst.category == "shadow" else assoc.object_id
        _require(
            claimed == inst.id,
            f"instance {inst.id}: association {assoc.id} pairs {claimed} as its {inst.category}",
        )
    return ds


def load_dataset(path) -> Dataset:
    """Load and cross-reference a manifest file; structural errors name the record."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"dataset manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON: {exc}") from exc
    return dataset_from_manifest(doc)


def dataset_to_manifest(ds: Dataset) -> dict:
    def inst_json(inst: InstanceAnnotation) -> dict:
        out = {
            "id": inst.id,
            "image_id": inst.image_id,
            "category": inst.category,
            "segmentation": rle_to_json(inst.mask),
            "bbox": inst.box.as_list(),
            "association_id": inst.association_id,
        }
        if inst.score is not None:
            out["score"] = inst.score
        return out

    def assoc_json(assoc: AssociationRecord) -> dict:
        out = {
            "id": assoc.id,
            "image_id": assoc.image_id,
            "shadow_id": assoc.shadow_id,
            "object_id": assoc.object_id,
            "segmentation": rle_to_json(assoc.mask),
            "bbox": assoc.box.as_list(),
        }
        if assoc.score is not None:
            out["score"] = assoc.score
        return out

    return {
        "schema_version": SCHEMA_VERSION,
        "images": [
            {"id": im.id, "file_name": im.file_name, "width": im.width, "height": im.height}
            for im in sorted(ds.images.values(), key=lambda im: im.id)
        ],
        "instances": [inst_json(i) for i in sorted(ds.instances.values(), key=lambda i: i.id)],
        "associations": [assoc_json(a) for a in sorted(ds.associations.values(), key=lambda a: a.id)],
    }


def save_dataset(ds: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(dataset_to_manifest(ds), fh, indent=2, sort_keys=True)
        fh.write("\n")


def derive_object_mask(assoc: AssociationRecord, shadow: InstanceAnnotation) -> BitMask:
    """Object mask = association mask minus the paired shadow mask."""
    if shadow.image_id != assoc.image_id:
        raise DataError(
            f"shadow {shadow.id} (image {shadow.image_id}) does not belong to "
            f"association {assoc.id} (image {assoc.image_id})"
        )
    if shadow.association_id != assoc.id:
        raise DataError(f"shadow {shadow.id} is not paired with association {assoc.id}")
    return mask_difference(decode_rle(assoc.mask), decode_rle(shadow.mask))


def validate_dataset(ds: Dataset) -> ValidationReport:
    """Report (never raise) semantic violations in a structurally sound dataset.

    Checked: empty masks, stored box vs mask bounds, shadows without a
    partner, and object != association \\ shadow beyond the 1% tolerance.
    Lone objects (association_id null) are legal.
    """
    report = ValidationReport()

    def flag(kind, message, image_id=None, record_id=None):
        report.violations.append(Violation(kind, message, image_id=image_id, record_id=record_id))

    for inst in ds.instances.values():
        if inst.mask.area() == 0:
            flag("empty-mask", f"instance {inst.id} has an empty mask", inst.image_id, inst.id)
            continue
        stored_box = mask_to_box(decode_rle(inst.mask))
        if stored_box != inst.box:
            flag(
                "box-mismatch",
                f"instance {inst.id}: bbox {inst.box.as_list()} != mask bounds {stored_box.as_list()}",
                inst.image_id,
                inst.id,
            )
        if inst.category == "shadow" and inst.association_id is None:
            flag(
                "unpaired-instance",
                f"shadow instance {inst.id} has no object partner",
                inst.image_id,
                inst.id,
            )

    for assoc in ds.associations.values():
        if assoc.mask.area() == 0:
            flag("empty-mask", f"association {assoc.id} has an empty mask", assoc.image_id, assoc.id)
            continue
        assoc_mask = decode_rle(assoc.mask)
        stored_box = mask_to_box(assoc_mask)
        if stored_box != assoc.box:
            flag(
                "box-mismatch",
                f"association {assoc.id}: bbox {assoc.box.as_list()} != mask bounds {stored_box.as_list()}",
                assoc.image_id,
                assoc.id,
            )
        shadow = ds.shadow_of(assoc)
        obj = ds.object_of(assoc)
        derived = mask_difference(assoc_mask, decode_rle(shadow.mask))
        stored = decode_rle(obj.mask)
        sym_diff = int(np.count_nonzero(derived.pixels ^ stored.pixels))
        if sym_diff > DERIVATION_TOLERANCE * assoc_mask.area():
            flag(
                "object-mask-mismatch",
                f"association {assoc.id}: object mask differs from association minus shadow "
                f"on {sym_diff} px ({sym_diff / assoc_mask.area():.1%} of association area)",
                assoc.image_id,
                assoc.id,
            )
    report.violations.sort(key=lambda v: (v.kind, v.record_id or 0))
    return report


def compute_stats(ds: Dataset) -> DatasetStats:
    """Pair counts, pairs-per-image distribution, and instance-area histograms."""
    pairs_by_image = defaultdict(int)
    for assoc in ds.associations.values():
        pairs_by_image[assoc.image_id] += 1
    histogram = defaultdict(int)
    for image_id in ds.images:
        histogram[pairs_by_image[image_id]] += 1

    area_hist = {cat: [0] * AREA_HISTOGRAM_BINS for cat in CATEGORIES}
    for inst in ds.instances.values():
        img = ds.images[inst.image_id]
        proportion = inst.mask.area() / (img.width * img.height)
        bin_idx = min(int(proportion * AREA_HISTOGRAM_BINS), AREA_HISTOGRAM_BINS - 1)
        area_hist[inst.category][bin_idx] += 1

    image_count = len(ds.images)
    pair_count = len(ds.associations)
    return DatasetStats(
        image_count=image_count,
        pair_count=pair_count,
        mean_pairs_per_image=pair_count / image_count if image_count else 0.0,
        pairs_per_image=dict(histogram),
        shadow_area_histogram=area_hist["shadow"],
        object_area_histogram=area_hist["object"],
    )


# --- importer for COCO-structured annotation releases ---------------------

def _coco_string_to_counts(s: str) -> list[int]:
    """Decode the compressed COCO RLE string (6-bit varint, delta from i-2)."""
    counts: list[int] = []
    pos = 0
    while pos < len(s):
        x = 0
        k = 0
        more = True
        while more:
            if pos >= len(s):
                raise DataError("truncated compressed RLE string")
            c = ord(s[pos]) - 48
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            pos += 1
            k += 1
            if not more and (c & 0x10):
                x |= -1 << (5 * k)
        if len(counts) > 2:
            x += counts[-2]
        counts.append(x)
    return counts


def counts_to_coco_string(counts) -> str:
    """Inverse of :func:`_coco_string_to_counts`."""
    out = []
    prev = list(counts)
    for i, c in enumerate(prev):
        x = int(c)
        if i > 2:
            x -= int(prev[i - 2])
        more = True
        while more:
            chunk = x & 0x1F
            x >>= 5
            more = (x != -1) if (chunk & 0x10) else (x != 0)
            if more:
                chunk |= 0x20
            out.append(chr(chunk + 48))
    return "".join(out)


def _coco_segmentation_to_rle(seg, width, height, what) -> RleMask:
    if isinstance(seg, dict):
        counts = seg.get("counts")
        size = seg.get("size", [height, width])
        h, w = int(size[0]), int(size[1])
        if isinstance(counts, str):
            counts = _coco_string_to_counts(counts)
        if not isinstance(counts, (list, tuple)):
            raise DataError(f"{what}: unsupported segmentation counts type")
        return rle_from_json({"size": [h, w], "counts": list(counts)}, what=what)
    if isinstance(seg, list):
        raise DataError(f"{what}: polygon segmentation is not supported; convert to RLE first")
    raise DataError(f"{what}: unsupported segmentation type {type(seg).__name__}")


def import_coco_dataset(
    doc: dict,
    *,
    shadow_category_id: int = 1,
    object_category_id: int = 2,
    association_category_id: int | None = 3,
    association_key: str = "association_id",
) -> Dataset:
    """Convert a COCO-structured annotation document to a Dataset.

    Shadow/object annotations are grouped by the value under
    ``association_key`` (scoped per image); each group must contain exactly
    one shadow and one object. Association masks come from annotations of
    ``association_category_id`` carrying the same key, or are derived as the
    shadow/object union when absent.
    """
    ds = Dataset()
    for obj in doc.get("images", []):
        rec = _parse_image(obj)
        _require(rec.id not in ds.images, f"image {rec.id}: duplicate id")
        ds.images[rec.id] = rec

    groups: dict[tuple[int, int], dict] = defaultdict(dict)
    assoc_masks: dict[tuple[int, int], BitMask] = {}
    for obj in doc.get("annotations", []):
        what = f"annotation {obj.get('id', '?')}"
        image_id = _int_field(obj, "image_id", what)
        _require(image_id in ds.images, f"{what}: dangling image_id {image_id}")
        img = ds.images[image_id]
        cat = _int_field(obj, "category_id", what)
        if association_key not in obj or obj[association_key] is None:
            raise DataError(f"{what}: missing association link '{association_key}'")
        key = (image_id, int(obj[association_key]))
        rle = _coco_segmentation_to_rle(obj.get("segmentation"), img.width, img.height, what)
        _require(
            (rle.width, rle.height) == (img.width, img.height),
            f"{what}: mask is {rle.width}x{rle.height}, image is {img.width}x{img.height}",
        )
        if cat == shadow_category_id or cat == object_category_id:
            side = "shadow" if cat == shadow_category_id else "object"
            _require(side not in groups[key], f"{what}: duplicate {side} for association group {key[1]}")
            groups[key][side] = (obj, rle)
        elif association_category_id is not None and cat == association_category_id:
            _require(key not in assoc_masks, f"{what}: duplicate association mask for group {key[1]}")
            assoc_masks[key] = decode_rle(rle)
        else:
            raise DataError(f"{what}: unknown category_id {cat}")

    next_inst = 1
    next_assoc = 1
    for key in sorted(groups):
        image_id, _group = key
        group = groups[key]
        _require(
            set(group) == {"shadow", "object"},
            f"association group {key[1]} on image {image_id} has {sorted(group)} "
            "(needs exactly one shadow and one object)",
        )
        shadow_obj, shadow_rle = group["shadow"]
        object_obj, object_rle = group["object"]
        shadow_bits = decode_rle(shadow_rle)
        object_bits = decode_rle(object_rle)
        union = BitMask(shadow_bits.pixels | object_bits.pixels)
        assoc_bits = assoc_masks.get(key, union)
        assoc_id = next_assoc
        shadow_id, object_id = next_inst, next_inst + 1
        next_inst += 2
        next_assoc += 1
        ds.instances[shadow_id] = InstanceAnnotation(
            id=shadow_id,
            image_id=image_id,
            category="shadow",
            mask=shadow_rle,
            box=mask_to_box(shadow_bits),
            association_id=assoc_id,
            score=_parse_score(shadow_obj, f"annotation {shadow_obj.get('id')}"),
        )
        ds.instances[object_id] = InstanceAnnotation(
            id=object_id,
            image_id=image_id,
            category="object",
            mask=object_rle,
            box=mask_to_box(object_bits),
            association_id=assoc_id,
            score=_parse_score(object_obj, f"annotation {object_obj.get('id')}"),
        )
        ds.associations[assoc_id] = AssociationRecord(
            id=assoc_id,
            image_id=image_id,
            shadow_id=shadow_id,
            object_id=object_id,
            mask=encode_rle(assoc_bits),
            box=mask_to_box(assoc_bits),
        )
    return ds


def import_coco_file(path, **kwargs) -> Dataset:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"annotation file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON: {exc}") from exc
    return import_coco_dataset(doc, **kwargs)
