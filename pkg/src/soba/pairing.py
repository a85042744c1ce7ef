"""Turn raw detections into paired shadow-object associations.

A detection carries its own (main) mask plus, optionally, a mask of its
partner predicted by the associated branch. Pairing strategies:

* ``associated_mask`` (default): each detection's associated mask votes by
  IoU for the opposite-category detection whose main mask it overlaps most.
* ``offset_pairing``: the partner is the opposite-category detection whose
  center lies nearest to the location reached by following the detection's
  offset vector (flipped by the class vector).
* ``main_plus_associated``: no cross-matching; a detection's own mask and
  its associated mask form the pair directly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .masks import (
    BitMask,
    SoftMask,
    decode_rle,
    encode_rle,
    mask_iou,
    mask_union,
    rle_from_json,
    rle_to_json,
)

STRATEGIES = ("associated_mask", "offset_pairing", "main_plus_associated")

BINARIZE_THRESHOLD = 0.5
DEFAULT_SCORE_THRESHOLD = 0.3
DEFAULT_NMS_THRESHOLD = 0.5
# offset pairing accepts a partner within this fraction of the longer image side
DEFAULT_OFFSET_RADIUS_FRACTION = 0.1


def class_vector(category: str) -> int:
    """+1 for a shadow (looks toward its object), -1 for an object."""
    if category == "shadow":
        return 1
    if category == "object":
        return -1
    raise DataError(f"unknown category {category!r}")


@dataclass(frozen=True)
class RawDetection:
    """A model-exported candidate instance."""

    id: int
    image_id: int
    category: str
    center: tuple[float, float]
    offset: tuple[float, float]
    score: float
    main_mask: SoftMask
    associated_mask: SoftMask | None = None

    def __post_init__(self):
        if self.category not in ("shadow", "object"):
            raise DataError(f"detection {self.id}: unknown category {self.category!r}")
        h, w = self.main_mask.shape
        x, y = self.center
        if not (0 <= x <= w and 0 <= y <= h):
            raise DataError(f"detection {self.id}: center {self.center} is outside the {w}x{h} image")
        if self.associated_mask is not None and self.associated_mask.shape != self.main_mask.shape:
            raise DataError(f"detection {self.id}: associated mask shape differs from main mask")


@dataclass(frozen=True)
class PairedAssociation:
    """One output pair. Detection ids are None for sides that were not
    produced by cross-matching (main_plus_associated)."""

    shadow_id: int | None
    object_id: int | None
    score: float
    shadow_mask: BitMask
    object_mask: BitMask
    association_mask: BitMask


@dataclass
class PairingResult:
    pairs: list[PairedAssociation] = field(default_factory=list)
    unpaired: list[RawDetection] = field(default_factory=list)


def associated_location(center, offset, class_value: int):
    """Partner location reached by following the offset in class direction."""
    return (center[0] + offset[0] * class_value, center[1] + offset[1] * class_value)


def relative_coordinate_map(center, width: int, height: int) -> np.ndarray:
    """Two-channel grid of pixel coordinates relative to ``center``.

    Channel 0 is (x - cx) / norm, channel 1 is (y - cy) / norm with
    norm = max(width - 1, height - 1, 1), so the farthest axis-aligned pixel
    from a corner center maps to magnitude 1.
    """
    if width < 1 or height < 1:
        raise DataError(f"grid dimensions must be positive, got {width}x{height}")
    norm = max(width - 1, height - 1, 1)
    cx, cy = center
    xs = (np.arange(width, dtype=np.float64) - cx) / norm
    ys = (np.arange(height, dtype=np.float64) - cy) / norm
    return np.stack([np.tile(xs, (height, 1)), np.tile(ys[:, None], (1, width))])


def mask_nms(dets, iou_threshold: float = DEFAULT_NMS_THRESHOLD):
    """Per-category greedy suppression by binarized main-mask IoU.

    A detection dies when its mask overlaps a higher-scored survivor of the
    same category with IoU >= the threshold. Ties in score break by
    ascending id, so the result is independent of input order.
    """
    survivors = []
    for category in ("shadow", "object"):
        group = sorted(
            (d for d in dets if d.category == category), key=lambda d: (-d.score, d.id)
        )
        kept: list[tuple[RawDetection, BitMask]] = []
        for det in group:
            mask = det.main_mask.binarize(BINARIZE_THRESHOLD)
            if all(mask_iou(mask, km) < iou_threshold for _, km in kept):
                kept.append((det, mask))
        survivors.extend(d for d, _ in kept)
    return sorted(survivors, key=lambda d: d.id)


def combined_score(shadow_score: float, object_score: float) -> float:
    """Geometric mean of the two component confidences."""
    if not (0.0 <= shadow_score <= 1.0 and 0.0 <= object_score <= 1.0):
        raise DataError("combined_score expects scores in [0, 1]")
    return math.sqrt(shadow_score * object_score)


def _ordered(det_a: RawDetection, det_b: RawDetection):
    """(shadow, object) ordering of a cross-category pair."""
    if det_a.category == det_b.category:
        raise DataError("cannot pair two detections of the same category")
    return (det_a, det_b) if det_a.category == "shadow" else (det_b, det_a)


def _build_pair(shadow_det, object_det, masks):
    shadow_mask = masks[shadow_det.id]
    object_mask = masks[object_det.id]
    return PairedAssociation(
        shadow_id=shadow_det.id,
        object_id=object_det.id,
        score=combined_score(shadow_det.score, object_det.score),
        shadow_mask=shadow_mask,
        object_mask=object_mask,
        association_mask=mask_union(shadow_mask, object_mask),
    )


def _dedup(pairs_with_keys):
    best = {}
    for key, pair in pairs_with_keys:
        if key not in best or pair.score > best[key].score:
            best[key] = pair
    return [best[k] for k in sorted(best)]


def _pair_by_associated_mask(dets, masks) -> PairingResult:
    assoc_bins = {
        d.id: d.associated_mask.binarize(BINARIZE_THRESHOLD)
        for d in dets
        if d.associated_mask is not None
    }
    proposals = []
    paired_ids = set()
    for det in dets:
        if det.id not in assoc_bins:
            continue
        partner, best_iou = None, 0.0
        for other in dets:
            if other.category == det.category:
                continue
            iou = mask_iou(assoc_bins[det.id], masks[other.id])
            if iou > best_iou:
                partner, best_iou = other, iou
        if partner is None:
            continue
        shadow_det, object_det = _ordered(det, partner)
        proposals.append(((shadow_det.id, object_det.id), _build_pair(shadow_det, object_det, masks)))
        paired_ids.update((det.id, partner.id))
    pairs = _dedup(proposals)
    unpaired = [d for d in dets if d.id not in paired_ids]
    return PairingResult(pairs=pairs, unpaired=unpaired)


def _pair_by_offset(dets, masks, radius_fraction) -> PairingResult:
    h, w = dets[0].main_mask.shape
    radius = radius_fraction * max(w, h)
    proposals = []
    paired_ids = set()
    for det in dets:
        target = associated_location(det.center, det.offset, class_vector(det.category))
        partner, best_dist = None, math.inf
        for other in dets:
            if other.category == det.category:
                continue
            dist = math.hypot(other.center[0] - target[0], other.center[1] - target[1])
            if dist < best_dist:
                partner, best_dist = other, dist
        if partner is None or best_dist > radius:
            continue
        shadow_det, object_det = _ordered(det, partner)
        proposals.append(((shadow_det.id, object_det.id), _build_pair(shadow_det, object_det, masks)))
        paired_ids.update((det.id, partner.id))
    pairs = _dedup(proposals)
    unpaired = [d for d in dets if d.id not in paired_ids]
    return PairingResult(pairs=pairs, unpaired=unpaired)


def _pair_main_plus_associated(dets, masks) -> PairingResult:
    proposals = []
    paired_ids = set()
    for det in dets:
        if det.associated_mask is None:
            continue
        partner_mask = det.associated_mask.binarize(BINARIZE_THRESHOLD)
        if partner_mask.is_empty():
            continue
        own_mask = masks[det.id]
        if det.category == "shadow":
            shadow_id, object_id = det.id, None
            shadow_mask, object_mask = own_mask, partner_mask
        else:
            shadow_id, object_id = None, det.id
            shadow_mask, object_mask = partner_mask, own_mask
        pair = PairedAssociation(
            shadow_id=shadow_id,
            object_id=object_id,
            score=det.score,
            shadow_mask=shadow_mask,
            object_mask=object_mask,
            association_mask=mask_union(shadow_mask, object_mask),
        )
        # both directions of a perfect prediction emit the same pixel pair;
        # collapse exact duplicates, keeping the higher score
        key = (encode_rle(shadow_mask).counts, encode_rle(object_mask).counts)
        proposals.append((key, pair))
        paired_ids.add(det.id)
    pairs = _dedup(proposals)
    unpaired = [d for d in dets if d.id not in paired_ids]
    return PairingResult(pairs=pairs, unpaired=unpaired)


def pair_detections(
    dets,
    strategy: str = "associated_mask",
    *,
    offset_radius_fraction: float = DEFAULT_OFFSET_RADIUS_FRACTION,
) -> PairingResult:
    """Pair one image's detections. Input should already be score-filtered
    and NMS-refined; see :func:`run_pairing` for the full pipeline."""
    if strategy not in STRATEGIES:
        raise DataError(f"unknown pairing strategy {strategy!r}; expected one of {STRATEGIES}")
    dets = sorted(dets, key=lambda d: d.id)
    if len({d.id for d in dets}) != len(dets):
        raise DataError("detection ids must be unique within an image")
    if not dets:
        return PairingResult()
    masks = {d.id: d.main_mask.binarize(BINARIZE_THRESHOLD) for d in dets}
    if strategy == "associated_mask":
        return _pair_by_associated_mask(dets, masks)
    if strategy == "offset_pairing":
        return _pair_by_offset(dets, masks, offset_radius_fraction)
    return _pair_main_plus_associated(dets, masks)


def run_pairing(
    dets,
    strategy: str = "associated_mask",
    *,
    score_threshold: float = DEFAULT_SCORE_THRESHOLD,
    nms_threshold: float = DEFAULT_NMS_THRESHOLD,
    offset_radius_fraction: float = DEFAULT_OFFSET_RADIUS_FRACTION,
) -> dict[int, PairingResult]:
    """Score-filter, suppress, and pair detections, grouped per image.

    Detections whose binarized main mask is empty carry no usable instance
    and are dropped up front.
    """
    by_image: dict[int, list[RawDetection]] = {}
    for det in dets:
        if det.score >= score_threshold and not det.main_mask.binarize(BINARIZE_THRESHOLD).is_empty():
            by_image.setdefault(det.image_id, []).append(det)
    results = {}
    for image_id in sorted(by_image):
        refined = mask_nms(by_image[image_id], nms_threshold)
        results[image_id] = pair_detections(
            refined, strategy, offset_radius_fraction=offset_radius_fraction
        )
    return results


def pairing_to_predictions(results: dict[int, PairingResult]):
    """Flatten per-image pairing results into evaluator inputs.

    Returns (prediction triples, lone instance predictions); unpaired
    detections feed Instance AP only.
    """
    from .evaluation import InstancePrediction, PredictionTriple
    from .masks import mask_to_box

    triples, lone = [], []
    next_triple, next_lone = 1, 1
    for image_id in sorted(results):
        res = results[image_id]
        for pair in res.pairs:
            triples.append(
                PredictionTriple.from_masks(
                    next_triple,
                    image_id,
                    pair.shadow_mask,
                    pair.object_mask,
                    pair.score,
                    association_mask=pair.association_mask,
                )
            )
            next_triple += 1
        for det in res.unpaired:
            mask = det.main_mask.binarize(BINARIZE_THRESHOLD)
            if mask.is_empty():
                continue
            lone.append(
                InstancePrediction(
                    id=next_lone,
                    image_id=image_id,
                    category=det.category,
                    mask=mask,
                    box=mask_to_box(mask),
                    score=det.score,
                )
            )
            next_lone += 1
    return triples, lone


# --- detection bundle file --------------------------------------------------

def write_detection_bundle(path, dets) -> None:
    doc = {
        "schema_version": 1,
        "detections": [
            {
                "id": d.id,
                "image_id": d.image_id,
                "category": d.category,
                "center": list(d.center),
                "offset": list(d.offset),
                "score": d.score,
                "main_mask": rle_to_json(encode_rle(d.main_mask.binarize(BINARIZE_THRESHOLD))),
                "associated_mask": (
                    None
                    if d.associated_mask is None
                    else rle_to_json(encode_rle(d.associated_mask.binarize(BINARIZE_THRESHOLD)))
                ),
            }
            for d in sorted(dets, key=lambda d: (d.image_id, d.id))
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_detection_bundle(path) -> list[RawDetection]:
    """Read a detection bundle; masks arrive binarized (0/1 soft masks)."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"detection bundle not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON: {exc}") from exc
    if doc.get("schema_version") != 1:
        raise DataError(f"{path}: unsupported bundle schema_version {doc.get('schema_version')!r}")
    dets = []
    seen = set()
    for k, obj in enumerate(doc.get("detections", [])):
        what = f"detection {obj.get('id', k)}"
        try:
            main = SoftMask.from_bitmask(decode_rle(rle_from_json(obj["main_mask"], what=what)))
            associated = None
            if obj.get("associated_mask") is not None:
                associated = SoftMask.from_bitmask(
                    decode_rle(rle_from_json(obj["associated_mask"], what=what))
                )
            det = RawDetection(
                id=int(obj["id"]),
                image_id=int(obj["image_id"]),
                category=str(obj["category"]),
                center=tuple(float(v) for v in obj["center"]),
                offset=tuple(float(v) for v in obj["offset"]),
                score=float(obj["score"]),
                main_mask=main,
                associated_mask=associated,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{what}: {exc}") from exc
        key = (det.image_id, det.id)
        if key in seen:
            raise DataError(f"{what}: duplicate id on image {det.image_id}")
        seen.add(key)
        dets.append(det)
    return dets
