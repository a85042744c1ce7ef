"""Shadow-aware copy-and-paste augmentation.

A randomly chosen shadow-object association is shifted, its object pixels
copied, and its shadow synthesized by relighting the target region with the
source shadow's color statistics. Layering: the paste goes behind existing
object instances but above existing shadows and the background.

Randomness comes from a counter-based Philox generator keyed (seed,
image_id), so per-image streams are identical no matter how many workers
process the dataset.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import AssociationRecord, Dataset, InstanceAnnotation
from .errors import DataError
from .masks import (
    BitMask,
    Box,
    decode_rle,
    encode_rle,
    mask_difference,
    mask_to_box,
    mask_union,
    translate_mask,
)

STRATEGIES = ("full", "object_only", "above_layering", "multiple_associations")

SHIFT_FRACTION = 2.0 / 3.0
MIN_VISIBLE_FRACTION = 0.25
MAX_SHIFT_ATTEMPTS = 10


@dataclass
class AugmentConfig:
    strategy: str = "full"
    seed: int = 0
    prob: float = 0.5
    x_shift_fraction: float = SHIFT_FRACTION
    y_shift_fraction: float = SHIFT_FRACTION
    min_visible_fraction: float = MIN_VISIBLE_FRACTION
    max_attempts: int = MAX_SHIFT_ATTEMPTS
    multi_min: int = 2
    multi_max: int = 3

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise DataError(f"unknown augmentation strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if not 0.0 <= self.prob <= 1.0:
            raise DataError(f"probability must lie in [0, 1], got {self.prob}")


@dataclass
class Scene:
    """One image's pixels plus its annotation records."""

    image: np.ndarray
    instances: list[InstanceAnnotation]
    associations: list[AssociationRecord]

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


def per_image_rng(seed: int, image_id: int) -> np.random.Generator:
    """Philox stream keyed by (seed, image_id); serial == parallel."""
    return np.random.Generator(np.random.Philox(key=np.array([seed, image_id], dtype=np.uint64)))


def sample_shift(rng: np.random.Generator, object_box: Box) -> tuple[int, int]:
    """Integer shift: dx uniform over [-2W/3, 2W/3], dy uniform over (0, 2H/3]."""
    if object_box.w < 1 or object_box.h < 1:
        raise DataError("cannot shift a degenerate object box")
    kx = math.floor(SHIFT_FRACTION * object_box.w)
    ky = math.floor(SHIFT_FRACTION * object_box.h)
    if ky < 1:
        raise DataError(f"object of height {object_box.h} is too short for a positive downward shift")
    dx = int(rng.integers(-kx, kx + 1))
    dy = int(rng.integers(1, ky + 1))
    return dx, dy


def _sample_shift_with_fractions(rng, object_box, x_frac, y_frac):
    kx = math.floor(x_frac * object_box.w)
    ky = math.floor(y_frac * object_box.h)
    if ky < 1:
        raise DataError(f"object of height {object_box.h} is too short for a positive downward shift")
    return int(rng.integers(-kx, kx + 1)), int(rng.integers(1, ky + 1))


def relight(image: np.ndarray, target_region: BitMask, source_region: BitMask, *, source_image=None) -> np.ndarray:
    """Replace the target region per channel with mean(S)/mean(T) * T.

    ``source_image`` defaults to ``image``; pass the donor photo when the
    source shadow lives elsewhere. Channels whose target mean is zero are
    left unchanged. Output values are rint-rounded and clipped to [0, 255].
    """
    src_img = image if source_image is None else source_image
    if target_region.is_empty() or source_region.is_empty():
        raise DataError("relight requires non-empty source and target regions")
    if target_region.shape != image.shape[:2]:
        raise DataError("relight target region does not match the image dimensions")
    if source_region.shape != src_img.shape[:2]:
        raise DataError("relight source region does not match the source image dimensions")
    out = image.copy()
    target_vals = image[target_region.pixels].astype(np.float64)
    source_vals = src_img[source_region.pixels].astype(np.float64)
    mean_t = target_vals.mean(axis=0)
    mean_s = source_vals.mean(axis=0)
    for ch in range(image.shape[2]):
        if mean_t[ch] == 0.0:
            continue
        ratio = mean_s[ch] / mean_t[ch]
        target_vals[:, ch] = np.clip(np.rint(ratio * target_vals[:, ch]), 0, 255)
    out[target_region.pixels] = target_vals.astype(out.dtype)
    return out


def composite_pair_pixels(image, object_mask, object_colors, shadow_mask, source_region, source_image):
    """Paint object pixels, then relight the shadow region from donor stats.

    Masks must already be clipped by occluders; the shadow mask is disjoint
    from the object mask, so relight statistics read unedited pixels.
    """
    out = image.copy()
    if not object_mask.is_empty():
        out[object_mask.pixels] = object_colors[object_mask.pixels]
    if shadow_mask is not None and not shadow_mask.is_empty():
        out = relight(out, shadow_mask, source_region, source_image=source_image)
    return out


def _translate_image(image, dx, dy):
    """Shift pixel content by (dx right, dy down); vacated areas are zeros."""
    h, w = image.shape[:2]
    out = np.zeros_like(image)
    src_x = slice(max(0, -dx), min(w, w - dx))
    src_y = slice(max(0, -dy), min(h, h - dy))
    dst_x = slice(max(0, dx), min(w, w + dx))
    dst_y = slice(max(0, dy), min(h, h + dy))
    if src_x.start < src_x.stop and src_y.start < src_y.stop:
        out[dst_y, dst_x] = image[src_y, src_x]
    return out


@dataclass
class PasteOutcome:
    applied: bool
    scene: Scene
    shift: tuple[int, int] | None = None
    # masks of the freshly pasted records (shadow/association None for object_only)
    new_object: BitMask | None = None
    new_shadow: BitMask | None = None
    new_association: BitMask | None = None
    # above_layering: source records whose masks were clipped (or emptied -> dropped)
    updated_instances: dict[int, BitMask] = field(default_factory=dict)
    dropped_association: int | None = None


def _replace_instance_mask(inst: InstanceAnnotation, mask: BitMask) -> InstanceAnnotation:
    return replace(inst, mask=encode_rle(mask), box=mask_to_box(mask))


def _replace_association_mask(assoc: AssociationRecord, mask: BitMask) -> AssociationRecord:
    return replace(assoc, mask=encode_rle(mask), box=mask_to_box(mask))


def paste_association(scene: Scene, assoc_id: int, config: AugmentConfig, rng=None, shift=None) -> PasteOutcome:
    """Paste one association into its own scene.

    Samples shifts (resampling up to ``config.max_attempts`` until at least
    ``min_visible_fraction`` of the moved pixels stay on-image) unless an
    explicit ``shift`` is given. Returns the unchanged scene with
    ``applied=False`` when no valid placement exists or the paste would be
    fully hidden.
    """
    assoc = next((a for a in scene.associations if a.id == assoc_id), None)
    if assoc is None:
        raise DataError(f"association {assoc_id} is not part of this scene")
    by_id = {i.id: i for i in scene.instances}
    shadow_inst = by_id[assoc.shadow_id]
    object_inst = by_id[assoc.object_id]
    src_shadow = decode_rle(shadow_inst.mask)
    src_object = decode_rle(object_inst.mask)
    object_only = config.strategy == "object_only"
    moving = src_object if object_only else mask_union(src_object, src_shadow)

    no_op = PasteOutcome(applied=False, scene=scene)

    def acceptable(dx, dy):
        return translate_mask(moving, dx, dy).area() >= config.min_visible_fraction * moving.area()

    if shift is None:
        if rng is None:
            raise DataError("paste_association needs an rng when no shift is given")
        chosen = None
        for _ in range(config.max_attempts):
            try:
                candidate = _sample_shift_with_fractions(
                    rng, object_inst.box, config.x_shift_fraction, config.y_shift_fraction
                )
            except DataError:
                return no_op
            if acceptable(*candidate):
                chosen = candidate
                break
        if chosen is None:
            return no_op
        shift = chosen
    elif not acceptable(*shift):
        return no_op
    dx, dy = shift

    # pixels that stay on top of the paste: every existing object instance,
    # minus the source object itself under above_layering
    occluders = BitMask.zeros(scene.height, scene.width)
    for inst in scene.instances:
        if inst.category != "object":
            continue
        if config.strategy == "above_layering" and inst.id == object_inst.id:
            continue
        occluders = mask_union(occluders, decode_rle(inst.mask))

    shifted_object = translate_mask(src_object, dx, dy)
    visible_object = mask_difference(shifted_object, occluders)
    if visible_object.is_empty():
        return no_op

    visible_shadow = None
    if not object_only:
        shifted_shadow = translate_mask(src_shadow, dx, dy)
        visible_shadow = mask_difference(mask_difference(shifted_shadow, occluders), visible_object)
        if visible_shadow.is_empty():
            return no_op

    object_colors = _translate_image(scene.image, dx, dy)
    image = composite_pair_pixels(
        scene.image, visible_object, object_colors, visible_shadow, src_shadow, scene.image
    )

    outcome = PasteOutcome(
        applied=True,
        scene=scene,
        shift=(dx, dy),
        new_object=visible_object,
        new_shadow=visible_shadow,
        new_association=None if object_only else mask_union(visible_object, visible_shadow),
    )

    instances = list(scene.instances)
    associations = list(scene.associations)
    if config.strategy == "above_layering":
        pasted = mask_union(visible_object, visible_shadow)
        clipped = {
            shadow_inst.id: mask_difference(src_shadow, pasted),
            object_inst.id: mask_difference(src_object, pasted),
        }
        clipped_assoc = mask_difference(decode_rle(assoc.mask), pasted)
        if any(m.is_empty() for m in clipped.values()) or clipped_assoc.is_empty():
            # paste swallowed the source association entirely; drop its labels
            instances = [i for i in instances if i.id not in clipped]
            associations = [a for a in associations if a.id != assoc.id]
            outcome.dropped_association = assoc.id
        else:
            instances = [
                _replace_instance_mask(i, clipped[i.id]) if i.id in clipped else i for i in instances
            ]
            associations = [
                _replace_association_mask(a, clipped_assoc) if a.id == assoc.id else a
                for a in associations
            ]
            outcome.updated_instances = clipped

    outcome.scene = Scene(image=image, instances=instances, associations=associations)
    return outcome


def augment_scene(scene: Scene, config: AugmentConfig, rng, image_id: int) -> list[PasteOutcome]:
    """Apply the configured strategy once to a scene; returns applied pastes.

    Each successful paste immediately joins the scene (temporary negative
    record ids, renumbered by :func:`augment_dataset`), so later pastes in
    multiple_associations mode see earlier ones as occluders.
    """
    if not scene.associations:
        return []
    assoc_ids = sorted(a.id for a in scene.associations)
    if config.strategy == "multiple_associations":
        k = int(rng.integers(config.multi_min, config.multi_max + 1))
        k = min(k, len(assoc_ids))
        chosen = [int(a) for a in rng.choice(assoc_ids, size=k, replace=False)]
    else:
        chosen = [int(rng.choice(assoc_ids))]

    outcomes = []
    temp_id = -1
    for assoc_id in chosen:
        outcome = paste_association(scene, assoc_id, config, rng=rng)
        if not outcome.applied:
            continue
        scene = outcome.scene
        object_id = temp_id
        new_instances = [
            InstanceAnnotation(
                id=object_id,
                image_id=image_id,
                category="object",
                mask=encode_rle(outcome.new_object),
                box=mask_to_box(outcome.new_object),
                association_id=None if outcome.new_shadow is None else temp_id,
            )
        ]
        new_associations = []
        if outcome.new_shadow is not None:
            new_instances.append(
                InstanceAnnotation(
                    id=temp_id - 1,
                    image_id=image_id,
                    category="shadow",
                    mask=encode_rle(outcome.new_shadow),
                    box=mask_to_box(outcome.new_shadow),
                    association_id=temp_id,
                )
            )
            new_associations.append(
                AssociationRecord(
                    id=temp_id,
                    image_id=image_id,
                    shadow_id=temp_id - 1,
                    object_id=object_id,
                    mask=encode_rle(outcome.new_association),
                    box=mask_to_box(outcome.new_association),
                )
            )
            temp_id -= 3
        else:
            temp_id -= 1
        scene = Scene(
            image=scene.image,
            instances=scene.instances + new_instances,
            associations=scene.associations + new_associations,
        )
        outcome.scene = scene
        outcomes.append(outcome)
    return outcomes


def augment_dataset(ds: Dataset, config: AugmentConfig, image_provider, threads: int = 1):
    """Augment every image independently (probability ``config.prob`` each).

    ``image_provider(image_id) -> uint8 (H, W, 3)`` supplies pixels. Returns
    (augmented dataset, {image_id: output pixels}); record ids for pasted
    annotations are assigned sequentially in image-id order, so outputs are
    identical for any thread count.
    """
    image_ids = sorted(ds.images)

    def work(image_id):
        record = ds.images[image_id]
        pixels = np.asarray(image_provider(image_id))
        if pixels.shape[:2] != (record.height, record.width):
            raise DataError(
                f"image {image_id}: provider returned {pixels.shape[:2]}, "
                f"manifest says {(record.height, record.width)}"
            )
        scene = Scene(
            image=pixels,
            instances=sorted(ds.instances_of_image(image_id), key=lambda i: i.id),
            associations=sorted(ds.associations_of_image(image_id), key=lambda a: a.id),
        )
        rng = per_image_rng(config.seed, image_id)
        if rng.random() >= config.prob:
            return scene, False
        outcomes = augment_scene(scene, config, rng, image_id)
        if not outcomes:
            return scene, False
        return outcomes[-1].scene, True

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scenes = dict(zip(image_ids, pool.map(work, image_ids)))
    else:
        scenes = {i: work(i) for i in image_ids}

    out = Dataset(images=dict(ds.images))
    images_out = {}
    next_instance = max(ds.instances, default=0) + 1
    next_assoc = max(ds.associations, default=0) + 1
    for image_id in image_ids:
        scene, _changed = scenes[image_id]
        images_out[image_id] = scene.image
        id_map = {}
        for inst in scene.instances:
            if inst.id >= 0:
                continue
            id_map[inst.id] = next_instance
            next_instance += 1
        assoc_map = {}
        for assoc in scene.associations:
            if assoc.id >= 0:
                continue
            assoc_map[assoc.id] = next_assoc
            next_assoc += 1
        for inst in scene.instances:
            final = replace(
                inst,
                id=id_map.get(inst.id, inst.id),
                image_id=image_id,
                association_id=(
                    assoc_map.get(inst.association_id, inst.association_id)
                    if inst.association_id is not None
                    else None
                ),
            )
            out.instances[final.id] = final
        for assoc in scene.associations:
            final = replace(
                assoc,
                id=assoc_map.get(assoc.id, assoc.id),
                image_id=image_id,
                shadow_id=id_map.get(assoc.shadow_id, assoc.shadow_id),
                object_id=id_map.get(assoc.object_id, assoc.object_id),
            )
            out.associations[final.id] = final
    return out, images_out
