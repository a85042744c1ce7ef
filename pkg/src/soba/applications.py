"""Downstream pipelines built on shadow-object pairs: 2D light-direction
estimation and shadow-aware photo editing (removal masks for inpainting, and
object+shadow transfer between photos).

Light direction convention, stated once and used everywhere: the unit vector
points from the shadow-box center toward the object-box center (i.e. toward
the light's image-plane azimuth). Angles are degrees in [0, 360), measured
from +x with atan2 in screen coordinates (y grows downward).
"""

from __future__ import annotations

import math
import os
import shlex
import subprocess
import tempfile
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .augment import Scene, composite_pair_pixels
from .errors import DataError
from .masks import (
    BitMask,
    Box,
    decode_rle,
    mask_difference,
    mask_union,
    translate_mask,
)


@dataclass(frozen=True)
class LightDirection:
    """Unit direction from shadow toward object for one association."""

    vector: tuple[float, float]
    angle_degrees: float


@dataclass(frozen=True)
class LightAggregate:
    """Circular mean of several directions with its circular std (degrees)."""

    vector: tuple[float, float]
    angle_degrees: float
    circular_std_degrees: float
    count: int


@dataclass(frozen=True)
class Placement:
    """Destination anchor position (pixels) and uniform scale for a transfer."""

    x: float
    y: float
    scale: float = 1.0

    def __post_init__(self):
        if self.scale <= 0:
            raise DataError(f"placement scale must be positive, got {self.scale}")


@dataclass(frozen=True)
class EditPlan:
    """A photo edit to execute: remove associations, or transfer one."""

    operation: str
    association_ids: tuple[int, ...]
    placement: Placement | None = None
    dilation: int = 0

    def __post_init__(self):
        if self.operation not in ("remove", "transfer"):
            raise DataError(f"unknown edit operation {self.operation!r}")
        if self.operation == "transfer" and self.placement is None:
            raise DataError("transfer plans need a placement")


def _box_center(box: Box, what: str) -> tuple[float, float]:
    if box.w <= 0 or box.h <= 0:
        raise DataError(f"{what} box is degenerate: {box.as_list()}")
    return box.center()


def estimate_light(shadow_box: Box, object_box: Box) -> LightDirection:
    """Direction of the segment from shadow-box center to object-box center."""
    sx, sy = _box_center(shadow_box, "shadow")
    ox, oy = _box_center(object_box, "object")
    dx, dy = ox - sx, oy - sy
    norm = math.hypot(dx, dy)
    if norm == 0.0:
        raise DataError("coincident shadow and object centers leave the light direction undefined")
    vector = (dx / norm, dy / norm)
    angle = math.degrees(math.atan2(vector[1], vector[0])) % 360.0
    return LightDirection(vector=vector, angle_degrees=angle)


def aggregate_light(directions) -> LightAggregate:
    """Circular mean (atan2 of summed unit vectors) and circular std."""
    directions = list(directions)
    if not directions:
        raise DataError("cannot aggregate an empty set of light directions")
    sx = sum(d.vector[0] for d in directions)
    sy = sum(d.vector[1] for d in directions)
    n = len(directions)
    r_bar = math.hypot(sx, sy) / n
    if r_bar == 0.0:
        raise DataError("directions cancel out; the mean light direction is undefined")
    angle = math.degrees(math.atan2(sy, sx)) % 360.0
    std = math.sqrt(-2.0 * math.log(min(r_bar, 1.0))) if r_bar < 1.0 else 0.0
    return LightAggregate(
        vector=(sx / (n * r_bar), sy / (n * r_bar)),
        angle_degrees=angle,
        circular_std_degrees=math.degrees(std),
        count=n,
    )


def scene_light(scene: Scene) -> LightAggregate:
    """Aggregate direction over a scene's associations, skipping degenerate pairs."""
    by_id = {i.id: i for i in scene.instances}
    directions = []
    for assoc in scene.associations:
        try:
            directions.append(
                estimate_light(by_id[assoc.shadow_id].box, by_id[assoc.object_id].box)
            )
        except DataError:
            continue
    if not directions:
        raise DataError("no association in the scene yields a usable light direction")
    return aggregate_light(directions)


def removal_mask(shadow_mask: BitMask, object_mask: BitMask, dilation: int = 0) -> BitMask:
    """Shadow-plus-object union, grown by a square structuring element of
    radius ``dilation``; the region handed to an inpainting tool."""
    if dilation < 0:
        raise DataError(f"dilation must be non-negative, got {dilation}")
    union = mask_union(shadow_mask, object_mask)
    if dilation == 0:
        return union
    size = 2 * dilation + 1
    return BitMask(ndimage.binary_dilation(union.pixels, structure=np.ones((size, size), dtype=bool)))


def nearest_fill(image: np.ndarray, mask: BitMask) -> np.ndarray:
    """Placeholder inpainting: every masked pixel takes the color of its
    nearest unmasked pixel (flat gray if nothing is unmasked)."""
    if mask.shape != image.shape[:2]:
        raise DataError("fill mask does not match the image dimensions")
    out = image.copy()
    if mask.is_empty():
        return out
    if mask.area() == mask.width * mask.height:
        out[:] = 128
        return out
    _, (iy, ix) = ndimage.distance_transform_edt(mask.pixels, return_indices=True)
    holes = mask.pixels
    out[holes] = image[iy[holes], ix[holes]]
    return out


def run_inpaint_command(image: np.ndarray, mask: BitMask, command_template: str) -> np.ndarray:
    """Hand the image and mask to an external inpainting tool.

    The template must contain {image}, {mask}, and {output} placeholders;
    the tool is expected to write an RGB image at the {output} path.
    """
    from PIL import Image

    for placeholder in ("{image}", "{mask}", "{output}"):
        if placeholder not in command_template:
            raise DataError(f"inpaint command template is missing the {placeholder} placeholder")
    with tempfile.TemporaryDirectory(prefix="soba-inpaint-") as tmp:
        image_path = os.path.join(tmp, "image.png")
        mask_path = os.path.join(tmp, "mask.png")
        output_path = os.path.join(tmp, "output.png")
        Image.fromarray(image).save(image_path)
        Image.fromarray((mask.pixels * np.uint8(255))).save(mask_path)
        command = command_template.format(image=image_path, mask=mask_path, output=output_path)
        proc = subprocess.run(shlex.split(command), capture_output=True, text=True)
        if proc.returncode != 0:
            raise DataError(
                f"inpaint command failed with exit {proc.returncode}: {proc.stderr.strip() or proc.stdout.strip()}"
            )
        if not os.path.exists(output_path):
            raise DataError("inpaint command exited cleanly but wrote no {output} image")
        result = np.asarray(Image.open(output_path).convert("RGB"))
    if result.shape != image.shape:
        raise DataError(f"inpaint tool returned shape {result.shape}, expected {image.shape}")
    return result


def remove_association(scene: Scene, assoc_ids, dilation: int = 0, inpaint_command: str | None = None):
    """Erase associations (objects with their shadows); returns (image, mask)."""
    by_id = {i.id: i for i in scene.instances}
    total = BitMask.zeros(scene.height, scene.width)
    for assoc_id in assoc_ids:
        assoc = next((a for a in scene.associations if a.id == assoc_id), None)
        if assoc is None:
            raise DataError(f"association {assoc_id} is not part of this scene")
        total = mask_union(
            total,
            removal_mask(
                decode_rle(by_id[assoc.shadow_id].mask),
                decode_rle(by_id[assoc.object_id].mask),
                dilation,
            ),
        )
    if inpaint_command:
        return run_inpaint_command(scene.image, total, inpaint_command), total
    return nearest_fill(scene.image, total), total


def shadow_anchor(object_box: Box, shadow_box: Box) -> tuple[float, float]:
    """Rotation anchor: midpoint of the object box's bottom edge clipped to
    the shadow box's x-range (bottom-center of the object if they never
    meet horizontally)."""
    bottom = float(object_box.y + object_box.h)
    lo = max(object_box.x, shadow_box.x)
    hi = min(object_box.x + object_box.w, shadow_box.x + shadow_box.w)
    if lo >= hi:
        return (object_box.x + object_box.w / 2.0, bottom)
    return ((lo + hi) / 2.0, bottom)


def signed_angle_difference(from_degrees: float, to_degrees: float) -> float:
    """Smallest signed rotation (degrees in (-180, 180]) from one azimuth to another."""
    delta = (to_degrees - from_degrees) % 360.0
    if delta > 180.0:
        delta -= 360.0
    return delta


def _inverse_map(shape, angle_degrees, scale, anchor_src, anchor_dst):
    """Source coordinates for every destination pixel under
    p_dst = R(angle) (p_src - anchor_src) * scale + anchor_dst."""
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    dx = xs - anchor_dst[0]
    dy = ys - anchor_dst[1]
    rad = math.radians(-angle_degrees)
    cos_b, sin_b = math.cos(rad), math.sin(rad)
    sx = (cos_b * dx - sin_b * dy) / scale + anchor_src[0]
    sy = (sin_b * dx + cos_b * dy) / scale + anchor_src[1]
    return sx, sy


def transform_mask(
    mask: BitMask,
    angle_degrees: float,
    scale: float,
    anchor_src,
    anchor_dst,
    out_shape,
) -> BitMask:
    """Rigid rotate + uniform scale of a mask with nearest-pixel sampling.

    Zero rotation at unit scale takes an exact integer-translation path (no
    resampling).
    """
    if scale <= 0:
        raise DataError("transform scale must be positive")
    if abs(angle_degrees) < 1e-12 and scale == 1.0:
        dx = anchor_dst[0] - anchor_src[0]
        dy = anchor_dst[1] - anchor_src[1]
        if mask.shape == tuple(out_shape):
            return translate_mask(mask, int(round(dx)), int(round(dy)))
        out = np.zeros(out_shape, dtype=bool)
        src = mask.pixels
        idx, idy = int(round(dx)), int(round(dy))
        ys, xs = np.nonzero(src)
        ys2, xs2 = ys + idy, xs + idx
        keep = (ys2 >= 0) & (ys2 < out_shape[0]) & (xs2 >= 0) & (xs2 < out_shape[1])
        out[ys2[keep], xs2[keep]] = True
        return BitMask(out)
    sx, sy = _inverse_map(out_shape, angle_degrees, scale, anchor_src, anchor_dst)
    si = np.rint(sy).astype(np.int64)
    sj = np.rint(sx).astype(np.int64)
    inside = (si >= 0) & (si < mask.height) & (sj >= 0) & (sj < mask.width)
    out = np.zeros(out_shape, dtype=bool)
    out[inside] = mask.pixels[si[inside], sj[inside]]
    return BitMask(out)


def _sample_colors(image, angle_degrees, scale, anchor_src, anchor_dst, out_shape):
    """Nearest-sampled source colors aligned with the transformed footprint."""
    sx, sy = _inverse_map(out_shape, angle_degrees, scale, anchor_src, anchor_dst)
    si = np.clip(np.rint(sy).astype(np.int64), 0, image.shape[0] - 1)
    sj = np.clip(np.rint(sx).astype(np.int64), 0, image.shape[1] - 1)
    return image[si, sj]


@dataclass
class TransferResult:
    image: np.ndarray
    object_mask: BitMask
    shadow_mask: BitMask
    association_mask: BitMask
    rotation_degrees: float
    anchor_src: tuple[float, float]


def transfer_object(
    src_scene: Scene,
    assoc_id: int,
    dst_scene: Scene,
    placement: Placement,
    src_light: LightDirection | None = None,
    dst_light: LightDirection | LightAggregate | None = None,
) -> TransferResult:
    """Move an object with its shadow into another photo.

    The object cutout is scaled and placed at the anchor; the shadow mask is
    additionally rotated about the anchor by the signed angle between the
    source and destination light directions, then composited behind existing
    destination objects with donor-statistics relighting. When source and
    destination are the same scene, the moved association does not occlude
    itself.
    """
    assoc = next((a for a in src_scene.associations if a.id == assoc_id), None)
    if assoc is None:
        raise DataError(f"association {assoc_id} is not part of the source scene")
    by_id = {i.id: i for i in src_scene.instances}
    shadow_inst = by_id[assoc.shadow_id]
    object_inst = by_id[assoc.object_id]

    if src_light is None:
        src_light = estimate_light(shadow_inst.box, object_inst.box)
    if dst_light is None:
        if not dst_scene.associations:
            raise DataError(
                "destination scene has no associations to estimate a light direction from; "
                "pass dst_light explicitly"
            )
        dst_light = scene_light(dst_scene)
    rotation = signed_angle_difference(src_light.angle_degrees, dst_light.angle_degrees)

    anchor_src = shadow_anchor(object_inst.box, shadow_inst.box)
    anchor_dst = (placement.x, placement.y)
    out_shape = (dst_scene.height, dst_scene.width)

    src_object = decode_rle(object_inst.mask)
    src_shadow = decode_rle(shadow_inst.mask)
    object_dst = transform_mask(src_object, 0.0, placement.scale, anchor_src, anchor_dst, out_shape)
    shadow_dst = transform_mask(src_shadow, rotation, placement.scale, anchor_src, anchor_dst, out_shape)

    occluders = BitMask.zeros(*out_shape)
    exempt = {object_inst.id, shadow_inst.id} if dst_scene is src_scene else set()
    for inst in dst_scene.instances:
        if inst.category == "object" and inst.id not in exempt:
            occluders = mask_union(occluders, decode_rle(inst.mask))
    visible_object = mask_difference(object_dst, occluders)
    if visible_object.is_empty():
        raise DataError("transfer placement is fully hidden behind existing objects; choose another spot")
    visible_shadow = mask_difference(mask_difference(shadow_dst, occluders), visible_object)

    object_colors = _sample_colors(
        src_scene.image, 0.0, placement.scale, anchor_src, anchor_dst, out_shape
    )
    image = composite_pair_pixels(
        dst_scene.image,
        visible_object,
        object_colors,
        None if visible_shadow.is_empty() else visible_shadow,
        src_shadow,
        src_scene.image,
    )
    return TransferResult(
        image=image,
        object_mask=visible_object,
        shadow_mask=visible_shadow,
        association_mask=mask_union(visible_object, visible_shadow),
        rotation_degrees=rotation,
        anchor_src=anchor_src,
    )
