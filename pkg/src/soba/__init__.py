"""Toolkit for shadow-object association datasets: evaluation, pairing,
copy-paste augmentation, reference loss kernels, and photo-editing helpers."""

from .errors import DataError
from .masks import (
    BitMask,
    Box,
    RleMask,
    SoftMask,
    box_iou,
    decode_rle,
    distance_transform,
    encode_rle,
    laplacian,
    mask_difference,
    mask_intersection,
    mask_iou,
    mask_to_box,
    mask_union,
    threshold_band,
    translate_mask,
)

__version__ = "0.1.0"

__all__ = [
    "DataError",
    "BitMask",
    "Box",
    "RleMask",
    "SoftMask",
    "box_iou",
    "decode_rle",
    "distance_transform",
    "encode_rle",
    "laplacian",
    "mask_difference",
    "mask_intersection",
    "mask_iou",
    "mask_to_box",
    "mask_union",
    "threshold_band",
    "translate_mask",
    "__version__",
]
