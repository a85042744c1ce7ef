"""Reference numerical implementations of the training objectives, as pure
functions over soft masks, locations, and scalars.

These are the regression targets and documentation of the math; no
autodifferentiation or trainer ships here. Detection-side classification,
centerness, and box terms are externally supplied scalars and only summed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .masks import BitMask, SoftMask, distance_transform, laplacian, mask_iou, threshold_band

DICE_EPS = 1e-5
BOUNDARY_BETA = 5.0
# any Laplacian magnitude above this marks a ground-truth boundary pixel
# (integer masks respond with exact zeros elsewhere)
BOUNDARY_RESPONSE_EPS = 1e-6

# losses that stay disabled for the first N training iterations
LOSS_WARMUP_ITERATIONS = {
    "maskiou": 5000,
    "thin_boundary": 10000,
}


@dataclass(frozen=True)
class OffsetSample:
    """One offset-regression sample.

    ``offset`` is the predicted partner displacement before direction
    normalization, ``class_value`` (+1 shadow, -1 object) orients it, and the
    residual compares against ``target_center - center``.
    """

    offset: tuple[float, float]
    class_value: int
    center: tuple[float, float]
    target_center: tuple[float, float]

    def __post_init__(self):
        if self.class_value not in (-1, 1):
            raise DataError(f"class_value must be -1 or +1, got {self.class_value}")
        for name in ("offset", "center", "target_center"):
            if not all(np.isfinite(v) for v in getattr(self, name)):
                raise DataError(f"offset sample field {name} must be finite")

    def residual(self) -> tuple[float, float]:
        u = (self.offset[0] * self.class_value, self.offset[1] * self.class_value)
        v = (self.target_center[0] - self.center[0], self.target_center[1] - self.center[1])
        return (u[0] - v[0], u[1] - v[1])


def _smooth_l1(r: float) -> float:
    r = abs(r)
    return 0.5 * r * r if r < 1.0 else r - 0.5


def offset_loss(sample: OffsetSample) -> float:
    """Smooth-L1 penalty on the class-oriented offset residual, summed over x, y."""
    return sum(_smooth_l1(r) for r in sample.residual())


def offset_loss_grad(sample: OffsetSample) -> np.ndarray:
    """d(loss)/d(offset): residual clipped to [-1, 1], times the class value."""
    grad = []
    for r in sample.residual():
        d = r if abs(r) < 1.0 else float(np.sign(r))
        grad.append(d * sample.class_value)
    return np.array(grad)


def _soft_values(pred) -> np.ndarray:
    if isinstance(pred, SoftMask):
        return pred.values
    if isinstance(pred, BitMask):
        return pred.pixels.astype(np.float64)
    return np.asarray(pred, dtype=np.float64)


def _gt_pixels(gt) -> np.ndarray:
    if isinstance(gt, BitMask):
        return gt.pixels
    return np.asarray(gt).astype(bool)


def dice_loss(pred, gt) -> float:
    """Squared-denominator dice distance: 1 - (2 sum(pg) + eps) / (sum(p^2) + sum(g^2) + eps)."""
    p = _soft_values(pred)
    g = _gt_pixels(gt).astype(np.float64)
    if p.shape != g.shape:
        raise DataError(f"dice_loss shapes differ: {p.shape} vs {g.shape}")
    num = 2.0 * float((p * g).sum()) + DICE_EPS
    den = float((p * p).sum()) + float((g * g).sum()) + DICE_EPS
    return 1.0 - num / den


def dice_loss_grad(pred, gt) -> np.ndarray:
    """d(dice_loss)/d(pred) pointwise."""
    p = _soft_values(pred)
    g = _gt_pixels(gt).astype(np.float64)
    if p.shape != g.shape:
        raise DataError(f"dice_loss shapes differ: {p.shape} vs {g.shape}")
    num = 2.0 * float((p * g).sum()) + DICE_EPS
    den = float((p * p).sum()) + float((g * g).sum()) + DICE_EPS
    return -(2.0 * g * den - num * 2.0 * p) / (den * den)


def maskiou_loss(predicted, target) -> float:
    """Mean squared error between predicted and target per-instance mask IoUs."""
    predicted = np.asarray(predicted, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if predicted.shape != target.shape or predicted.ndim != 1 or predicted.size == 0:
        raise DataError("maskiou_loss expects equal-length non-empty 1D sequences")
    if predicted.min() < 0 or predicted.max() > 1 or target.min() < 0 or target.max() > 1:
        raise DataError("mask IoU values must lie in [0, 1]")
    return float(np.mean((predicted - target) ** 2))


def maskiou_loss_grad(predicted, target) -> np.ndarray:
    predicted = np.asarray(predicted, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    return 2.0 * (predicted - target) / predicted.size


def maskiou_target(pred: SoftMask, gt: BitMask) -> float:
    """Regression target: IoU of the binarized prediction against ground truth."""
    return mask_iou(pred.binarize(), gt)


def boundary_pixels(gt: BitMask) -> BitMask:
    """Ground-truth boundary: pixels with non-zero Laplacian magnitude."""
    return BitMask(laplacian(gt) > BOUNDARY_RESPONSE_EPS)


def thick_boundary_target(gt: BitMask) -> BitMask:
    """Supervision band: max-normalized distance to the boundary < 0.5."""
    boundary = boundary_pixels(gt)
    if boundary.is_empty():
        raise DataError("ground-truth mask has no boundary response")
    return threshold_band(distance_transform(boundary))


def thin_boundary_loss(pred, gt: BitMask) -> float:
    """L1 gap between predicted and ground-truth Laplacian magnitudes,
    normalized by the ground truth's total response (unweighted)."""
    lap_gt = laplacian(gt)
    denom = float(lap_gt.sum())
    if gt.is_empty() or denom <= 0.0:
        raise DataError("thin boundary target is degenerate (empty or zero-response mask)")
    lap_pred = laplacian(_soft_values(pred))
    return float(np.abs(lap_gt - lap_pred).sum()) / denom


def boundary_loss(pred, pred_thick_boundary, gt: BitMask, beta: float = BOUNDARY_BETA) -> float:
    """Two-term boundary objective: beta-weighted thin Laplacian gap plus
    dice of the predicted thick map against the distance-band target."""
    thin = thin_boundary_loss(pred, gt)
    thick = dice_loss(pred_thick_boundary, thick_boundary_target(gt))
    return beta * thin + thick


@dataclass(frozen=True)
class LossBreakdown:
    """All scalar parts with their per-group and overall sums."""

    cls: float
    center: float
    box: float
    offset: float
    mask: float
    mask_associated: float
    maskiou: float
    boundary: float
    boundary_associated: float
    detection_total: float
    mask_total: float
    boundary_total: float
    total: float

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def compose_losses(
    *,
    cls: float = 0.0,
    center: float = 0.0,
    box: float = 0.0,
    offset: float = 0.0,
    mask: float = 0.0,
    mask_associated: float = 0.0,
    maskiou: float = 0.0,
    boundary: float = 0.0,
    boundary_associated: float = 0.0,
) -> LossBreakdown:
    """Sum the parts: detection (cls+center+box+offset), mask
    (mask+associated+maskiou), boundary (own+associated), and their total."""
    parts = dict(
        cls=cls, center=center, box=box, offset=offset, mask=mask,
        mask_associated=mask_associated, maskiou=maskiou,
        boundary=boundary, boundary_associated=boundary_associated,
    )
    for name, value in parts.items():
        if not np.isfinite(value):
            raise DataError(f"loss part {name} must be finite, got {value}")
        if value < 0:
            raise DataError(f"loss part {name} must be non-negative, got {value}")
    detection_total = cls + center + box + offset
    mask_total = mask + mask_associated + maskiou
    boundary_total = boundary + boundary_associated
    return LossBreakdown(
        **parts,
        detection_total=detection_total,
        mask_total=mask_total,
        boundary_total=boundary_total,
        total=detection_total + mask_total + boundary_total,
    )


def loss_active(name: str, iteration: int) -> bool:
    """Warm-up schedule predicate: False while a loss is still disabled."""
    if iteration < 0:
        raise DataError("iteration must be non-negative")
    return iteration >= LOSS_WARMUP_ITERATIONS.get(name, 0)


# --- self-check suite (backs `soba loss-check`) ------------------------------

def _boundary_loss_naive(pred, thick_pred, gt_pixels, beta):
    """Second, loop-based evaluation of the boundary objective for self-checks."""
    kernel = -np.ones((5, 5))
    kernel[2, 2] = 24.0
    h, w = gt_pixels.shape

    def conv_abs(values):
        out = np.zeros((h, w))
        for r in range(h):
            for c in range(w):
                acc = 0.0
                for i in range(5):
                    for j in range(5):
                        rr, cc = r - (i - 2), c - (j - 2)
                        if 0 <= rr < h and 0 <= cc < w:
                            acc += kernel[i, j] * values[rr, cc]
                out[r, c] = abs(acc)
        return out

    lap_gt = conv_abs(gt_pixels.astype(np.float64))
    lap_pred = conv_abs(np.asarray(pred, dtype=np.float64))
    thin = float(np.abs(lap_gt - lap_pred).sum()) / float(lap_gt.sum())
    boundary = lap_gt > BOUNDARY_RESPONSE_EPS
    ys, xs = np.nonzero(boundary)
    dist = np.zeros((h, w))
    for r in range(h):
        for c in range(w):
            dist[r, c] = np.sqrt(((ys - r) ** 2 + (xs - c) ** 2).min())
    band = (dist / dist.max() < 0.5).astype(np.float64)
    tp = np.asarray(thick_pred, dtype=np.float64)
    num = 2.0 * float((tp * band).sum()) + DICE_EPS
    den = float((tp * tp).sum()) + float(band.sum()) + DICE_EPS
    return beta * thin + (1.0 - num / den)


def _central_difference(fn, x, h=1e-4):
    grad = np.zeros_like(x, dtype=np.float64)
    flat = grad.ravel()
    xf = x.ravel()
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + h
        hi = fn(x)
        xf[i] = orig - h
        lo = fn(x)
        xf[i] = orig
        flat[i] = (hi - lo) / (2 * h)
    return grad


def _relative_gap(analytic, numeric):
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


def run_self_checks(seed: int = 0, boundary_cases: int = 20):
    """Exercise the loss invariants; returns [(check name, passed, detail)]."""
    rng = np.random.default_rng(seed)
    results = []

    def record(name, passed, detail=""):
        results.append((name, bool(passed), detail))

    # smooth-L1 branches meet at |r| = 1 with value 0.5 per coordinate
    quad = 0.5 * 1.0**2
    lin = 1.0 - 0.5
    record("offset branch continuity at |r|=1", quad == 0.5 and lin == 0.5, f"{quad} vs {lin}")

    flip_ok = True
    for _ in range(50):
        offset = tuple(rng.uniform(-5, 5, 2))
        center = tuple(rng.uniform(0, 50, 2))
        target = tuple(rng.uniform(0, 50, 2))
        c = int(rng.choice([-1, 1]))
        a = offset_loss(OffsetSample(offset, c, center, target))
        b = offset_loss(OffsetSample((-offset[0], -offset[1]), -c, center, target))
        if a != b:
            flip_ok = False
    record("offset class-flip invariance (exact)", flip_ok)

    grad_gap = 0.0
    for _ in range(20):
        center = tuple(rng.uniform(0, 50, 2))
        target = tuple(rng.uniform(0, 50, 2))
        c = int(rng.choice([-1, 1]))
        offset = np.array(rng.uniform(-5, 5, 2))
        sample = OffsetSample(tuple(offset), c, center, target)
        if any(abs(abs(r) - 1.0) < 1e-2 for r in sample.residual()):
            continue  # stay away from the non-smooth seam
        analytic = offset_loss_grad(sample)
        numeric = _central_difference(
            lambda o: offset_loss(OffsetSample((o[0], o[1]), c, center, target)), offset.copy()
        )
        grad_gap = max(grad_gap, _relative_gap(analytic, numeric))
    record("offset gradient vs central differences", grad_gap < 1e-3, f"max rel gap {grad_gap:.2e}")

    gap = 0.0
    for _ in range(10):
        p = rng.uniform(0.05, 0.95, (8, 8))
        g = rng.random((8, 8)) < 0.4
        analytic = dice_loss_grad(p, g)
        numeric = _central_difference(lambda x: dice_loss(x, g), p.copy())
        gap = max(gap, _relative_gap(analytic, numeric))
    record("dice gradient vs central differences", gap < 1e-3, f"max rel gap {gap:.2e}")

    gap = 0.0
    for _ in range(10):
        n = int(rng.integers(1, 8))
        pred = rng.uniform(0.05, 0.95, n)
        target = rng.uniform(0.0, 1.0, n)
        analytic = maskiou_loss_grad(pred, target)
        numeric = _central_difference(lambda x: maskiou_loss(x, target), pred.copy())
        gap = max(gap, _relative_gap(analytic, numeric))
    record("maskiou gradient vs central differences", gap < 1e-3, f"max rel gap {gap:.2e}")

    worst = 0.0
    for _ in range(boundary_cases):
        gt = np.zeros((16, 16), dtype=bool)
        top, left = rng.integers(1, 6, 2)
        h, w = rng.integers(4, 9, 2)
        gt[top:top + h, left:left + w] = True
        pred = rng.uniform(0, 1, (16, 16))
        thick = rng.uniform(0, 1, (16, 16))
        fast = boundary_loss(pred, thick, BitMask(gt))
        slow = _boundary_loss_naive(pred, thick, gt, BOUNDARY_BETA)
        worst = max(worst, abs(fast - slow))
    record("boundary loss vs independent evaluation", worst < 1e-9, f"max abs gap {worst:.2e}")

    zero = compose_losses()
    ones = compose_losses(
        cls=1, center=1, box=1, offset=1, mask=1, mask_associated=1, maskiou=1,
        boundary=1, boundary_associated=1,
    )
    record("loss composition sums", zero.total == 0.0 and ones.total == 9.0)
    return results
