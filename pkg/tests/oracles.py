"""Straight-line reference implementations used only as test oracles.

Everything here is written with plain loops and no imports from the package
under test, so an oracle can never inherit a bug from the code it checks.
"""

import math

import numpy as np


def pixel_iou(a, b):
    """Dense per-pixel IoU of two boolean grids."""
    inter = 0
    union = 0
    h, w = a.shape
    for r in range(h):
        for c in range(w):
            if a[r, c] and b[r, c]:
                inter += 1
            if a[r, c] or b[r, c]:
                union += 1
    return inter / union if union else 0.0


def rasterized_box_iou(box_a, box_b, size=64):
    """Box IoU by rasterizing both boxes onto a pixel grid."""
    grid_a = np.zeros((size, size), dtype=bool)
    grid_b = np.zeros((size, size), dtype=bool)
    xa, ya, wa, ha = box_a
    xb, yb, wb, hb = box_b
    grid_a[ya:ya + ha, xa:xa + wa] = True
    grid_b[yb:yb + hb, xb:xb + wb] = True
    return pixel_iou(grid_a, grid_b)


def scan_bounds(mask):
    """Tight bounds (x, y, w, h) of a boolean grid via a per-pixel scan."""
    xs, ys = [], []
    h, w = mask.shape
    for r in range(h):
        for c in range(w):
            if mask[r, c]:
                xs.append(c)
                ys.append(r)
    if not xs:
        return None
    return (min(xs), min(ys), max(xs) - min(xs) + 1, max(ys) - min(ys) + 1)


def decode_rle_per_pixel(counts, width, height):
    """Reconstruct a mask pixel-by-pixel from column-major alternating runs."""
    out = np.zeros((height, width), dtype=bool)
    value = False
    position = 0
    for run in counts:
        for _ in range(run):
            col, row = divmod(position, height)
            out[row, col] = value
            position += 1
        value = not value
    assert position == width * height
    return out


def convolve_naive(values, kernel):
    """O(n * k^2) convolution with zero padding."""
    kh, kw = kernel.shape
    pr, pc = kh // 2, kw // 2
    h, w = values.shape
    out = np.zeros((h, w), dtype=np.float64)
    for r in range(h):
        for c in range(w):
            acc = 0.0
            for i in range(kh):
                for j in range(kw):
                    # true convolution: kernel flipped relative to the image
                    rr = r - (i - pr)
                    cc = c - (j - pc)
                    if 0 <= rr < h and 0 <= cc < w:
                        acc += kernel[i, j] * values[rr, cc]
            out[r, c] = acc
    return out


def nearest_set_pixel_distances(boundary):
    """Exhaustive nearest-set-pixel Euclidean distances."""
    h, w = boundary.shape
    points = [(r, c) for r in range(h) for c in range(w) if boundary[r, c]]
    out = np.zeros((h, w), dtype=np.float64)
    for r in range(h):
        for c in range(w):
            out[r, c] = math.sqrt(min((r - pr) ** 2 + (c - pc) ** 2 for pr, pc in points))
    return out


def reference_nms(entries, iou_threshold):
    """O(n^2) mask NMS: entries are (id, score, bool mask), per one category.

    Returns the surviving ids. Sweep order is descending score with ties
    broken by ascending id; a candidate is dropped when its IoU with any
    already-kept mask reaches the threshold.
    """
    order = sorted(entries, key=lambda e: (-e[1], e[0]))
    kept = []
    for ident, _score, mask in order:
        if all(pixel_iou(mask, km) < iou_threshold for _, km in kept):
            kept.append((ident, mask))
    return {ident for ident, _ in kept}


def max_bipartite_tp(qualifies):
    """Maximum matching size for a small pred x gt qualification matrix."""
    n_pred, n_gt = qualifies.shape

    def extend(pred_idx, used_gts):
        if pred_idx == n_pred:
            return 0
        best = extend(pred_idx + 1, used_gts)
        for g in range(n_gt):
            if qualifies[pred_idx, g] and g not in used_gts:
                best = max(best, 1 + extend(pred_idx + 1, used_gts | {g}))
        return best

    return extend(0, frozenset())


def dilate_naive(mask, radius):
    """Per-pixel max over the (2r+1)^2 neighborhood."""
    h, w = mask.shape
    out = np.zeros((h, w), dtype=bool)
    for r in range(h):
        for c in range(w):
            lo_r, hi_r = max(0, r - radius), min(h, r + radius + 1)
            lo_c, hi_c = max(0, c - radius), min(w, c + radius + 1)
            out[r, c] = mask[lo_r:hi_r, lo_c:hi_c].any()
    return out


def relight_scalar(image, target, source):
    """Per-channel scalar relighting of `target` pixels using `source` statistics."""
    out = image.copy()
    h, w, _ = image.shape
    for ch in range(3):
        s_vals = [float(image[r, c, ch]) for r in range(h) for c in range(w) if source[r, c]]
        t_vals = [float(image[r, c, ch]) for r in range(h) for c in range(w) if target[r, c]]
        mean_s = sum(s_vals) / len(s_vals)
        mean_t = sum(t_vals) / len(t_vals)
        if mean_t == 0:
            continue
        ratio = mean_s / mean_t
        for r in range(h):
            for c in range(w):
                if target[r, c]:
                    v = np.rint(ratio * float(image[r, c, ch]))
                    out[r, c, ch] = min(255, max(0, int(v)))
    return out


def box_iou_analytic(a, b):
    """IoU of (x, y, w, h) boxes, rewritten from scratch."""
    ix = min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0])
    iy = min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1])
    inter = max(0, ix) * max(0, iy)
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def ap_101_point(records, gt_count):
    """COCO-style 101-point AP in [0, 100]; records are (score, id, is_tp)."""
    if gt_count == 0:
        return None
    if not records:
        return 0.0
    order = sorted(records, key=lambda r: (-r[0], r[1]))
    tps = fps = 0
    recalls, precisions = [], []
    for _score, _pid, tp in order:
        tps += 1 if tp else 0
        fps += 0 if tp else 1
        recalls.append(tps / gt_count)
        precisions.append(tps / (tps + fps))
    best = 0.0
    envelope = [0.0] * len(precisions)
    for k in range(len(precisions) - 1, -1, -1):
        best = max(best, precisions[k])
        envelope[k] = best
    total = 0.0
    for j in range(101):
        threshold = j / 100.0
        for k, r in enumerate(recalls):
            if r >= threshold:
                total += envelope[k]
                break
    return total / 101.0 * 100.0


def _greedy_match_indices(preds, n_gt, qualify_fn, rank_fn):
    """Greedy sweep by (-score, id); returns tp flags aligned with preds."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i]["score"], preds[i]["id"]))
    taken = [False] * n_gt
    labels = [False] * len(preds)
    for p in order:
        # scan every unmatched gt, keep the highest-ranked qualifying one
        best_j, best_rank = None, -1.0
        for j in range(n_gt):
            if taken[j] or not qualify_fn(p, j):
                continue
            r = rank_fn(p, j)
            if r > best_rank:
                best_j, best_rank = j, r
        if best_j is not None:
            taken[best_j] = True
            labels[p] = True
    return labels


def soap_evaluate_straightline(preds_by_image, gts_by_image, mode, taus):
    """From-first-principles evaluator over plain dict records.

    Prediction dicts: id, score, and per component ('shadow', 'object',
    'association') a bool grid under <comp>_mask and an (x, y, w, h) tuple
    under <comp>_box. GT dicts mirror that. Returns a dict with per-tau
    SOAP aps, SOAP/SOAP50/SOAP75, association AP, and instance AP.

    Each pixel IoU is computed once by pixel_iou and memoized; the cache
    only avoids recomputing an identical pure value across thresholds.
    """
    image_ids = sorted(gts_by_image)
    gt_total = sum(len(gts_by_image[i]) for i in image_ids)
    iou_cache = {}

    def comp_iou(image_id, pi, gi, comp):
        key = (image_id, pi, gi, comp)
        if key not in iou_cache:
            p = preds_by_image[image_id][pi]
            g = gts_by_image[image_id][gi]
            if mode == "segm":
                iou_cache[key] = pixel_iou(p[f"{comp}_mask"], g[f"{comp}_mask"])
            else:
                iou_cache[key] = box_iou_analytic(p[f"{comp}_box"], g[f"{comp}_box"])
        return iou_cache[key]

    soap_aps = []
    assoc_aps = []
    for tau in taus:
        soap_records = []
        assoc_records = []
        for image_id in image_ids:
            preds = preds_by_image.get(image_id, [])
            n_gt = len(gts_by_image[image_id])

            def qualifies_all(pi, gi):
                return all(
                    comp_iou(image_id, pi, gi, c) >= tau
                    for c in ("shadow", "object", "association")
                )

            def assoc_rank(pi, gi):
                return comp_iou(image_id, pi, gi, "association")

            labels = _greedy_match_indices(preds, n_gt, qualifies_all, assoc_rank)
            soap_records += [(p["score"], p["id"], l) for p, l in zip(preds, labels)]
            labels_a = _greedy_match_indices(
                preds, n_gt, lambda pi, gi: assoc_rank(pi, gi) >= tau, assoc_rank
            )
            assoc_records += [(p["score"], p["id"], l) for p, l in zip(preds, labels_a)]
        soap_aps.append(ap_101_point(soap_records, gt_total))
        assoc_aps.append(ap_101_point(assoc_records, gt_total))

    instance_cat_aps = []
    for comp in ("shadow", "object"):
        taus_aps = []
        for tau in taus:
            records = []
            for image_id in image_ids:
                preds = preds_by_image.get(image_id, [])
                n_gt = len(gts_by_image[image_id])

                def inst_iou(pi, gi):
                    return comp_iou(image_id, pi, gi, comp)

                labels = _greedy_match_indices(
                    preds, n_gt, lambda pi, gi: inst_iou(pi, gi) >= tau, inst_iou
                )
                records += [(p["score"], p["id"], l) for p, l in zip(preds, labels)]
            taus_aps.append(ap_101_point(records, gt_total))
        instance_cat_aps.append(sum(taus_aps) / len(taus_aps))

    by_tau = dict(zip(taus, soap_aps))
    return {
        "per_tau": by_tau,
        "SOAP": sum(soap_aps) / len(soap_aps),
        "SOAP50": by_tau.get(0.5),
        "SOAP75": by_tau.get(0.75),
        "association_AP": sum(assoc_aps) / len(assoc_aps),
        "instance_AP": sum(instance_cat_aps) / len(instance_cat_aps),
    }


def circular_mean_angle(angles_deg):
    """Mean direction of angles in degrees via summed unit vectors."""
    sx = sum(math.cos(math.radians(a)) for a in angles_deg)
    sy = sum(math.sin(math.radians(a)) for a in angles_deg)
    return math.degrees(math.atan2(sy, sx)) % 360.0


def rotate_mask_nearest(mask, angle_deg, anchor):
    """Rotate a boolean mask about `anchor` = (x, y) with nearest-pixel sampling.

    Forward map: p_dst = R(angle) (p_src - anchor) + anchor; implemented by
    inverse-mapping every destination pixel.
    """
    h, w = mask.shape
    ax, ay = anchor
    rad = math.radians(angle_deg)
    cos_b, sin_b = math.cos(-rad), math.sin(-rad)
    out = np.zeros((h, w), dtype=bool)
    for r in range(h):
        for c in range(w):
            dx, dy = c - ax, r - ay
            sx = cos_b * dx - sin_b * dy + ax
            sy = sin_b * dx + cos_b * dy + ay
            si, sj = int(round(sy)), int(round(sx))
            if 0 <= si < h and 0 <= sj < w and mask[si, sj]:
                out[r, c] = True
    return out


def smooth_l1(residual):
    """Elementwise smooth-L1 penalty."""
    total = 0.0
    for r in residual:
        r = abs(float(r))
        total += 0.5 * r * r if r < 1.0 else r - 0.5
    return total


def dice(pred, gt, eps=1e-5):
    """Squared-denominator dice distance between a real grid and a 0/1 grid."""
    num = 0.0
    den = 0.0
    h, w = pred.shape
    for r in range(h):
        for c in range(w):
            p = float(pred[r, c])
            g = 1.0 if gt[r, c] else 0.0
            num += p * g
            den += p * p + g * g
    return 1.0 - (2.0 * num + eps) / (den + eps)


def boundary_loss_straightline(pred, thick_pred, gt, beta=5.0):
    """Independent evaluation of the two-term boundary objective.

    thin  = beta * sum(||l(gt)| - |l(pred)||) / sum(|l(gt)|)
    thick = dice(thick_pred, band(dist(gt boundary)) < 0.5 after max-normalizing)
    with l the 5x5 all-(-1)/center-24 Laplacian, zero padded.
    """
    kernel = -np.ones((5, 5))
    kernel[2, 2] = 24.0
    lap_gt = np.abs(convolve_naive(gt.astype(np.float64), kernel))
    lap_pred = np.abs(convolve_naive(np.asarray(pred, dtype=np.float64), kernel))
    denom = lap_gt.sum()
    thin = beta * np.abs(lap_gt - lap_pred).sum() / denom
    boundary_pixels = lap_gt > 1e-6
    dist = nearest_set_pixel_distances(boundary_pixels)
    band = dist / dist.max() < 0.5
    thick = dice(np.asarray(thick_pred, dtype=np.float64), band)
    return thin + thick
