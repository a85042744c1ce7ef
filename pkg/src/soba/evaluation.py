"""Shadow-object average precision: a prediction counts as a true positive
only when its shadow, object, and association components all clear the IoU
threshold against one ground-truth pair.

Conventions (recorded in every report's metadata): 101-point interpolated
AP on the recall grid {0.00, 0.01, ..., 1.00}; thresholds are inclusive
(IoU == tau qualifies); greedy score-descending matching with ties broken
by ascending prediction id, candidate ground truths ranked by association
IoU; each ground-truth pair matches at most one prediction.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset
from .errors import DataError
from .masks import (
    BitMask,
    Box,
    box_iou,
    decode_rle,
    encode_rle,
    mask_iou,
    mask_to_box,
    mask_union,
    rle_from_json,
    rle_to_json,
)

TAU_GRID = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))
RECALL_GRID = np.arange(101) / 100.0

MODES = ("segm", "bbox")


@dataclass(frozen=True)
class GroundTruthTriple:
    """Decoded masks and boxes of one annotated shadow-object pair."""

    assoc_id: int
    shadow_mask: BitMask
    object_mask: BitMask
    association_mask: BitMask
    shadow_box: Box
    object_box: Box
    association_box: Box


@dataclass(frozen=True)
class PredictionTriple:
    """One predicted (shadow, object, association) sample with confidence."""

    id: int
    image_id: int
    shadow_mask: BitMask
    object_mask: BitMask
    association_mask: BitMask
    shadow_box: Box
    object_box: Box
    association_box: Box
    score: float

    def __post_init__(self):
        if not (self.shadow_mask.shape == self.object_mask.shape == self.association_mask.shape):
            raise DataError(f"prediction {self.id}: component masks disagree in shape")
        if not np.isfinite(self.score):
            raise DataError(f"prediction {self.id}: score must be finite")

    @classmethod
    def from_masks(cls, pred_id, image_id, shadow_mask, object_mask, score, association_mask=None):
        """Build a triple; the association defaults to the shadow/object union."""
        if association_mask is None:
            association_mask = mask_union(shadow_mask, object_mask)
        return cls(
            id=pred_id,
            image_id=image_id,
            shadow_mask=shadow_mask,
            object_mask=object_mask,
            association_mask=association_mask,
            shadow_box=mask_to_box(shadow_mask),
            object_box=mask_to_box(object_mask),
            association_box=mask_to_box(association_mask),
            score=float(score),
        )


@dataclass(frozen=True)
class InstancePrediction:
    """A lone shadow or object instance; participates in Instance AP only."""

    id: int
    image_id: int
    category: str
    mask: BitMask
    box: Box
    score: float


def gt_triples_for_image(ds: Dataset, image_id: int) -> list[GroundTruthTriple]:
    triples = []
    for assoc in sorted(ds.associations_of_image(image_id), key=lambda a: a.id):
        shadow = ds.shadow_of(assoc)
        obj = ds.object_of(assoc)
        triples.append(
            GroundTruthTriple(
                assoc_id=assoc.id,
                shadow_mask=decode_rle(shadow.mask),
                object_mask=decode_rle(obj.mask),
                association_mask=decode_rle(assoc.mask),
                shadow_box=shadow.box,
                object_box=obj.box,
                association_box=assoc.box,
            )
        )
    return triples


def _component_iou(pred: PredictionTriple, gt: GroundTruthTriple, mode: str) -> tuple[float, float, float]:
    if mode == "segm":
        return (
            mask_iou(pred.shadow_mask, gt.shadow_mask),
            mask_iou(pred.object_mask, gt.object_mask),
            mask_iou(pred.association_mask, gt.association_mask),
        )
    if mode == "bbox":
        return (
            box_iou(pred.shadow_box, gt.shadow_box),
            box_iou(pred.object_box, gt.object_box),
            box_iou(pred.association_box, gt.association_box),
        )
    raise DataError(f"unknown mode {mode!r}; expected one of {MODES}")


def is_true_positive(pred: PredictionTriple, gt: GroundTruthTriple, tau: float, mode: str = "segm") -> bool:
    """All three component IoUs must reach tau (inclusive)."""
    if not 0.0 < tau < 1.0:
        raise DataError(f"tau must lie in (0, 1), got {tau}")
    s, o, a = _component_iou(pred, gt, mode)
    return s >= tau and o >= tau and a >= tau


def _triple_iou_matrices(preds, gts, mode):
    """(n_pred, n_gt) IoU grids for shadow, object, and association components."""
    n_p, n_g = len(preds), len(gts)
    shadow = np.zeros((n_p, n_g))
    obj = np.zeros((n_p, n_g))
    assoc = np.zeros((n_p, n_g))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            shadow[i, j], obj[i, j], assoc[i, j] = _component_iou(p, g, mode)
    return shadow, obj, assoc


def _score_order(preds):
    return sorted(range(len(preds)), key=lambda i: (-preds[i].score, preds[i].id))


def _greedy_labels(order, qualify, rank):
    """Sweep predictions best-first; each GT matches at most once."""
    n_pred, n_gt = qualify.shape
    labels = np.zeros(n_pred, dtype=bool)
    matched = np.zeros(n_gt, dtype=bool)
    for p in order:
        candidates = np.flatnonzero(qualify[p] & ~matched)
        if candidates.size:
            best = candidates[int(np.argmax(rank[p, candidates]))]
            matched[best] = True
            labels[p] = True
    return labels, matched


def match_predictions(preds, gts, tau: float, mode: str = "segm"):
    """Greedy matching of one image's predictions against its GT pairs.

    Returns (tp_labels aligned with `preds`, matched flags aligned with `gts`).
    """
    if not 0.0 < tau < 1.0:
        raise DataError(f"tau must lie in (0, 1), got {tau}")
    shadow, obj, assoc = _triple_iou_matrices(preds, gts, mode)
    qualify = (shadow >= tau) & (obj >= tau) & (assoc >= tau)
    labels, matched = _greedy_labels(_score_order(preds), qualify, assoc)
    return labels.tolist(), matched.tolist()


def _pr_grid(records, gt_count):
    """Precision sampled on the 101-point recall grid, plus the peak recall."""
    order = sorted(records, key=lambda r: (-r[0], r[1]))
    tp = np.array([1 if r[2] else 0 for r in order], dtype=np.float64)
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    recall = tp_cum / gt_count
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)
    # monotone non-increasing envelope from the right
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    sampled = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return sampled, float(recall[-1])


def average_precision(records, gt_count: int) -> float | None:
    """101-point interpolated AP in [0, 100] from (score, pred_id, is_tp) records.

    Returns None when there is no ground truth (excluded from averaging).
    """
    if gt_count < 0:
        raise DataError("gt_count must be non-negative")
    if gt_count == 0:
        return None
    if not records:
        return 0.0
    sampled, _ = _pr_grid(records, gt_count)
    return float(sampled.mean() * 100.0)


@dataclass
class TauCurve:
    tau: float
    ap: float | None
    precision_grid: list[float]
    max_recall: float

    def to_json(self):
        return {
            "tau": self.tau,
            "ap": self.ap,
            "precision_grid": self.precision_grid,
            "max_recall": self.max_recall,
        }


@dataclass
class ModeMetrics:
    soap: float | None
    soap50: float | None
    soap75: float | None
    association_ap: float | None
    instance_ap: float | None
    per_tau: list[TauCurve] = field(default_factory=list)

    def to_json(self):
        return {
            "SOAP": self.soap,
            "SOAP50": self.soap50,
            "SOAP75": self.soap75,
            "association_AP": self.association_ap,
            "instance_AP": self.instance_ap,
            "per_tau": [c.to_json() for c in self.per_tau],
        }


@dataclass
class EvalResult:
    segm: ModeMetrics | None = None
    bbox: ModeMetrics | None = None
    metadata: dict = field(default_factory=dict)

    def to_json(self):
        return {
            "segm": self.segm.to_json() if self.segm else None,
            "bbox": self.bbox.to_json() if self.bbox else None,
            "metadata": self.metadata,
        }


def _curve(records, gt_count, tau) -> TauCurve:
    ap = average_precision(records, gt_count)
    if gt_count == 0 or not records:
        return TauCurve(tau=tau, ap=ap, precision_grid=[0.0] * 101, max_recall=0.0)
    sampled, max_recall = _pr_grid(records, gt_count)
    return TauCurve(
        tau=tau,
        ap=ap,
        precision_grid=[float(v) for v in sampled],
        max_recall=max_recall,
    )


def _mean_or_none(values):
    present = [v for v in values if v is not None]
    if not present:
        return None
    return float(sum(present) / len(present))


def _instance_iou_matrix(preds, gt_masks, gt_boxes, mode):
    n_p, n_g = len(preds), len(gt_masks)
    out = np.zeros((n_p, n_g))
    for i, p in enumerate(preds):
        for j in range(n_g):
            out[i, j] = mask_iou(p.mask, gt_masks[j]) if mode == "segm" else box_iou(p.box, gt_boxes[j])
    return out


def _evaluate_mode(mode, preds_by_image, gt_by_image, instances_by_image, gt_instances, image_ids, threads):
    """All metrics for one mode. Per-image work is order-independent; the
    reduction walks images in sorted id order so thread count cannot change
    any number."""

    def image_payload(image_id):
        preds = preds_by_image.get(image_id, [])
        gts = gt_by_image[image_id]
        shadow, obj, assoc = _triple_iou_matrices(preds, gts, mode)
        inst = {}
        for category in ("shadow", "object"):
            cat_preds = instances_by_image[category].get(image_id, [])
            masks, boxes = gt_instances[category][image_id]
            inst[category] = _instance_iou_matrix(cat_preds, masks, boxes, mode)
        return image_id, (shadow, obj, assoc, inst)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            payloads = dict(pool.map(image_payload, image_ids))
    else:
        payloads = dict(image_payload(i) for i in image_ids)

    total_gt = sum(len(gt_by_image[i]) for i in image_ids)
    soap_curves = []
    assoc_aps = []
    for tau in TAU_GRID:
        soap_records = []
        assoc_records = []
        for image_id in image_ids:
            preds = preds_by_image.get(image_id, [])
            if not preds:
                continue
            shadow, obj, assoc, _ = payloads[image_id]
            order = _score_order(preds)
            qualify = (shadow >= tau) & (obj >= tau) & (assoc >= tau)
            labels, _ = _greedy_labels(order, qualify, assoc)
            soap_records += [(p.score, p.id, bool(l)) for p, l in zip(preds, labels)]
            labels_a, _ = _greedy_labels(order, assoc >= tau, assoc)
            assoc_records += [(p.score, p.id, bool(l)) for p, l in zip(preds, labels_a)]
        soap_curves.append(_curve(soap_records, total_gt, tau))
        assoc_aps.append(average_precision(assoc_records, total_gt))

    category_aps = []
    for category in ("shadow", "object"):
        cat_gt_total = sum(len(gt_instances[category][i][0]) for i in image_ids)
        taus = []
        for tau in TAU_GRID:
            records = []
            for image_id in image_ids:
                cat_preds = instances_by_image[category].get(image_id, [])
                if not cat_preds:
                    continue
                iou = payloads[image_id][3][category]
                order = sorted(
                    range(len(cat_preds)), key=lambda i: (-cat_preds[i].score, cat_preds[i].id)
                )
                labels, _ = _greedy_labels(order, iou >= tau, iou)
                records += [(p.score, p.id, bool(l)) for p, l in zip(cat_preds, labels)]
            taus.append(average_precision(records, cat_gt_total))
        category_aps.append(_mean_or_none(taus))

    by_tau = {c.tau: c.ap for c in soap_curves}
    return ModeMetrics(
        soap=_mean_or_none([c.ap for c in soap_curves]),
        soap50=by_tau.get(0.5),
        soap75=by_tau.get(0.75),
        association_ap=_mean_or_none(assoc_aps),
        instance_ap=_mean_or_none(category_aps),
        per_tau=soap_curves,
    )


def evaluate(
    preds,
    dataset: Dataset,
    modes=MODES,
    extra_instances=(),
    threads: int = 1,
) -> EvalResult:
    """Evaluate prediction triples (plus optional lone instances) against a dataset.

    Lone instances participate in Instance AP only; images with ground truth
    but no predictions contribute pure recall loss.
    """
    preds = list(preds)
    extra_instances = list(extra_instances)
    for p in preds:
        if p.image_id not in dataset.images:
            raise DataError(f"prediction {p.id} references unknown image {p.image_id}")
    for inst in extra_instances:
        if inst.image_id not in dataset.images:
            raise DataError(f"lone instance {inst.id} references unknown image {inst.image_id}")

    image_ids = sorted(dataset.images)
    preds_by_image = {}
    for p in sorted(preds, key=lambda p: p.id):
        preds_by_image.setdefault(p.image_id, []).append(p)

    gt_by_image = {i: gt_triples_for_image(dataset, i) for i in image_ids}
    gt_instances = {"shadow": {}, "object": {}}
    for image_id in image_ids:
        for category in ("shadow", "object"):
            anns = [
                a
                for a in sorted(dataset.instances_of_image(image_id), key=lambda a: a.id)
                if a.category == category
            ]
            gt_instances[category][image_id] = (
                [decode_rle(a.mask) for a in anns],
                [a.box for a in anns],
            )

    # instance predictions: each triple contributes its two components; lone
    # instances ride along with ids offset past every triple id
    instances_by_image = {"shadow": {}, "object": {}}
    max_pred_id = max((p.id for p in preds), default=0)
    for p in preds:
        instances_by_image["shadow"].setdefault(p.image_id, []).append(
            InstancePrediction(p.id, p.image_id, "shadow", p.shadow_mask, p.shadow_box, p.score)
        )
        instances_by_image["object"].setdefault(p.image_id, []).append(
            InstancePrediction(p.id, p.image_id, "object", p.object_mask, p.object_box, p.score)
        )
    for k, inst in enumerate(sorted(extra_instances, key=lambda i: i.id)):
        if inst.category not in ("shadow", "object"):
            raise DataError(f"lone instance {inst.id}: unknown category {inst.category!r}")
        rebased = InstancePrediction(
            max_pred_id + 1 + k, inst.image_id, inst.category, inst.mask, inst.box, inst.score
        )
        instances_by_image[inst.category].setdefault(inst.image_id, []).append(rebased)

    result = EvalResult(
        metadata={
            "ap_interpolation": "101-point",
            "tau_grid": list(TAU_GRID),
            "tie_break": "ascending prediction id",
            "prediction_count": len(preds),
            "lone_instance_count": len(extra_instances),
            "gt_pair_count": sum(len(v) for v in gt_by_image.values()),
        }
    )
    for mode in modes:
        if mode not in MODES:
            raise DataError(f"unknown mode {mode!r}; expected subset of {MODES}")
        metrics = _evaluate_mode(
            mode, preds_by_image, gt_by_image, instances_by_image, gt_instances, image_ids, threads
        )
        setattr(result, mode, metrics)
    return result


def ground_truth_as_predictions(ds: Dataset) -> list[PredictionTriple]:
    """Replay ground truth as perfect predictions (score 1.0)."""
    out = []
    for assoc in sorted(ds.associations.values(), key=lambda a: a.id):
        out.append(
            PredictionTriple(
                id=assoc.id,
                image_id=assoc.image_id,
                shadow_mask=decode_rle(ds.shadow_of(assoc).mask),
                object_mask=decode_rle(ds.object_of(assoc).mask),
                association_mask=decode_rle(assoc.mask),
                shadow_box=ds.shadow_of(assoc).box,
                object_box=ds.object_of(assoc).box,
                association_box=assoc.box,
                score=1.0,
            )
        )
    return out


# --- prediction (pairs) file -----------------------------------------------

def write_prediction_file(path, triples, lone_instances=(), metadata=None) -> None:
    """Write the pairs bundle consumed by `soba eval --pred`."""
    doc = {
        "schema_version": 1,
        "metadata": metadata or {},
        "pairs": [
            {
                "id": t.id,
                "image_id": t.image_id,
                "score": t.score,
                "shadow": {"segmentation": rle_to_json(encode_rle(t.shadow_mask)), "bbox": t.shadow_box.as_list()},
                "object": {"segmentation": rle_to_json(encode_rle(t.object_mask)), "bbox": t.object_box.as_list()},
                "association": {
                    "segmentation": rle_to_json(encode_rle(t.association_mask)),
                    "bbox": t.association_box.as_list(),
                },
            }
            for t in sorted(triples, key=lambda t: t.id)
        ],
        "lone_instances": [
            {
                "id": i.id,
                "image_id": i.image_id,
                "category": i.category,
                "score": i.score,
                "segmentation": rle_to_json(encode_rle(i.mask)),
                "bbox": i.box.as_list(),
            }
            for i in sorted(lone_instances, key=lambda i: i.id)
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _component_from_json(obj, what):
    mask = decode_rle(rle_from_json(obj.get("segmentation"), what=what))
    raw_box = obj.get("bbox")
    box = Box(*(int(v) for v in raw_box)) if raw_box is not None else mask_to_box(mask)
    return mask, box


def load_prediction_file(path):
    """Read a pairs bundle; returns (triples, lone_instances)."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"prediction file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON: {exc}") from exc
    if doc.get("schema_version") != 1:
        raise DataError(f"{path}: unsupported prediction schema_version {doc.get('schema_version')!r}")

    triples = []
    for k, obj in enumerate(doc.get("pairs", [])):
        what = f"pair {obj.get('id', k)}"
        try:
            shadow_mask, shadow_box = _component_from_json(obj["shadow"], f"{what} shadow")
            object_mask, object_box = _component_from_json(obj["object"], f"{what} object")
        except KeyError as exc:
            raise DataError(f"{what}: missing component {exc}") from exc
        if "association" in obj and obj["association"] is not None:
            assoc_mask, assoc_box = _component_from_json(obj["association"], f"{what} association")
        else:
            assoc_mask = mask_union(shadow_mask, object_mask)
            assoc_box = mask_to_box(assoc_mask)
        triples.append(
            PredictionTriple(
                id=int(obj.get("id", k + 1)),
                image_id=int(obj["image_id"]),
                shadow_mask=shadow_mask,
                object_mask=object_mask,
                association_mask=assoc_mask,
                shadow_box=shadow_box,
                object_box=object_box,
                association_box=assoc_box,
                score=float(obj["score"]),
            )
        )
    lone = []
    for k, obj in enumerate(doc.get("lone_instances", [])):
        what = f"lone instance {obj.get('id', k)}"
        mask, box = _component_from_json(obj, what)
        lone.append(
            InstancePrediction(
                id=int(obj.get("id", k + 1)),
                image_id=int(obj["image_id"]),
                category=str(obj["category"]),
                mask=mask,
                box=box,
                score=float(obj["score"]),
            )
        )
    return triples, lone
