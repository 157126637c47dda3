"""Instance-segmentation metrics: DICE, AJI and panoptic quality.

Label maps use 0 for background and positive integers for instances
(ids need not be contiguous).  Every metric defines the degenerate
both-empty case as a perfect score so that blank test patches do not
poison aggregates.

Alongside the fast bincount-based implementations, this module keeps a
deliberately naive set-based re-implementation (`oracle_*`) used by the
test-suite to cross-check the vectorized code on random label maps.
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np


def _instance_ids(labels):
    ids = np.unique(labels)
    return ids[ids > 0]


def _pairwise_intersections(pred, gt):
    """Sparse intersection table {(gt_id, pred_id): pixel count}."""
    fg = (pred > 0) & (gt > 0)
    if not np.any(fg):
        return {}
    p = pred[fg].astype(np.int64)
    g = gt[fg].astype(np.int64)
    stride = int(p.max()) + 1
    joint = g * stride + p
    counts = np.bincount(joint)
    table = {}
    for code in np.nonzero(counts)[0]:
        table[(int(code // stride), int(code % stride))] = int(counts[code])
    return table


def _areas(labels):
    counts = np.bincount(labels.ravel().astype(np.int64))
    return {int(i): int(counts[i]) for i in np.nonzero(counts)[0] if i > 0}


def dice(pred, gt):
    """Binary DICE over the union of all instances; both empty -> 1.0."""
    p = np.asarray(pred) > 0
    g = np.asarray(gt) > 0
    sp, sg = int(p.sum()), int(g.sum())
    if sp == 0 and sg == 0:
        return 1.0
    inter = int(np.logical_and(p, g).sum())
    return 2.0 * inter / (sp + sg)


@dataclass
class MatchResult:
    """Instance correspondence produced by a matching rule."""

    pairs: list = field(default_factory=list)  # (gt_id, pred_id)
    ious: list = field(default_factory=list)  # aligned with pairs
    unmatched_gt: list = field(default_factory=list)
    unmatched_pred: list = field(default_factory=list)


def aji(pred, gt):
    """Aggregated Jaccard Index.

    Ground-truth instances are visited in ascending id order; each claims
    the not-yet-used prediction with the highest IoU (ties broken toward
    the lower prediction id; zero overlap claims nothing).  Intersections
    and unions of claimed pairs accumulate; areas of unclaimed ground
    truths and predictions are added to the union.  Both maps empty is
    scored 1.0 by convention.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    pred_areas = _areas(pred)
    gt_areas = _areas(gt)
    if not pred_areas and not gt_areas:
        return 1.0
    inter = _pairwise_intersections(pred, gt)

    used = set()
    num = 0
    den = 0
    for gid in sorted(gt_areas):
        best_iou = 0.0
        best_pid = None
        for pid in sorted(pred_areas):
            if pid in used:
                continue
            i = inter.get((gid, pid), 0)
            if i == 0:
                continue
            iou = i / (gt_areas[gid] + pred_areas[pid] - i)
            if iou > best_iou:
                best_iou, best_pid = iou, pid
        if best_pid is None:
            den += gt_areas[gid]
        else:
            i = inter[(gid, best_pid)]
            num += i
            den += gt_areas[gid] + pred_areas[best_pid] - i
            used.add(best_pid)
    for pid, area in pred_areas.items():
        if pid not in used:
            den += area
    return num / den if den > 0 else 1.0


def match_instances(pred, gt, iou_threshold=0.5):
    """Unique matching at IoU > threshold.

    For thresholds >= 0.5 each instance can exceed the bound with at most
    one partner, so collecting all above-threshold pairs yields a valid
    one-to-one matching directly.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    pred_areas = _areas(pred)
    gt_areas = _areas(gt)
    inter = _pairwise_intersections(pred, gt)
    result = MatchResult()
    matched_g, matched_p = set(), set()
    for (gid, pid), i in sorted(inter.items()):
        iou = i / (gt_areas[gid] + pred_areas[pid] - i)
        if iou > iou_threshold:
            result.pairs.append((gid, pid))
            result.ious.append(iou)
            matched_g.add(gid)
            matched_p.add(pid)
    result.unmatched_gt = sorted(set(gt_areas) - matched_g)
    result.unmatched_pred = sorted(set(pred_areas) - matched_p)
    return result


def panoptic_quality(pred, gt, iou_threshold=0.5):
    """(DQ, SQ, PQ) for one image; both maps empty -> (1, 1, 1)."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if not np.any(pred > 0) and not np.any(gt > 0):
        return 1.0, 1.0, 1.0
    m = match_instances(pred, gt, iou_threshold)
    tp = len(m.pairs)
    fp = len(m.unmatched_pred)
    fn = len(m.unmatched_gt)
    dq = tp / (tp + 0.5 * fp + 0.5 * fn)
    sq = float(np.mean(m.ious)) if m.ious else 0.0
    return dq, sq, dq * sq


def all_metrics(pred, gt):
    """Full metric dict for one image."""
    dq, sq, pq = panoptic_quality(pred, gt)
    return {
        "dice": dice(pred, gt),
        "aji": aji(pred, gt),
        "dq": dq,
        "sq": sq,
        "pq": pq,
    }


# --------------------------------------------------------------------------
# Naive set-based re-implementations, kept slow on purpose.  These walk the
# instances with python loops over coordinate sets so the fast versions
# above can be validated against an independent computation.
# --------------------------------------------------------------------------


def _pixel_sets(labels):
    labels = np.asarray(labels)
    out = {}
    for idx in zip(*np.nonzero(labels)):
        out.setdefault(int(labels[idx]), set()).add(idx)
    return out


def oracle_dice(pred, gt):
    p = set()
    for s in _pixel_sets(pred).values():
        p |= s
    g = set()
    for s in _pixel_sets(gt).values():
        g |= s
    if not p and not g:
        return 1.0
    return 2.0 * len(p & g) / (len(p) + len(g))


def oracle_aji(pred, gt):
    preds = _pixel_sets(pred)
    gts = _pixel_sets(gt)
    if not preds and not gts:
        return 1.0
    used = set()
    num = den = 0
    for gid in sorted(gts):
        best = (0.0, None)
        for pid in sorted(preds):
            if pid in used:
                continue
            i = len(gts[gid] & preds[pid])
            if i == 0:
                continue
            iou = i / len(gts[gid] | preds[pid])
            if iou > best[0]:
                best = (iou, pid)
        if best[1] is None:
            den += len(gts[gid])
        else:
            num += len(gts[gid] & preds[best[1]])
            den += len(gts[gid] | preds[best[1]])
            used.add(best[1])
    for pid in preds:
        if pid not in used:
            den += len(preds[pid])
    return num / den if den > 0 else 1.0


def oracle_panoptic_quality(pred, gt, iou_threshold=0.5):
    preds = _pixel_sets(pred)
    gts = _pixel_sets(gt)
    if not preds and not gts:
        return 1.0, 1.0, 1.0
    ious = []
    matched_p = set()
    matched_g = set()
    for gid in sorted(gts):
        for pid in sorted(preds):
            iou = len(gts[gid] & preds[pid]) / len(gts[gid] | preds[pid])
            if iou > iou_threshold:
                ious.append(iou)
                matched_g.add(gid)
                matched_p.add(pid)
    tp = len(ious)
    fp = len(preds) - len(matched_p)
    fn = len(gts) - len(matched_g)
    dq = tp / (tp + 0.5 * fp + 0.5 * fn)
    sq = sum(ious) / tp if tp else 0.0
    return dq, sq, dq * sq


# --------------------------------------------------------------------------
# Aggregation and reporting
# --------------------------------------------------------------------------


def aggregate(per_image):
    """Mean of each metric over a list of per-image dicts."""
    if not per_image:
        return {}
    keys = per_image[0].keys()
    return {k: float(np.mean([row[k] for row in per_image])) for k in keys}


@dataclass
class MetricsReport:
    """Evaluation result for one split: per-image rows plus their mean."""

    per_image: list
    mean: dict
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_images(cls, image_ids, preds, gts, meta=None):
        rows = []
        for image_id, p, g in zip(image_ids, preds, gts):
            row = {"image_id": image_id}
            row.update(all_metrics(p, g))
            rows.append(row)
        mean = aggregate([{k: v for k, v in r.items() if k != "image_id"} for r in rows])
        return cls(per_image=rows, mean=mean, meta=dict(meta or {}))

    def to_dict(self):
        return {"meta": self.meta, "mean": self.mean, "per_image": self.per_image}

    def to_json(self):
        # Canonical form: sorted keys, fixed separators, repr floats.
        # Reruns with identical inputs must serialize byte-identically.
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def write_json(self, path):
        with open(path, "w") as f:
            f.write(self.to_json())
            f.write("\n")

    def write_csv(self, path):
        if not self.per_image:
            with open(path, "w") as f:
                f.write("")
            return
        keys = list(self.per_image[0].keys())
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=keys)
            writer.writeheader()
            for row in self.per_image:
                writer.writerow(row)

    @classmethod
    def load_json(cls, path):
        with open(path) as f:
            d = json.load(f)
        return cls(per_image=d["per_image"], mean=d["mean"], meta=d.get("meta", {}))
