"""Anchor/ROI target assignment for the detector.

All geometry here is numpy and integer-exact where possible; boxes are
xyxy in image coordinates with the exclusive-right convention (a pixel
column x belongs to [x, x+1)).
"""

import numpy as np

from ocdaseg.stage2.networks import ANCHOR_SIZE, FEATURE_STRIDE, MASK_SIZE

# decoded log-scale deltas are clamped here to keep exp() sane early on
MAX_DELTA_WH = 4.0


def anchor_grid(fm_h, fm_w, stride=FEATURE_STRIDE, size=ANCHOR_SIZE):
    """One square anchor per feature cell, centered on the cell."""
    ys, xs = np.mgrid[0:fm_h, 0:fm_w]
    cx = (xs.ravel() + 0.5) * stride
    cy = (ys.ravel() + 0.5) * stride
    half = size / 2.0
    return np.stack([cx - half, cy - half, cx + half, cy + half], axis=1).astype(np.float64)


def iou_matrix(a, b):
    """(len(a), len(b)) IoU table for xyxy boxes."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def match_anchors(anchors, gt_boxes, pos_iou=0.5, neg_iou=0.3):
    """Anchor labels: 1 positive, 0 negative, -1 ignore.

    Anchors at or above pos_iou are positive, below neg_iou negative,
    in-between ignored.  The best anchor for every ground-truth box is
    forced positive so no object goes unclaimed.

    Returns:
        labels (A,), matched_gt (A,) index into gt_boxes (valid where
        labels == 1).
    """
    n = anchors.shape[0]
    labels = np.full(n, -1, dtype=np.int64)
    matched = np.zeros(n, dtype=np.int64)
    if len(gt_boxes) == 0:
        labels[:] = 0
        return labels, matched
    ious = iou_matrix(anchors, gt_boxes)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    matched = best_gt
    labels[best_iou < neg_iou] = 0
    labels[best_iou >= pos_iou] = 1
    # force-match: the anchor(s) with top IoU for each gt become positive
    top_per_gt = ious.argmax(axis=0)
    labels[top_per_gt] = 1
    matched[top_per_gt] = np.arange(len(gt_boxes))
    return labels, matched


def encode_boxes(anchors, gt_boxes):
    """Box regression targets (dx, dy, dw, dh) relative to anchors."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + aw / 2
    acy = anchors[:, 1] + ah / 2
    gw = gt_boxes[:, 2] - gt_boxes[:, 0]
    gh = gt_boxes[:, 3] - gt_boxes[:, 1]
    gcx = gt_boxes[:, 0] + gw / 2
    gcy = gt_boxes[:, 1] + gh / 2
    return np.stack(
        [(gcx - acx) / aw, (gcy - acy) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1
    )


def decode_boxes(anchors, deltas, image_size=None):
    """Invert encode_boxes; optionally clip to [0, image_size]."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + aw / 2
    acy = anchors[:, 1] + ah / 2
    d = np.clip(deltas, -MAX_DELTA_WH, MAX_DELTA_WH)
    cx = acx + d[:, 0] * aw
    cy = acy + d[:, 1] * ah
    w = aw * np.exp(d[:, 2])
    h = ah * np.exp(d[:, 3])
    boxes = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
    if image_size is not None:
        boxes = np.clip(boxes, 0.0, float(image_size))
    return boxes


def boxes_from_labels(labels):
    """Tight xyxy boxes of every instance; returns (boxes, ids)."""
    ids = np.unique(labels)
    ids = ids[ids > 0]
    boxes = []
    for i in ids:
        ys, xs = np.nonzero(labels == i)
        boxes.append([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1])
    if not boxes:
        return np.zeros((0, 4)), ids
    return np.asarray(boxes, dtype=np.float64), ids


def crop_mask_to_roi(mask, box, out_size=MASK_SIZE):
    """Binary mask resampled over a box with nearest-neighbor gather.

    Sampling points sit at output-pixel centers mapped into the box, so
    the operation is exact and needs no interpolation library.
    """
    x0, y0, x1, y1 = box
    h, w = mask.shape
    xs = x0 + (np.arange(out_size) + 0.5) * (x1 - x0) / out_size
    ys = y0 + (np.arange(out_size) + 0.5) * (y1 - y0) / out_size
    xi = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    yi = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    return mask[np.ix_(yi, xi)].astype(np.float32)


def paste_mask_into_image(mask_prob, box, image_size, threshold=0.5):
    """Inverse of crop_mask_to_roi: binarized mask painted into a canvas."""
    canvas = np.zeros((image_size, image_size), dtype=bool)
    x0 = int(np.floor(box[0]))
    y0 = int(np.floor(box[1]))
    x1 = int(np.ceil(box[2]))
    y1 = int(np.ceil(box[3]))
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, image_size), min(y1, image_size)
    if x1 <= x0 or y1 <= y0:
        return canvas
    m = mask_prob.shape[0]
    ys = ((np.arange(y0, y1) + 0.5 - box[1]) / max(box[3] - box[1], 1e-6) * m)
    xs = ((np.arange(x0, x1) + 0.5 - box[0]) / max(box[2] - box[0], 1e-6) * m)
    yi = np.clip(np.floor(ys).astype(np.int64), 0, m - 1)
    xi = np.clip(np.floor(xs).astype(np.int64), 0, m - 1)
    canvas[y0:y1, x0:x1] = mask_prob[np.ix_(yi, xi)] > threshold
    return canvas


def jitter_box(box, rng, shift=0.15, scale=0.2, image_size=None):
    """Randomly shifted/rescaled copy of a box (ROI augmentation)."""
    x0, y0, x1, y1 = box
    w, h = x1 - x0, y1 - y0
    cx = x0 + w / 2 + rng.uniform(-shift, shift) * w
    cy = y0 + h / 2 + rng.uniform(-shift, shift) * h
    w = w * np.exp(rng.uniform(-scale, scale))
    h = h * np.exp(rng.uniform(-scale, scale))
    out = np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])
    if image_size is not None:
        out = np.clip(out, 0.0, float(image_size))
    return out


def sample_background_boxes(gt_boxes, rng, count, image_size, max_iou=0.1, attempts=50):
    """Random boxes that barely touch any ground truth (class negatives)."""
    out = []
    for _ in range(count):
        for _ in range(attempts):
            size = rng.uniform(8.0, 20.0)
            x0 = rng.uniform(0, image_size - size)
            y0 = rng.uniform(0, image_size - size)
            cand = np.array([x0, y0, x0 + size, y0 + size])
            if len(gt_boxes) == 0 or iou_matrix(cand[None], gt_boxes).max() <= max_iou:
                out.append(cand)
                break
    if not out:
        return np.zeros((0, 4))
    return np.stack(out)
