"""Instance extraction from a trained stage-II model.

Pipeline per image: proposal scores -> top-k decode -> NMS -> ROI class
re-scoring + box refinement -> second ROI pass for masks on the refined
boxes -> score-ordered pasting into a label map (first writer wins a
pixel) -> canonical relabeling.
"""

import numpy as np
import torch
from torchvision.ops import nms

from ocdaseg.stage2 import targets as T
from ocdaseg.synth import canonicalize_labels
from ocdaseg.torchutil import to_tensor

PRE_NMS_TOP = 128
MIN_BOX_SIDE = 3.0
MIN_INSTANCE_AREA = 8  # prune paste specks below this


def predict_instances(model, image, cfg):
    """Instance label map (int32) for one (H, W, 3) image in [0, 1]."""
    s2 = cfg.stage2
    model.eval()
    size = image.shape[0]
    with torch.no_grad():
        x = to_tensor(image)[None]
        feat = model.backbone(x)
        obj, deltas = model.proposal(feat)
        fm = feat.shape[2]
        anchors = T.anchor_grid(fm, fm)

        scores = torch.sigmoid(obj[0]).numpy()
        order = np.argsort(-scores)[:PRE_NMS_TOP]
        boxes = T.decode_boxes(anchors[order], deltas[0].numpy()[order], size)
        keep = np.minimum(boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1]) >= MIN_BOX_SIDE
        boxes, pre_scores = boxes[keep], scores[order][keep]
        if len(boxes) == 0:
            return np.zeros((size, size), dtype=np.int32)

        kept = nms(
            torch.from_numpy(boxes.astype(np.float32)),
            torch.from_numpy(pre_scores.astype(np.float32)),
            s2.nms_threshold,
        ).numpy()[: s2.max_detections]
        proposals = boxes[kept]

        first = model.roi_forward(feat, [torch.from_numpy(proposals.astype(np.float32))])
        cls_prob = torch.sigmoid(first["cls"]).numpy()
        refined = T.decode_boxes(proposals, first["box"].numpy(), size)
        ok = cls_prob >= s2.score_threshold
        ok &= np.minimum(refined[:, 2] - refined[:, 0], refined[:, 3] - refined[:, 1]) >= MIN_BOX_SIDE
        if not ok.any():
            return np.zeros((size, size), dtype=np.int32)
        refined, cls_prob = refined[ok], cls_prob[ok]

        second = model.roi_forward(feat, [torch.from_numpy(refined.astype(np.float32))])
        mask_prob = torch.sigmoid(second["mask"]).numpy()

    out = np.zeros((size, size), dtype=np.int32)
    next_id = 1
    for i in np.argsort(-cls_prob):
        painted = T.paste_mask_into_image(mask_prob[i], refined[i], size)
        painted &= out == 0
        if painted.sum() < MIN_INSTANCE_AREA:
            continue
        out[painted] = next_id
        next_id += 1
    return canonicalize_labels(out, MIN_INSTANCE_AREA)


def segment_split(model, corpus, split, cfg):
    """Predictions and ground truth for a corpus split.

    Returns (patch_ids, predicted_label_maps, gt_label_maps).
    """
    ids = corpus.ids(split)
    preds, gts = [], []
    for pid in ids:
        p = corpus.load(pid)
        preds.append(predict_instances(model, p.image, cfg))
        gts.append(p.labels)
    return ids, preds, gts
