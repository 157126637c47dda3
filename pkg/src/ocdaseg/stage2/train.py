"""Stage-II training: supervised detection on translated patches plus
adversarial and style-consistency alignment against the raw target.

Supervision (translated side only): anchor objectness + anchor box
regression from the proposal head, then class / box-refinement / mask
losses on sampled ROIs (ground-truth boxes, jittered copies, and
background boxes).

Alignment (both sides): image-level and instance-level domain critics
sit behind gradient reversal, so one SGD step trains the critics while
pushing the backbone and ROI content the other way.  The ROI
disentangler additionally regenerates pooled features from its
(content, style) split on both domains, and instance style codes are
tied to the subdomain centroid of their parent image.
"""

import dataclasses
import json
import os

import numpy as np
import torch
import torch.nn.functional as F

from ocdaseg.clustering import ClusterState, MemoryBank
from ocdaseg.exceptions import TrainingDiverged
from ocdaseg.stage2.networks import SegmentationModel
from ocdaseg.stage2 import targets as T
from ocdaseg.synth import augment_patch
from ocdaseg.torchutil import (
    batch_from_patches,
    cluster_separation_loss,
    consistency_loss,
    derive_seed,
    grad_reverse,
    grl_coef,
    load_checkpoint,
    save_checkpoint,
    seed_everything,
    stable_hash,
)

STAGE2_TAG = 21
CHECKPOINT_NAME = "stage2.pt"
LOG_NAME = "stage2_log.json"
EMA_MOMENTUM = 0.9
GRAD_CLIP_NORM = 5.0  # adversarial runs are unstable without it
INSTANCE_RECLUSTER = 200  # only used by the instance-clustering variant


@dataclasses.dataclass
class Stage2Result:
    out_dir: str
    checkpoint_path: str
    history: list
    instance_centroids: np.ndarray
    centroids_valid: np.ndarray


def _sample(patches, rng, n, synth_cfg):
    idx = rng.choice(len(patches), size=n, replace=len(patches) < n)
    return [augment_patch(patches[i], rng, synth_cfg) for i in idx]


def _labeled_roi_targets(patch, rng, n_rois, image_size):
    """ROI boxes + targets for one labeled patch.

    Positives are the ground-truth boxes plus jittered copies; negatives
    are random low-overlap background boxes.  Returns a dict of numpy
    arrays (possibly empty when the patch has no instances).
    """
    gt_boxes, gt_ids = T.boxes_from_labels(patch.labels)
    n_pos_max = n_rois // 2
    pos_boxes, pos_gt = [], []
    for g in range(len(gt_boxes)):
        pos_boxes.append(gt_boxes[g])
        pos_gt.append(g)
    while len(pos_boxes) < n_pos_max and len(gt_boxes) > 0:
        g = int(rng.integers(len(gt_boxes)))
        pos_boxes.append(T.jitter_box(gt_boxes[g], rng, image_size=image_size))
        pos_gt.append(g)
    pos_boxes = np.asarray(pos_boxes[:n_pos_max]).reshape(-1, 4)
    pos_gt = pos_gt[: len(pos_boxes)]
    neg_boxes = T.sample_background_boxes(
        gt_boxes, rng, n_rois - len(pos_boxes), image_size
    )
    boxes = np.concatenate([pos_boxes, neg_boxes]) if len(neg_boxes) else pos_boxes
    cls = np.zeros(len(boxes), dtype=np.float32)
    cls[: len(pos_boxes)] = 1.0
    box_deltas = (
        T.encode_boxes(pos_boxes, gt_boxes[pos_gt]) if len(pos_boxes) else np.zeros((0, 4))
    )
    masks = np.stack(
        [
            T.crop_mask_to_roi(patch.labels == gt_ids[g], b)
            for b, g in zip(pos_boxes, pos_gt)
        ]
    ) if len(pos_boxes) else np.zeros((0, T.MASK_SIZE, T.MASK_SIZE), dtype=np.float32)
    return {
        "boxes": boxes, "cls": cls, "n_pos": len(pos_boxes),
        "box_deltas": box_deltas, "masks": masks,
        "gt_boxes": gt_boxes,
    }


def _target_proposal_boxes(obj_logits, deltas, anchors, n_rois, image_size):
    """Top-scoring decoded proposals for an unlabeled image (detached)."""
    scores = torch.sigmoid(obj_logits).detach().numpy()
    order = np.argsort(-scores)[: n_rois * 2]
    boxes = T.decode_boxes(anchors[order], deltas.detach().numpy()[order], image_size)
    wh = np.minimum(boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1])
    boxes = boxes[wh >= 4.0][:n_rois]
    if len(boxes) == 0:
        c = image_size / 2.0
        boxes = np.array([[c - 8, c - 8, c + 8, c + 8]])
    return boxes


def train_stage2(labeled, target, target_labels, cfg, out_dir, seed,
                 num_subdomains, synth_cfg, resume=True):
    """Train the adaptive detector.

    Args:
        labeled: list of annotated patches (translated source, or raw
            source for the no-adaptation baseline).
        target: list of unlabeled target patches (may be empty when all
            alignment weights are zero).
        target_labels: dict patch_id -> subdomain for the target side.
        num_subdomains: K, sizes the instance-style centroid table.

    Returns a Stage2Result; a finished matching run under out_dir is
    reused when resume=True.
    """
    s2 = cfg.stage2.validate()
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, CHECKPOINT_NAME)
    run_key = stable_hash({
        "stage2": dataclasses.asdict(s2), "seed": seed, "k": num_subdomains,
        "labeled": sorted(p.patch_id for p in labeled),
        "target": sorted(p.patch_id for p in target),
    })
    if resume and os.path.exists(ckpt_path):
        payload = torch.load(ckpt_path, map_location="cpu", weights_only=False)
        if payload["extra"].get("run_key") == run_key and payload["extra"].get("completed"):
            e = payload["extra"]
            return Stage2Result(out_dir, ckpt_path, e["history"],
                                np.asarray(e["instance_centroids"]),
                                np.asarray(e["centroids_valid"]))

    seed_everything(derive_seed(seed, STAGE2_TAG, 0))
    rng = np.random.default_rng(derive_seed(seed, STAGE2_TAG, 1))

    model = SegmentationModel(roi_disentangle=s2.roi_disentangle)
    trainable = list(model.parameters())
    opt = torch.optim.SGD(trainable, lr=s2.lr, momentum=s2.momentum)

    image_size = labeled[0].labels.shape[0]
    fm = image_size // T.FEATURE_STRIDE
    anchors = T.anchor_grid(fm, fm)

    use_target = (s2.lambda_adv > 0 or s2.lambda_roi > 0 or s2.lambda_style > 0
                  or s2.instance_clustering) and len(target) > 0

    inst_centroids = np.zeros((num_subdomains, 32), dtype=np.float64)
    centroids_valid = np.zeros(num_subdomains, dtype=bool)
    inst_bank = MemoryBank(2048, 32) if s2.instance_clustering else None
    inst_state = (ClusterState(num_subdomains, 32, seed=derive_seed(seed, STAGE2_TAG, 2))
                  if s2.instance_clustering else None)

    history = []
    zero = torch.zeros(())

    for step in range(1, s2.iterations + 1):
        lab_batch = _sample(labeled, rng, s2.batch_size, synth_cfg)
        x_l = batch_from_patches(lab_batch)
        feat_l = model.backbone(x_l)
        obj_l, deltas_l = model.proposal(feat_l)

        # ---- supervised detection on the labeled side -------------------
        prop_obj = prop_box = zero
        boxes_list, cls_t, npos_list, deltas_t, masks_t, sub_t = [], [], [], [], [], []
        n_prop = 0
        for i, p in enumerate(lab_batch):
            tgt_roi = _labeled_roi_targets(p, rng, s2.rois_per_image, image_size)
            a_labels, a_match = T.match_anchors(anchors, tgt_roi["gt_boxes"])
            keep = a_labels >= 0
            prop_obj = prop_obj + F.binary_cross_entropy_with_logits(
                obj_l[i][keep], torch.from_numpy(a_labels[keep].astype(np.float32))
            )
            pos = a_labels == 1
            if pos.any() and len(tgt_roi["gt_boxes"]):
                want = T.encode_boxes(anchors[pos], tgt_roi["gt_boxes"][a_match[pos]])
                prop_box = prop_box + F.smooth_l1_loss(
                    deltas_l[i][torch.from_numpy(pos)], torch.from_numpy(want.astype(np.float32))
                )
                n_prop += 1
            boxes_list.append(torch.from_numpy(tgt_roi["boxes"].astype(np.float32)))
            cls_t.append(tgt_roi["cls"])
            npos_list.append(tgt_roi["n_pos"])
            deltas_t.append(tgt_roi["box_deltas"])
            masks_t.append(tgt_roi["masks"])
            sub_t.extend([p.subdomain_id] * tgt_roi["n_pos"])

        out_l = model.roi_forward(feat_l, boxes_list)
        cls_target = torch.from_numpy(np.concatenate(cls_t).astype(np.float32))
        roi_cls = (
            F.binary_cross_entropy_with_logits(out_l["cls"], cls_target)
            if cls_target.numel()
            else zero
        )

        # positives are the first n_pos ROIs of each image's block
        pos_idx, offset = [], 0
        for b, npos in zip(boxes_list, npos_list):
            pos_idx.extend(range(offset, offset + npos))
            offset += len(b)
        pos_idx = np.asarray(pos_idx, dtype=np.int64)
        if len(pos_idx):
            want_d = torch.from_numpy(np.concatenate(deltas_t).astype(np.float32))
            roi_box = F.smooth_l1_loss(out_l["box"][pos_idx], want_d)
            want_m = torch.from_numpy(np.concatenate(masks_t))
            roi_mask = F.binary_cross_entropy_with_logits(out_l["mask"][pos_idx], want_m)
        else:
            roi_box = roi_mask = zero
        det = prop_obj / len(lab_batch) + prop_box / max(n_prop, 1) + roi_cls + roi_box + roi_mask

        # ---- target side and alignment ----------------------------------
        adv = roi_regen = style_cons = zero
        out_t = None
        tgt_batch = []
        if use_target:
            tgt_batch = _sample(target, rng, s2.batch_size, synth_cfg)
            x_t = batch_from_patches(tgt_batch)
            feat_t = model.backbone(x_t)
            obj_t, deltas_tt = model.proposal(feat_t)
            boxes_t = [
                torch.from_numpy(_target_proposal_boxes(
                    obj_t[i], deltas_tt[i], anchors, s2.rois_per_image, image_size
                ).astype(np.float32))
                for i in range(len(tgt_batch))
            ]
            out_t = model.roi_forward(feat_t, boxes_t)

            if s2.lambda_adv > 0:
                coef = grl_coef(step, s2.iterations)
                g_l = model.global_critic(grad_reverse(feat_l, coef))
                g_t = model.global_critic(grad_reverse(feat_t, coef))
                adv_global = (
                    F.binary_cross_entropy_with_logits(g_l, torch.ones_like(g_l))
                    + F.binary_cross_entropy_with_logits(g_t, torch.zeros_like(g_t))
                )
                l_l = model.local_critic(grad_reverse(out_l["content"].mean(dim=(2, 3)), coef))
                l_t = model.local_critic(grad_reverse(out_t["content"].mean(dim=(2, 3)), coef))
                adv_local = (
                    F.binary_cross_entropy_with_logits(l_l, torch.ones_like(l_l))
                    + F.binary_cross_entropy_with_logits(l_t, torch.zeros_like(l_t))
                )
                adv = adv_global + adv_local

            if s2.roi_disentangle and s2.lambda_roi > 0:
                roi_regen = F.l1_loss(out_l["recon"], out_l["rois"]) + F.l1_loss(
                    out_t["recon"], out_t["rois"]
                )

            if s2.glsc or s2.instance_clustering:
                z_parts, lbl_parts = [], []
                if len(pos_idx) and any(s >= 0 for s in sub_t):
                    keep = [j for j, s in enumerate(sub_t) if s >= 0]
                    z_parts.append(out_l["style"][pos_idx[keep]])
                    lbl_parts.append(np.asarray([sub_t[j] for j in keep]))
                offset = 0
                for i, p in enumerate(tgt_batch):
                    n = len(boxes_t[i])
                    lab = target_labels.get(p.patch_id, -1)
                    if lab >= 0:
                        z_parts.append(out_t["style"][offset : offset + n])
                        lbl_parts.append(np.full(n, lab, dtype=np.int64))
                    offset += n
                if z_parts:
                    z_all = torch.cat(z_parts)
                    lbl_all = np.concatenate(lbl_parts)
                    if s2.instance_clustering:
                        inst_bank.push(z_all.detach().numpy())
                        if step % INSTANCE_RECLUSTER == 0:
                            inst_state.update(inst_bank)
                        if inst_state.initialized:
                            style_cons = cluster_separation_loss(
                                z_all, inst_state.centroids
                            )
                            inst_centroids = inst_state.centroids
                            centroids_valid = np.ones(num_subdomains, dtype=bool)
                    else:
                        z_np = z_all.detach().numpy()
                        for j in np.unique(lbl_all):
                            mean_j = z_np[lbl_all == j].mean(axis=0)
                            if centroids_valid[j]:
                                inst_centroids[j] = (
                                    EMA_MOMENTUM * inst_centroids[j]
                                    + (1 - EMA_MOMENTUM) * mean_j
                                )
                            else:
                                inst_centroids[j] = mean_j
                                centroids_valid[j] = True
                        style_cons = consistency_loss(
                            z_all, lbl_all, inst_centroids, valid=centroids_valid
                        )

        total = (
            s2.lambda_det * det
            + s2.lambda_adv * adv
            + s2.lambda_roi * roi_regen
            + s2.lambda_style * style_cons
        )
        opt.zero_grad()
        total.backward()
        # the reversed adversarial gradients and the critics chase each
        # other; without a norm bound that feedback loop compounds under
        # momentum until the critic weights overflow
        torch.nn.utils.clip_grad_norm_(trainable, GRAD_CLIP_NORM)
        opt.step()

        if not torch.isfinite(total):
            dump = os.path.join(out_dir, "stage2_diverged.pt")
            save_checkpoint(dump, step, {"model": model},
                            extra={"history": history})
            raise TrainingDiverged(
                f"non-finite stage-2 loss at step {step}", dump_path=dump
            )

        if step % s2.log_interval == 0 or step == 1:
            history.append({
                "step": step,
                "total": float(total.item()),
                "det": float(det.item()),
                "adv": float(adv.item()) if torch.is_tensor(adv) else 0.0,
                "roi": float(roi_regen.item()) if torch.is_tensor(roi_regen) else 0.0,
                "style": float(style_cons.item()) if torch.is_tensor(style_cons) else 0.0,
            })

    extra = {
        "run_key": run_key,
        "completed": True,
        "stage2_config": dataclasses.asdict(s2),
        "num_subdomains": num_subdomains,
        "history": history,
        "instance_centroids": inst_centroids.tolist(),
        "centroids_valid": centroids_valid.tolist(),
    }
    save_checkpoint(ckpt_path, s2.iterations, {"model": model}, {"opt": opt}, extra=extra)
    with open(os.path.join(out_dir, LOG_NAME), "w") as f:
        json.dump({"history": history}, f, indent=2, sort_keys=True)
        f.write("\n")
    return Stage2Result(out_dir, ckpt_path, history, inst_centroids, centroids_valid)


def load_stage2_model(checkpoint_path):
    payload = torch.load(checkpoint_path, map_location="cpu", weights_only=False)
    model = SegmentationModel(
        roi_disentangle=payload["extra"]["stage2_config"]["roi_disentangle"]
    )
    load_checkpoint(checkpoint_path, {"model": model})
    model.eval()
    return model, payload["extra"]
