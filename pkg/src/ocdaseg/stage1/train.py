"""Stage I: adversarial disentangle-swap-reconstruct training.

Each step takes one batch per domain and
  1. encodes content and style for both sides,
  2. reconstructs each image from its own codes (self-reconstruction),
  3. swaps styles across domains and reconstructs the originals through
     a second encode/decode pass (cross-cycle),
  4. plays the usual GAN games: per-domain image discriminators on the
     swapped outputs and a content discriminator that the encoder tries
     to leave undecided,
  5. pushes the target style codes into a memory bank that is
     re-clustered on a fixed schedule; once centroids exist, confident
     codes are pulled toward their subdomain and pushed from the rest,
  6. supervises nucleus masks (from RGB) and boundaries (from the
     hematoxylin channel) on source->target translations, where source
     annotations remain valid because only style moved.
"""

import dataclasses
import json
import os

import numpy as np
import torch
import torch.nn.functional as F

from ocdaseg.clustering import ClusterState, MemoryBank, reliable_fraction
from ocdaseg.exceptions import TrainingDiverged
from ocdaseg.stage1.networks import TranslationModel
from ocdaseg.synth import augment_patch
from ocdaseg.torchutil import (
    batch_from_patches,
    cluster_separation_loss,
    derive_seed,
    h_channel_torch,
    load_checkpoint,
    save_checkpoint,
    seed_everything,
    stable_hash,
)

STAGE1_TAG = 11

# Internal reconstruction weights of the translation objective (the
# stage-level lambdas scale the whole objective from outside).
W_RECON = 10.0
W_STYLE_REG = 0.01  # KL surrogate pulling codes toward the N(0,1) prior
W_LATENT = 10.0  # regression of prior draws through decode/encode

CHECKPOINT_NAME = "stage1.pt"
LOG_NAME = "stage1_log.json"


@dataclasses.dataclass
class Stage1Result:
    out_dir: str
    checkpoint_path: str
    centroids: np.ndarray  # (K, style_dim) or None if clustering never ran
    subdomain_labels: dict  # target_train patch_id -> assigned subdomain
    events: list  # re-clustering events with reliable fractions
    history: list  # periodic loss snapshots


def stage1_training_fields(s1):
    """Config fields that feed stage-1 training, as a plain dict.

    style_randomization is excluded: it only selects how the translated
    corpus is synthesized afterwards, so runs differing in that flag
    alone share one checkpoint.
    """
    d = dataclasses.asdict(s1)
    d.pop("style_randomization")
    return d


def _bce(logits, target_value):
    return F.binary_cross_entropy_with_logits(
        logits, torch.full_like(logits, target_value)
    )


def _mask_batch(patches):
    m = np.stack([(p.labels > 0).astype(np.float32) for p in patches])
    b = np.stack([p.boundary.astype(np.float32) for p in patches])
    return torch.from_numpy(m)[:, None], torch.from_numpy(b)[:, None]


def _sample(patches, rng, n, synth_cfg):
    idx = rng.choice(len(patches), size=n, replace=len(patches) < n)
    return [augment_patch(patches[i], rng, synth_cfg) for i in idx]


def _assign_all_labels(model, patches, state, batch=16):
    """Subdomain label for every target patch under the current centroids."""
    labels = {}
    with torch.no_grad():
        for i in range(0, len(patches), batch):
            chunk = patches[i : i + batch]
            z = model.style_encoder["target"](batch_from_patches(chunk)).numpy()
            lab, _ = state.assign(z)
            for p, l in zip(chunk, lab):
                labels[p.patch_id] = int(l)
    return labels


def train_stage1(corpus, cfg, out_dir, seed, resume=True):
    """Train the translator; returns a Stage1Result.

    With resume=True a finished run (matching config hash) under out_dir
    is loaded instead of retrained.
    """
    s1 = cfg.stage1.validate()
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, CHECKPOINT_NAME)
    run_key = stable_hash({"stage1": stage1_training_fields(s1), "seed": seed,
                           "corpus": corpus.manifest["seed"]})
    if resume and os.path.exists(ckpt_path):
        payload = torch.load(ckpt_path, map_location="cpu", weights_only=False)
        if payload["extra"].get("run_key") == run_key and payload["extra"].get("completed"):
            e = payload["extra"]
            return Stage1Result(
                out_dir, ckpt_path,
                None if e["centroids"] is None else np.asarray(e["centroids"]),
                e["subdomain_labels"], e["events"], e["history"],
            )

    seed_everything(derive_seed(seed, STAGE1_TAG, 0))
    rng = np.random.default_rng(derive_seed(seed, STAGE1_TAG, 1))

    synth_cfg = _synth_cfg_from_corpus(corpus)
    src = corpus.load_split("source_train")
    tgt = corpus.load_split("target_train")

    model = TranslationModel(s1.style_dim)
    gen_params = [p for m in model.generator_modules() for p in m.parameters()]
    dis_params = [p for m in model.discriminator_modules() for p in m.parameters()]
    opt_g = torch.optim.Adam(gen_params, lr=s1.lr, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(dis_params, lr=s1.lr, betas=(0.5, 0.999))

    bank = MemoryBank(s1.memory_capacity, s1.style_dim)
    state = ClusterState(s1.num_subdomains, s1.style_dim,
                         seed=derive_seed(seed, STAGE1_TAG, 2))
    events, history = [], []
    subdomain_labels = {}

    def recluster(step):
        if not state.update(bank):
            return
        frac = reliable_fraction(bank.snapshot(), state.centroids,
                                 gamma=s1.gamma, m=s1.fuzziness)
        events.append({"step": int(step), "reliable_fraction": float(frac),
                       "update": int(state.update_count)})
        subdomain_labels.clear()
        subdomain_labels.update(_assign_all_labels(model, tgt, state))

    for step in range(1, s1.iterations + 1):
        src_batch = _sample(src, rng, s1.batch_size, synth_cfg)
        tgt_batch = _sample(tgt, rng, s1.batch_size, synth_cfg)
        x_s = batch_from_patches(src_batch)
        x_t = batch_from_patches(tgt_batch)
        mask_s, bnd_s = _mask_batch(src_batch)

        # ---- generator side -------------------------------------------
        c_s, z_s = model.encode(x_s, "source")
        c_t, z_t = model.encode(x_t, "target")

        r_s = model.decode(c_s, z_s, "source")
        r_t = model.decode(c_t, z_t, "target")
        self_recon = F.l1_loss(r_s, x_s) + F.l1_loss(r_t, x_t)

        u = model.decode(c_s, z_t, "target")  # source content, target style
        v = model.decode(c_t, z_s, "source")
        c_u, z_u = model.encode(u, "target")
        c_v, z_v = model.encode(v, "source")
        back_s = model.decode(c_u, z_v, "source")
        back_t = model.decode(c_v, z_u, "target")
        cycle = F.l1_loss(back_s, x_s) + F.l1_loss(back_t, x_t)

        # prior-driven branch: decode a N(0,1) style draw and regress it
        # back, so the generator stays usable for style randomization
        z_r = torch.randn(s1.batch_size, s1.style_dim)
        u_r = model.decode(c_s, z_r, "target")
        latent_reg = F.l1_loss(model.style_encoder["target"](u_r), z_r)

        adv_image = (
            _bce(model.image_disc["target"](u), 1.0)
            + _bce(model.image_disc["source"](v), 1.0)
            + _bce(model.image_disc["target"](u_r), 1.0)
        )
        # the encoder wants the content discriminator maximally unsure
        adv_content = _bce(model.content_disc(c_s), 0.5) + _bce(
            model.content_disc(c_t), 0.5
        )
        style_reg = z_s.pow(2).mean() + z_t.pow(2).mean()

        drit = (
            adv_image
            + adv_content
            + W_RECON * (cycle + self_recon)
            + W_STYLE_REG * style_reg
            + W_LATENT * latent_reg
        )

        cluster = x_s.new_zeros(())
        if s1.progressive_clustering and state.initialized and s1.lambda_cluster > 0:
            cluster = cluster_separation_loss(
                z_t, state.centroids, gamma=s1.gamma, m=s1.fuzziness
            )

        mask_loss = x_s.new_zeros(())
        boundary_loss = x_s.new_zeros(())
        if s1.shape_supervision:
            mask_loss = F.binary_cross_entropy_with_logits(model.mask_head(u), mask_s)
            boundary_loss = F.binary_cross_entropy_with_logits(
                model.boundary_head(h_channel_torch(u)[:, None]), bnd_s
            )

        g_total = (
            s1.lambda_drit * drit
            + s1.lambda_cluster * cluster
            + s1.lambda_mask * mask_loss
            + s1.lambda_boundary * boundary_loss
        )
        opt_g.zero_grad()
        g_total.backward()
        opt_g.step()

        # ---- discriminator side ----------------------------------------
        d_image = (
            _bce(model.image_disc["source"](x_s), 1.0)
            + _bce(model.image_disc["source"](v.detach()), 0.0)
            + _bce(model.image_disc["target"](x_t), 1.0)
            + _bce(model.image_disc["target"](u.detach()), 0.0)
            + _bce(model.image_disc["target"](u_r.detach()), 0.0)
        )
        d_content = _bce(model.content_disc(c_s.detach()), 1.0) + _bce(
            model.content_disc(c_t.detach()), 0.0
        )
        d_total = d_image + d_content
        opt_d.zero_grad()
        d_total.backward()
        opt_d.step()

        if not (torch.isfinite(g_total) and torch.isfinite(d_total)):
            dump = os.path.join(out_dir, "stage1_diverged.pt")
            save_checkpoint(dump, step, {"model": model},
                            extra={"history": history, "events": events})
            raise TrainingDiverged(
                f"non-finite stage-1 loss at step {step}", dump_path=dump
            )

        bank.push(z_t.detach().numpy())

        if step % s1.cluster_interval == 0 and s1.progressive_clustering:
            recluster(step)

        if step % s1.log_interval == 0 or step == 1:
            history.append({
                "step": step,
                "g_total": float(g_total.item()),
                "self_recon": float(self_recon.item()),
                "cycle": float(cycle.item()),
                "adv_image": float(adv_image.item()),
                "adv_content": float(adv_content.item()),
                "style_reg": float(style_reg.item()),
                "latent_reg": float(latent_reg.item()),
                "cluster": float(cluster.item()),
                "mask": float(mask_loss.item()),
                "boundary": float(boundary_loss.item()),
                "d_total": float(d_total.item()),
            })

    # without progressive refinement, cluster once at the very end so
    # subdomain labels are still available downstream
    if not events:
        recluster(s1.iterations)

    extra = {
        "run_key": run_key,
        "completed": True,
        "stage1_config": dataclasses.asdict(s1),
        "centroids": None if state.centroids is None else state.centroids.tolist(),
        "subdomain_labels": subdomain_labels,
        "events": events,
        "history": history,
    }
    save_checkpoint(ckpt_path, s1.iterations, {"model": model},
                    {"opt_g": opt_g, "opt_d": opt_d}, extra=extra)
    with open(os.path.join(out_dir, LOG_NAME), "w") as f:
        json.dump({"events": events, "history": history}, f, indent=2, sort_keys=True)
        f.write("\n")
    return Stage1Result(
        out_dir, ckpt_path,
        None if state.centroids is None else state.centroids.copy(),
        subdomain_labels, events, history,
    )


def _synth_cfg_from_corpus(corpus):
    from ocdaseg.config import _from_dict  # local import to avoid a cycle
    from ocdaseg.synth import SynthConfig

    return _from_dict(SynthConfig, corpus.manifest["config"]["synth"])


def load_stage1_model(checkpoint_path, style_dim=32):
    """Rebuild the translator from a checkpoint; returns (model, extra)."""
    model = TranslationModel(style_dim)
    payload = load_checkpoint(checkpoint_path, {"model": model})
    model.eval()
    return model, payload["extra"]
