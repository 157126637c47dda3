"""Build the translated training corpus from a trained stage-I model.

Every labeled source patch is re-rendered with target appearance while
its annotations are carried over untouched (only style moves through the
generator).  Two style sources are available per patch:

* encoded: the style code of a randomly drawn real target image;
* randomized: a draw from the standard normal prior the style space is
  regularized toward during training, which covers appearance
  variation beyond the observed subdomains — insurance for target
  subdomains that never appeared in training.

Each translated patch records the subdomain id of its style (dominant
donor under the final centroids) so the downstream consistency loss
knows which cluster the instance appearances should agree with.
"""

import json
import os

import numpy as np
import torch

from ocdaseg.clustering import fuzzy_confidence
from ocdaseg.corpus import FORMAT_VERSION, Corpus, save_patch
from ocdaseg.exceptions import ConfigError
from ocdaseg.synth import Patch, boundary_map
from ocdaseg.torchutil import batch_from_patches, derive_seed, to_image, to_tensor

SYNTH_TAG = 12


def encode_styles(model, patches, batch=16):
    """(N, style_dim) style codes for a list of patches (no grad)."""
    domain = "target" if patches[0].domain != "source" else "source"
    out = []
    with torch.no_grad():
        for i in range(0, len(patches), batch):
            out.append(model.style_encoder[domain](batch_from_patches(patches[i : i + batch])))
    return torch.cat(out).numpy()


def translate_image(model, image, style):
    """Render one source image with the given style code."""
    with torch.no_grad():
        x = to_tensor(image)[None]
        c = model.content_encoder(x, "source")
        z = torch.as_tensor(np.asarray(style, dtype=np.float32))[None]
        y = model.generator(c, z, "target")
    return to_image(y[0])


def _style_label(z, centroids):
    if centroids is None:
        return -1
    return int(np.argmax(fuzzy_confidence(z, centroids)))


def synthesize_translated_corpus(model, extra, corpus, out_root, seed, randomize=True):
    """Write the translated corpus; returns it opened.

    `extra` is the stage-I checkpoint extra (centroids + bank +
    subdomain labels).  With randomize=True each source patch yields two
    translated patches (one encoded style, one randomized); otherwise
    only the encoded one.
    """
    rng = np.random.default_rng(derive_seed(seed, SYNTH_TAG))
    src = corpus.load_split("source_train")
    tgt = corpus.load_split("target_train")
    if not src or not tgt:
        raise ConfigError("corpus is missing source_train or target_train patches")
    centroids = None if extra.get("centroids") is None else np.asarray(extra["centroids"])
    labels_map = extra.get("subdomain_labels", {})
    tgt_styles = encode_styles(model, tgt)

    patches_dir = os.path.join(out_root, "patches")
    os.makedirs(patches_dir, exist_ok=True)
    ids = []
    model.eval()
    for p in src:
        donor = int(rng.integers(len(tgt)))
        z = tgt_styles[donor]
        image = translate_image(model, p.image, z)
        label = labels_map.get(tgt[donor].patch_id, _style_label(z, centroids))
        out = Patch(
            image=image,
            labels=p.labels.copy(),
            boundary=boundary_map(p.labels),
            domain="translated",
            subdomain_id=int(label),
            patch_id=f"tr_{p.patch_id}",
            seed=p.seed,
        )
        save_patch(patches_dir, out)
        ids.append(out.patch_id)

        if not randomize:
            continue
        z_mix = rng.standard_normal(tgt_styles.shape[1])
        image = translate_image(model, p.image, z_mix)
        out = Patch(
            image=image,
            labels=p.labels.copy(),
            boundary=boundary_map(p.labels),
            domain="translated",
            subdomain_id=_style_label(z_mix, centroids),
            patch_id=f"trr_{p.patch_id}",
            seed=p.seed,
        )
        save_patch(patches_dir, out)
        ids.append(out.patch_id)

    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": int(seed),
        "splits": {"train": ids},
        "config": {"synth": corpus.manifest["config"]["synth"]},
    }
    with open(os.path.join(out_root, "manifest.json"), "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")
    return Corpus(out_root)
