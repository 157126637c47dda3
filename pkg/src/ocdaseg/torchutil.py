"""Torch-side plumbing: seeding, gradient reversal, numpy-loss bridges.

The cluster losses live in numpy with hand-derived gradients
(clustering.py).  Training needs them inside autograd graphs, so this
module wraps them as autograd Functions instead of re-implementing the
math twice: the numpy code stays the single source of truth.
"""

import dataclasses
import hashlib
import json
import os
import random

import numpy as np
import torch

from ocdaseg.clustering import style_cluster_loss, style_consistency_loss
from ocdaseg.hed import DEFAULT_STAIN_MATRIX, OD_EPS


def seed_everything(seed, threads=1):
    """Pin every RNG this process touches and force deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(threads)


def derive_seed(root_seed, *tags):
    """Independent child seed for a named phase of the pipeline.

    Tags are small ints; the same (root, tags) pair always yields the
    same child, and distinct tags yield statistically independent ones.
    """
    return int(np.random.SeedSequence([int(root_seed), *map(int, tags)]).generate_state(1)[0])


# --------------------------------------------------------------------------
# Gradient reversal
# --------------------------------------------------------------------------


class _ReverseGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, coef):
        ctx.coef = coef
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.coef, None


def grad_reverse(x, coef=1.0):
    """Identity in the forward pass, -coef * grad in the backward pass."""
    return _ReverseGrad.apply(x, coef)


def grl_coef(step, total_steps):
    """Adversarial weight ramp: linear 0 -> 1 over the first half, then 1."""
    if total_steps <= 0:
        return 1.0
    return float(min(1.0, 2.0 * step / total_steps))


# --------------------------------------------------------------------------
# numpy-loss bridges
# --------------------------------------------------------------------------


class _NumpyLossFn(torch.autograd.Function):
    """Evaluate a numpy (loss, grad) pair inside the autograd graph."""

    @staticmethod
    def forward(ctx, z, fn):
        z_np = z.detach().cpu().numpy().astype(np.float64)
        loss, grad = fn(z_np)
        ctx.save_for_backward(torch.as_tensor(grad, dtype=z.dtype, device=z.device))
        return torch.as_tensor(loss, dtype=z.dtype, device=z.device)

    @staticmethod
    def backward(ctx, grad_output):
        (g,) = ctx.saved_tensors
        return grad_output * g, None


def cluster_separation_loss(z, centroids, gamma=0.5, m=2.0):
    """Torch view of the gated separation loss; centroids stay constant."""
    centroids = np.asarray(centroids, dtype=np.float64)
    return _NumpyLossFn.apply(z, lambda zz: style_cluster_loss(zz, centroids, gamma=gamma, m=m))


def consistency_loss(z, labels, centroids, valid=None):
    """Torch view of the label-driven style-consistency loss."""
    centroids = np.asarray(centroids, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    return _NumpyLossFn.apply(
        z, lambda zz: style_consistency_loss(zz, labels, centroids, valid=valid)
    )


# --------------------------------------------------------------------------
# Differentiable hematoxylin channel
# --------------------------------------------------------------------------


def h_channel_torch(images, eps=OD_EPS):
    """Hematoxylin concentration of a (B, 3, H, W) batch, per-sample
    min-max normalized to [0, 1]; constant inputs map to zeros.

    Mirrors hed.extract_h_channel but stays differentiable so boundary
    supervision can reach the generator through the stain transform.
    """
    inv_h = torch.as_tensor(
        DEFAULT_STAIN_MATRIX.inverse[:, 0], dtype=images.dtype, device=images.device
    )
    od = -torch.log10(torch.clamp(images, min=eps))
    h = torch.einsum("bchw,c->bhw", od, inv_h)
    flat = h.flatten(1)
    lo = flat.min(dim=1).values[:, None, None]
    hi = flat.max(dim=1).values[:, None, None]
    span = hi - lo
    ok = span > 1e-12
    safe = torch.where(ok, span, torch.ones_like(span))
    out = (h - lo) / safe
    return torch.where(ok.expand_as(out), out, torch.zeros_like(out))


# --------------------------------------------------------------------------
# Tensor <-> image conversion
# --------------------------------------------------------------------------


def to_tensor(image):
    """(H, W, 3) float in [0, 1] -> (3, H, W) float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float()


def to_image(tensor):
    """(3, H, W) tensor -> (H, W, 3) float64 array clipped to [0, 1]."""
    arr = tensor.detach().cpu().numpy().astype(np.float64)
    return np.clip(arr.transpose(1, 2, 0), 0.0, 1.0)


def batch_from_patches(patches):
    """Stack patch images into a (B, 3, H, W) batch."""
    return torch.stack([to_tensor(p.image) for p in patches])


# --------------------------------------------------------------------------
# Checkpoints and cache keys
# --------------------------------------------------------------------------


def save_checkpoint(path, step, models, optimizers=None, extra=None):
    """Atomic checkpoint write (tmp file + rename)."""
    payload = {
        "step": int(step),
        "models": {k: m.state_dict() for k, m in models.items()},
        "optimizers": {k: o.state_dict() for k, o in (optimizers or {}).items()},
        "extra": extra or {},
    }
    tmp = path + ".tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path, models=None, optimizers=None):
    """Restore state dicts in place; returns the raw payload."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    for k, m in (models or {}).items():
        m.load_state_dict(payload["models"][k])
    for k, o in (optimizers or {}).items():
        o.load_state_dict(payload["optimizers"][k])
    return payload


def _jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return dataclasses.asdict(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def stable_hash(obj, length=16):
    """Hex digest of the canonical JSON form of obj (for cache keys)."""
    blob = json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:length]


def count_parameters(module):
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
