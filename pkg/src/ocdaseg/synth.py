"""Procedural microscopy-like patches with exact instance labels.

Two domains are generated:

* a "fluorescence" source: bright textured nuclei on a near-black
  background, identical statistics across the whole domain, with labels;
* a "histology" target: nuclei and background synthesized in optical
  density space from a small table of style recipes (one recipe = one
  latent subdomain).  The recipe id is stored with each patch but is
  withheld from training; it exists so clustering quality can be scored.

Both domains share the same geometry model, so a translator only has to
move appearance, never shape.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ocdaseg.exceptions import ConfigError
from ocdaseg.hed import DEFAULT_STAIN_MATRIX, hed_to_rgb

FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=np.int8)


@dataclass
class Patch:
    """One image patch with dense instance annotations."""

    image: np.ndarray  # (H, W, 3) float64 in [0, 1]
    labels: np.ndarray  # (H, W) int32, 0 = background
    boundary: np.ndarray  # (H, W) bool, morphological gradient of labels
    domain: str  # "source" | "target"
    subdomain_id: int  # style recipe id; -1 for source patches
    patch_id: str
    seed: int


@dataclass
class SynthConfig:
    """Knobs for the procedural generator."""

    patch_size: int = 64
    min_area: int = 15
    boundary_width: int = 2
    source_density: float = 10.0  # expected nuclei per 64x64
    source_radius: tuple = (4.5, 8.0)
    seen_styles: tuple = (0, 1, 2, 3)
    unseen_styles: tuple = (4, 5)

    def validate(self):
        if self.patch_size < 32:
            raise ConfigError(f"patch_size must be >= 32, got {self.patch_size}")
        if self.min_area < 1:
            raise ConfigError("min_area must be positive")
        if set(self.seen_styles) & set(self.unseen_styles):
            raise ConfigError("seen and unseen style sets overlap")
        for s in tuple(self.seen_styles) + tuple(self.unseen_styles):
            if not 0 <= s < len(STYLE_TABLE):
                raise ConfigError(f"style id {s} outside table of {len(STYLE_TABLE)}")
        return self


# Style recipes for the compound target.  Values are stain concentrations
# (applied in OD space through the Ruifrok-Johnston basis) plus texture
# and geometry settings, chosen to be well separated so the latent
# subdomains are actually recoverable.
STYLE_TABLE = (
    # h_conc  e_bg   d_tint  tex_freq tex_amp density elong
    dict(h_conc=0.80, e_bg=0.18, d_tint=0.00, tex_freq=5, tex_amp=0.25, density=10.0, elong=(0.55, 0.8)),
    dict(h_conc=0.45, e_bg=0.55, d_tint=0.05, tex_freq=16, tex_amp=0.35, density=13.0, elong=(0.8, 1.0)),
    dict(h_conc=0.95, e_bg=0.38, d_tint=0.12, tex_freq=9, tex_amp=0.20, density=7.0, elong=(0.45, 0.7)),
    dict(h_conc=0.60, e_bg=0.10, d_tint=0.08, tex_freq=24, tex_amp=0.45, density=11.0, elong=(0.7, 0.95)),
    dict(h_conc=0.70, e_bg=0.45, d_tint=0.02, tex_freq=12, tex_amp=0.30, density=9.0, elong=(0.6, 0.85)),
    dict(h_conc=0.52, e_bg=0.28, d_tint=0.10, tex_freq=7, tex_amp=0.40, density=12.0, elong=(0.5, 0.75)),
    dict(h_conc=0.88, e_bg=0.22, d_tint=0.06, tex_freq=20, tex_amp=0.28, density=8.0, elong=(0.75, 1.0)),
    dict(h_conc=0.40, e_bg=0.62, d_tint=0.03, tex_freq=10, tex_amp=0.22, density=14.0, elong=(0.55, 0.9)),
)


def value_noise(rng, shape, freq, octaves=1):
    """Smooth [0, 1] noise: bilinear interpolation of a coarse random grid."""
    h, w = shape
    out = np.zeros(shape, dtype=np.float64)
    amp_total = 0.0
    for o in range(octaves):
        f = freq * (2 ** o)
        grid = rng.random((f + 2, f + 2))
        yy, xx = np.mgrid[0:h, 0:w]
        coords = np.stack([yy * f / h, xx * f / w])
        amp = 0.5 ** o
        out += amp * ndimage.map_coordinates(grid, coords, order=1, mode="nearest")
        amp_total += amp
    out /= amp_total
    lo, hi = out.min(), out.max()
    if hi - lo > 1e-12:
        out = (out - lo) / (hi - lo)
    return out


def boundary_map(labels, width=2):
    """Instance-boundary mask via a morphological gradient of given width.

    A pixel is boundary when the (width+1)-sized neighborhood around it
    contains more than one label value, which marks ~width pixels across
    every instance border (including against background).
    """
    size = width + 1
    mx = ndimage.maximum_filter(labels, size=size, mode="nearest")
    mn = ndimage.minimum_filter(labels, size=size, mode="nearest")
    return (mx != mn) & (labels >= 0)


def canonicalize_labels(labels, min_area):
    """Enforce the label-map contract.

    Splits disconnected fragments into separate instances (4-connectivity),
    drops anything below min_area, and relabels contiguously from 1 in
    raster order of each instance's first pixel.
    """
    labels = np.asarray(labels)
    out = np.zeros_like(labels, dtype=np.int32)
    next_id = 1
    pieces = []
    for lab in np.unique(labels):
        if lab <= 0:
            continue
        comp, n = ndimage.label(labels == lab, structure=FOUR_CONNECTED)
        for j in range(1, n + 1):
            mask = comp == j
            if int(mask.sum()) < min_area:
                continue
            first = np.flatnonzero(mask.ravel())[0]
            pieces.append((first, mask))
    for _, mask in sorted(pieces, key=lambda t: t[0]):
        out[mask] = next_id
        next_id += 1
    return out


def _ellipse_mask(shape, center, a, b, theta):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    dy = yy - center[0]
    dx = xx - center[1]
    ct, st = np.cos(theta), np.sin(theta)
    u = (dx * ct + dy * st) / a
    v = (-dx * st + dy * ct) / b
    return u * u + v * v <= 1.0


def place_nuclei(rng, cfg, density, radius_range, elong_range):
    """Drop non-touching ellipses into a patch and return the label map.

    Overlap with already-placed nuclei (dilated by 1 px to impose a gap)
    is carved away from each candidate; only its largest 4-connected
    remnant survives, and remnants below min_area are discarded.
    """
    size = cfg.patch_size
    labels = np.zeros((size, size), dtype=np.int32)
    count = rng.poisson(density * (size * size) / 4096.0)
    next_id = 1
    for _ in range(count):
        center = rng.uniform(2, size - 2, size=2)
        a = rng.uniform(*radius_range) * size / 64.0
        b = a * rng.uniform(*elong_range)
        theta = rng.uniform(0, np.pi)
        cand = _ellipse_mask((size, size), center, a, b, theta)
        occupied = ndimage.binary_dilation(labels > 0, structure=np.ones((3, 3)))
        cand &= ~occupied
        if not cand.any():
            continue
        comp, n = ndimage.label(cand, structure=FOUR_CONNECTED)
        if n > 1:
            areas = ndimage.sum_labels(np.ones_like(comp), comp, index=range(1, n + 1))
            cand = comp == (1 + int(np.argmax(areas)))
        if int(cand.sum()) < cfg.min_area:
            continue
        labels[cand] = next_id
        next_id += 1
    return canonicalize_labels(labels, cfg.min_area)


def render_source(rng, labels, cfg):
    """Fluorescence look: dim noisy background, bright textured nuclei."""
    size = cfg.patch_size
    img = 0.04 + 0.05 * value_noise(rng, (size, size), freq=6)
    tex = value_noise(rng, (size, size), freq=10, octaves=2)
    for lab in range(1, labels.max() + 1):
        mask = labels == lab
        brightness = rng.uniform(0.55, 0.95)
        img[mask] = brightness * (0.75 + 0.45 * tex[mask])
    img = ndimage.gaussian_filter(img, sigma=0.5)
    img = img + rng.normal(0.0, 0.01, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return np.repeat(img[:, :, None], 3, axis=2)


def render_target(rng, labels, style, cfg):
    """Histology look, synthesized in stain-concentration space.

    Nuclei carry hematoxylin, background carries eosin, a small DAB
    tint differentiates hue between recipes.  Because the image is the
    exact exponential of these concentrations, the hematoxylin channel
    recovered by color deconvolution is bright on nuclei by design.
    """
    size = cfg.patch_size
    tex = value_noise(rng, (size, size), freq=style["tex_freq"], octaves=2)
    tex = 1.0 - style["tex_amp"] / 2 + style["tex_amp"] * tex
    fg = labels > 0
    h = np.full((size, size), 0.03)
    for lab in range(1, labels.max() + 1):
        mask = labels == lab
        h[mask] = style["h_conc"] * rng.uniform(0.85, 1.15)
    h *= tex
    e = style["e_bg"] * (0.85 + 0.3 * value_noise(rng, (size, size), freq=5))
    e = np.where(fg, e * 0.3, e)
    d = np.full((size, size), style["d_tint"]) * tex
    conc = np.stack([h, e, d], axis=2)
    rgb = hed_to_rgb(conc, stain=DEFAULT_STAIN_MATRIX)
    rgb = rgb + rng.normal(0.0, 0.008, size=rgb.shape)
    return np.clip(rgb, 0.0, 1.0)


def generate_source_patch(seed, cfg, patch_id=None):
    rng = np.random.default_rng(seed)
    labels = place_nuclei(rng, cfg, cfg.source_density, cfg.source_radius, (0.6, 0.95))
    image = render_source(rng, labels, cfg)
    return Patch(
        image=image,
        labels=labels,
        boundary=boundary_map(labels, cfg.boundary_width),
        domain="source",
        subdomain_id=-1,
        patch_id=patch_id or f"src_{seed}",
        seed=int(seed),
    )


def generate_target_patch(seed, style_id, cfg, patch_id=None):
    if not 0 <= style_id < len(STYLE_TABLE):
        raise ConfigError(f"unknown style id {style_id}")
    rng = np.random.default_rng(seed)
    style = STYLE_TABLE[style_id]
    labels = place_nuclei(rng, cfg, style["density"], cfg.source_radius, style["elong"])
    image = render_target(rng, labels, style, cfg)
    return Patch(
        image=image,
        labels=labels,
        boundary=boundary_map(labels, cfg.boundary_width),
        domain="target",
        subdomain_id=int(style_id),
        patch_id=patch_id or f"tgt_{style_id}_{seed}",
        seed=int(seed),
    )


# --------------------------------------------------------------------------
# Geometric augmentation.  Everything is expressed as an exact index
# gather (nearest neighbor for both image and labels) so augmented label
# maps stay crisp integers, and labels are re-canonicalized afterwards.
# --------------------------------------------------------------------------


def _gather(arr, sy, sx, valid, fill=0):
    out = np.full_like(arr, fill)
    out[valid] = arr[sy[valid], sx[valid]]
    return out


def scale_patch_arrays(image, labels, scale):
    """Zoom about the patch center by `scale`; out-of-range pixels fill 0."""
    h, w = labels.shape
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    sy = np.round(cy + (yy - cy) / scale).astype(np.int64)
    sx = np.round(cx + (xx - cx) / scale).astype(np.int64)
    valid = (sy >= 0) & (sy < h) & (sx >= 0) & (sx < w)
    img = np.zeros_like(image)
    img[valid] = image[sy[valid], sx[valid]]
    lab = _gather(labels, sy, sx, valid)
    return img, lab


def augment_patch(patch, rng, cfg, scale_range=(0.85, 1.2)):
    """Random flip / 90-degree rotation / central rescale of a patch.

    Returns a new Patch with boundary recomputed and labels
    re-canonicalized (rescaling can shrink instances below min_area).
    """
    image = patch.image.copy()
    labels = patch.labels.copy()
    if rng.random() < 0.5:
        image, labels = image[:, ::-1], labels[:, ::-1]
    if rng.random() < 0.5:
        image, labels = image[::-1, :], labels[::-1, :]
    k = int(rng.integers(0, 4))
    if k:
        image = np.rot90(image, k)
        labels = np.rot90(labels, k)
    if rng.random() < 0.5:
        s = rng.uniform(*scale_range)
        image, labels = scale_patch_arrays(np.ascontiguousarray(image), np.ascontiguousarray(labels), s)
    labels = canonicalize_labels(labels, cfg.min_area)
    return Patch(
        image=np.ascontiguousarray(image),
        labels=labels,
        boundary=boundary_map(labels, cfg.boundary_width),
        domain=patch.domain,
        subdomain_id=patch.subdomain_id,
        patch_id=patch.patch_id,  # an augmented view is still the same sample
        seed=patch.seed,
    )
