"""RGB <-> HED stain-space conversion via optical-density deconvolution.

The boundary branch of the shape-preservation module works on the
hematoxylin channel, where nuclei stand out against eosin-dominated
background.  Conversion follows the classic color deconvolution recipe:
optical density OD(p) = -log10(p) is linear in stain concentrations,
so concentrations are recovered by multiplying with the inverse of the
stain matrix.
"""

import numpy as np

from ocdaseg.exceptions import ConfigError

# Floor inside the log; pure black would otherwise produce infinities.
OD_EPS = 1e-6

# Ruifrok-Johnston H&E-DAB optical-density basis (rows: hematoxylin,
# eosin, DAB), the de facto standard definition of HED space.
RUIFROK_JOHNSTON_RGB = np.array(
    [
        [0.65, 0.70, 0.29],
        [0.07, 0.99, 0.11],
        [0.27, 0.57, 0.78],
    ],
    dtype=np.float64,
)

_MAX_CONDITION = 1e6


class StainMatrix:
    """Unit-row-norm stain basis together with its inverse.

    Rows are the optical-density signatures of hematoxylin, eosin and DAB.
    Rows passed in are normalized to unit Euclidean norm; a singular or
    near-singular basis is rejected.
    """

    def __init__(self, rows=None):
        if rows is None:
            rows = RUIFROK_JOHNSTON_RGB
        rows = np.asarray(rows, dtype=np.float64)
        if rows.shape != (3, 3):
            raise ConfigError(f"stain matrix must be 3x3, got {rows.shape}")
        norms = np.linalg.norm(rows, axis=1)
        if np.any(norms < 1e-12):
            raise ConfigError("stain matrix has a zero row")
        self.matrix = rows / norms[:, None]
        if np.linalg.cond(self.matrix) > _MAX_CONDITION:
            raise ConfigError("stain matrix is singular or near-singular")
        self.inverse = np.linalg.inv(self.matrix)

    @classmethod
    def from_flat(cls, values):
        """Build from 9 row-major floats (config-file override format)."""
        values = np.asarray(values, dtype=np.float64)
        if values.size != 9:
            raise ConfigError(f"expected 9 stain matrix entries, got {values.size}")
        return cls(values.reshape(3, 3))


DEFAULT_STAIN_MATRIX = StainMatrix()


def rgb_to_hed(pixels, stain=None):
    """Convert an (..., 3) RGB array in [0, 1] to stain concentrations.

    concentrations = OD(pixels) @ inverse stain matrix, with
    OD(p) = -log10(max(p, OD_EPS)).  Output is finite everywhere.
    """
    stain = stain or DEFAULT_STAIN_MATRIX
    pixels = np.asarray(pixels, dtype=np.float64)
    od = -np.log10(np.maximum(pixels, OD_EPS))
    return od @ stain.inverse


def hed_to_rgb(concentrations, stain=None):
    """Map stain concentrations back to RGB pixels, clipped to [0, 1]."""
    stain = stain or DEFAULT_STAIN_MATRIX
    concentrations = np.asarray(concentrations, dtype=np.float64)
    od = concentrations @ stain.matrix
    return np.clip(np.power(10.0, -od), 0.0, 1.0)


def extract_h_channel(pixels, stain=None):
    """Hematoxylin concentration map, min-max normalized per patch to [0, 1].

    A constant input (zero dynamic range) maps to an all-zero channel.
    """
    h = rgb_to_hed(pixels, stain=stain)[..., 0]
    lo, hi = h.min(), h.max()
    if hi - lo < 1e-12:
        return np.zeros_like(h)
    return (h - lo) / (hi - lo)
