"""Color deconvolution tests built from closed-form constructions."""

import numpy as np
import pytest

from ocdaseg.exceptions import ConfigError
from ocdaseg.hed import (
    DEFAULT_STAIN_MATRIX,
    OD_EPS,
    StainMatrix,
    extract_h_channel,
    hed_to_rgb,
    rgb_to_hed,
)


def test_rows_are_unit_norm():
    norms = np.linalg.norm(DEFAULT_STAIN_MATRIX.matrix, axis=1)
    assert np.allclose(norms, 1.0, atol=1e-12)


def test_unnormalized_rows_get_normalized():
    sm = StainMatrix(2.0 * DEFAULT_STAIN_MATRIX.matrix)
    assert np.allclose(sm.matrix, DEFAULT_STAIN_MATRIX.matrix)


def test_white_maps_to_zero_concentrations():
    img = np.ones((4, 4, 3))
    hed = rgb_to_hed(img)
    assert np.all(hed == 0.0)


def test_pure_hematoxylin_pixel():
    # A pixel whose optical density equals exactly one unit of the
    # hematoxylin signature must deconvolve to concentrations (1, 0, 0).
    h_row = DEFAULT_STAIN_MATRIX.matrix[0]
    pixel = np.power(10.0, -h_row)
    hed = rgb_to_hed(pixel)
    assert abs(hed[0] - 1.0) < 1e-6
    assert abs(hed[1]) < 1e-6
    assert abs(hed[2]) < 1e-6


def test_od_space_linearity():
    # Concentrations combine linearly in OD space: a pixel synthesized
    # from a known mixture must deconvolve back to that mixture.
    rng = np.random.default_rng(7)
    for _ in range(50):
        mix = rng.uniform(0.0, 0.8, size=3)
        od = mix @ DEFAULT_STAIN_MATRIX.matrix
        pixel = np.power(10.0, -od)
        if np.any(pixel < OD_EPS):
            continue
        rec = rgb_to_hed(pixel)
        assert np.max(np.abs(rec - mix)) <= 1e-9


def test_round_trip_error_bound():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        img = rng.uniform(0.05, 1.0, size=(16, 16, 3))
        rec = hed_to_rgb(rgb_to_hed(img))
        worst = max(worst, float(np.max(np.abs(rec - img))))
    assert worst < 2.0 / 255.0


def test_round_trip_is_finite_even_on_black():
    img = np.zeros((4, 4, 3))
    hed = rgb_to_hed(img)
    assert np.all(np.isfinite(hed))
    assert np.all(np.isfinite(hed_to_rgb(hed)))


def test_h_channel_normalization():
    rng = np.random.default_rng(3)
    img = rng.uniform(0.05, 1.0, size=(32, 32, 3))
    h = extract_h_channel(img)
    assert h.shape == (32, 32)
    assert h.min() == 0.0
    assert h.max() == 1.0


def test_h_channel_constant_input_is_zero():
    img = np.full((8, 8, 3), 0.4)
    assert np.all(extract_h_channel(img) == 0.0)


def test_nuclei_brighter_than_background_in_h():
    # Hematoxylin-heavy pixels (blue-purple) must land above
    # eosin-heavy ones (pink) after H extraction.
    img = np.empty((2, 1, 3))
    img[0, 0] = np.power(10.0, -0.9 * DEFAULT_STAIN_MATRIX.matrix[0])
    img[1, 0] = np.power(10.0, -0.9 * DEFAULT_STAIN_MATRIX.matrix[1])
    h = extract_h_channel(img)
    assert h[0, 0] > h[1, 0]


def test_rejects_zero_row():
    rows = DEFAULT_STAIN_MATRIX.matrix.copy()
    rows[1] = 0.0
    with pytest.raises(ConfigError):
        StainMatrix(rows)


def test_rejects_singular_matrix():
    rows = DEFAULT_STAIN_MATRIX.matrix.copy()
    rows[2] = rows[0]
    with pytest.raises(ConfigError):
        StainMatrix(rows)


def test_from_flat_round_trip_and_size_check():
    flat = DEFAULT_STAIN_MATRIX.matrix.ravel()
    sm = StainMatrix.from_flat(flat)
    assert np.allclose(sm.matrix, DEFAULT_STAIN_MATRIX.matrix)
    with pytest.raises(ConfigError):
        StainMatrix.from_flat(flat[:6])
