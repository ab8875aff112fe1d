"""Edge backbone contracts: dyadic sizes, value range, localization."""

import numpy as np
import pytest
from scipy import ndimage

from edgepatch import edges
from edgepatch.data import Modality, PersonImage
from edgepatch.errors import ModelError


def test_level_shapes_are_dyadic():
    img = np.random.default_rng(0).uniform(size=(256, 128, 3)).astype(np.float32)
    stack = edges.detect_edges(img)
    assert [lv.shape for lv in stack.levels] == [
        (256, 128), (128, 64), (64, 32), (32, 16), (16, 8)]


def test_values_in_unit_interval(rng):
    img = rng.uniform(size=(64, 32, 3))
    stack = edges.detect_edges(img)
    for lv in stack.levels:
        assert lv.min() >= 0.0
        assert lv.max() <= 1.0 + 1e-12


def test_constant_image_has_no_edges():
    for value in (0.0, 0.5, 1.0):
        img = np.full((64, 32, 3), value, dtype=np.float32)
        stack = edges.detect_edges(img)
        for lv in stack.levels:
            assert lv.mean() < 0.02


def test_rectangle_mass_concentrates_on_boundary():
    # oracle: smoothed gradient magnitude localizes at the rectangle edge
    img = np.zeros((64, 32), dtype=np.float64)
    img[20:44, 8:24] = 1.0
    stack = edges.detect_edges(img[:, :, None])
    l1 = stack.levels[0]

    boundary = np.zeros_like(img, dtype=bool)
    eroded = ndimage.binary_erosion(img > 0.5)
    dilated = ndimage.binary_dilation(img > 0.5)
    boundary |= dilated & ~eroded
    near = ndimage.binary_dilation(boundary, iterations=2)
    frac = l1[near].sum() / l1.sum()
    assert frac >= 0.8

    # and the oracle itself agrees on where the mass is
    blurred = ndimage.gaussian_filter(img, 1.0)
    gy, gx = np.gradient(blurred)
    mag = np.hypot(gx, gy)
    assert mag[near].sum() / mag.sum() >= 0.8


def test_small_input_rejected():
    img = np.zeros((8, 8, 3), dtype=np.float32)
    with pytest.raises(ModelError, match="below minimum resolution"):
        edges.detect_edges(img)
    with pytest.raises(ModelError, match="multiple of 16"):
        edges.detect_edges(np.zeros((18, 18, 3), dtype=np.float32))


def test_detect_edges_deterministic(rng):
    img = rng.uniform(size=(32, 32, 3))
    a = edges.detect_edges(img)
    b = edges.detect_edges(img)
    for x, y in zip(a.levels, b.levels):
        assert np.array_equal(x, y)


def test_accepts_person_image_both_modalities(toy_dataset):
    for im in toy_dataset.images[:2]:
        stack = edges.detect_edges(im)
        assert len(stack.levels) == 5


def test_edges_respond_to_silhouette(toy_dataset):
    # person pixels differ from background, so edge mass on the body
    # boundary should dominate a constant border region
    im = next(i for i in toy_dataset.images if i.modality is Modality.VISIBLE)
    stack = edges.detect_edges(im)
    assert stack.levels[0].max() > 0.1
