import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from divsal import kernels
from divsal.metrics import THRESHOLDS

pytestmark = pytest.mark.skipif(not kernels.HAS_NUMBA, reason="numba unavailable")

probs = arrays(np.float64, (6, 7), elements=st.floats(0.0, 1.0))
masks = arrays(np.uint8, (6, 7), elements=st.integers(0, 1))


@settings(max_examples=60, deadline=None)
@given(probs, masks)
def test_threshold_counts_backends_agree(pred, gt):
    tp_nb, fp_nb = kernels.threshold_counts(pred, gt, THRESHOLDS, use_numba=True)
    tp_np, fp_np = kernels.threshold_counts(pred, gt, THRESHOLDS, use_numba=False)
    np.testing.assert_array_equal(tp_nb, tp_np)
    np.testing.assert_array_equal(fp_nb, fp_np)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 5, 3), elements=st.floats(0.0, 1.0)))
def test_entropy_maps_backends_agree(stack):
    up_nb, ua_nb = kernels.entropy_maps(stack, use_numba=True)
    up_np, ua_np = kernels.entropy_maps(stack, use_numba=False)
    np.testing.assert_allclose(up_nb, up_np, atol=1e-14)
    np.testing.assert_allclose(ua_nb, ua_np, atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(arrays(np.uint8, (9, 11), elements=st.integers(0, 1)), st.integers(0, 3), st.booleans())
def test_binary_morph_backends_agree(mask, radius, dilate):
    a = kernels.binary_morph(mask, radius, dilate, use_numba=True)
    b = kernels.binary_morph(mask, radius, dilate, use_numba=False)
    np.testing.assert_array_equal(a, b)


def test_dilate_then_single_pixel_grows_to_disk():
    m = np.zeros((9, 9), np.uint8)
    m[4, 4] = 1
    d = kernels.binary_morph(m, 2, dilate=True)
    assert d.sum() == len(kernels.disk_offsets(2)) == 13
    assert kernels.binary_morph(d, 2, dilate=False).sum() == 1


def test_erosion_treats_outside_as_background():
    m = np.ones((5, 5), np.uint8)
    e = kernels.binary_morph(m, 1, dilate=False)
    assert e[0].sum() == 0 and e[2, 2] == 1
