import numpy as np
import pytest

from ifssnet.baselines import fill_between_slices, nearest_annotation, signed_distance, zero_order_propagate
from ifssnet.volume import AnnotationSchedule, MaskVolume


def disc(radius, size=24):
    yy, xx = np.mgrid[:size, :size] - (size - 1) / 2
    return (np.hypot(yy, xx) <= radius).astype(np.uint8)


def equivalent_radius(mask):
    return np.sqrt(mask.sum() / np.pi)


def test_nearest_annotation_ties_to_lower():
    np.testing.assert_array_equal(nearest_annotation(11, np.array([0, 10])), [0] * 6 + [10] * 5)
    np.testing.assert_array_equal(nearest_annotation(5, np.array([2])), [2] * 5)


def test_zero_order_cases(rng):
    data = (rng.random((11, 4, 4)) > 0.5).astype(np.uint8)
    np.testing.assert_array_equal(zero_order_propagate(data, range(11)).data, data)
    out = zero_order_propagate(data, [0]).data
    assert all(np.array_equal(s, data[0]) for s in out)
    out = zero_order_propagate(data, [0, 10]).data
    np.testing.assert_array_equal(out[4], data[0])
    np.testing.assert_array_equal(out[6], data[10])
    with pytest.raises(ValueError):
        zero_order_propagate(data, [])


def test_zero_order_keeps_spacing():
    m = MaskVolume(np.zeros((3, 2, 2), np.uint8), (0.5, 0.25, 0.25))
    assert zero_order_propagate(m, AnnotationSchedule(3, (1,))).spacing == (0.5, 0.25, 0.25)


def test_fbs_concentric_discs():
    data = np.zeros((9, 24, 24), np.uint8)
    data[0], data[8] = disc(4), disc(8)
    out = fill_between_slices(data, [0, 8]).data
    assert abs(equivalent_radius(out[4]) - 6) <= 0.5
    areas = [s.sum() for s in out]
    assert areas == sorted(areas)
    for j in range(8):
        assert np.all(out[j] <= out[j + 1])


def test_fbs_identical_and_dense(rng):
    data = np.zeros((5, 24, 24), np.uint8)
    data[0] = data[4] = disc(5)
    out = fill_between_slices(data, [0, 4]).data
    assert all(np.array_equal(s, disc(5)) for s in out)
    dense = (rng.random((4, 6, 6)) > 0.5).astype(np.uint8)
    np.testing.assert_array_equal(fill_between_slices(dense, range(4)).data, dense)


def test_fbs_reproduces_annotations_and_extrapolates(rng):
    data = np.zeros((12, 24, 24), np.uint8)
    data[2], data[7] = disc(3), disc(6)
    out = fill_between_slices(data, [2, 7]).data
    np.testing.assert_array_equal(out[2], data[2])
    np.testing.assert_array_equal(out[7], data[7])
    np.testing.assert_array_equal(out[0], data[2])
    np.testing.assert_array_equal(out[11], data[7])


def test_fbs_single_annotation_falls_back():
    data = np.zeros((4, 6, 6), np.uint8)
    data[1, 2:4, 2:4] = 1
    out = fill_between_slices(data, [1])
    assert out.fallback
    assert all(np.array_equal(s, data[1]) for s in out.data)


def test_signed_distance_sign_convention():
    m = disc(3, 12)
    phi = signed_distance(m)
    assert np.all(phi[m == 1] > 0) and np.all(phi[m == 0] < 0)
    assert np.all(signed_distance(np.zeros((3, 3))) == -np.inf)
