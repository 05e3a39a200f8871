import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from geoguide.grid import (
    ComponentSelection,
    GridError,
    LabelGrid,
    argmax_harden,
    coordinate_field,
    load_vgf,
    save_vgf,
    select_components,
    soft_binarize,
)


def voxel(*values):
    return np.asarray(values, dtype=np.float64).reshape(-1, 1, 1, 1)


def test_soft_binarize_near_one_hot():
    out = soft_binarize(voxel(1, 0, 0), 0.01).ravel()
    # exp(100) / (exp(100) + 2) computed directly
    expected_first = 1.0 / (1.0 + 2.0 * np.exp(-100.0))
    assert abs(out[0] - expected_first) < 1e-30
    assert abs(out[1] - np.exp(-100.0) / (1 + 2 * np.exp(-100.0))) < 1e-30


@pytest.mark.parametrize("t", [1e-3, 0.01, 1.0, 50.0])
def test_soft_binarize_tie(t):
    np.testing.assert_array_equal(soft_binarize(voxel(0.5, 0.5), t).ravel(), [0.5, 0.5])


def test_soft_binarize_sums_to_one(rng):
    out = soft_binarize(rng.random((4, 6, 5, 7)), 0.01)
    assert np.all(np.abs(out.sum(axis=0) - 1) < 1e-6)


@pytest.mark.parametrize("t", [0.0, -1.0])
def test_soft_binarize_rejects_temperature(t):
    with pytest.raises(GridError):
        soft_binarize(voxel(1, 0), t)


def test_soft_binarize_idempotent_near_one_hot(rng):
    labels = rng.integers(0, 4, size=(5, 5, 5))
    onehot = (labels[None] == np.arange(4)[:, None, None, None]).astype(float)
    once = soft_binarize(onehot, 0.01)
    assert np.max(np.abs(once - onehot)) < 1e-6
    twice = soft_binarize(once, 0.01)
    assert np.max(np.abs(twice - once)) < 1e-6


def test_coordinate_field_endpoints():
    p = coordinate_field((4, 5, 6))
    assert p.shape == (4, 5, 6, 3)
    for axis in range(3):
        assert p[..., axis].min() == 0.0 and p[..., axis].max() == 1.0
    np.testing.assert_array_equal(p[:, 0, 0, 0], [0, 1 / 3, 2 / 3, 1])


def one_hot(rng, channels=4, shape=(6, 6, 6)):
    labels = rng.integers(0, channels, size=shape)
    return (labels[None] == np.arange(channels)[:, None, None, None]).astype(float)


def test_select_singleton_equals_channel(rng):
    g = one_hot(rng)
    omega = select_components(g, ComponentSelection(((2,),)))
    np.testing.assert_array_equal(omega[0], g[2])


def test_select_union_mass_adds(rng):
    g = one_hot(rng)
    omega = select_components(g, ComponentSelection(((1, 3),)))
    assert omega.max() <= 1
    assert omega.sum() == g[1].sum() + g[3].sum()


def test_select_linear(rng):
    g = rng.random((5, 4, 4, 4))
    union = select_components(g, ComponentSelection(((1, 2, 4),)))[0]
    singles = select_components(g, ComponentSelection(((1,), (2,), (4,))))
    np.testing.assert_array_equal(union, singles[0] + singles[1] + singles[2])


def test_selection_errors():
    with pytest.raises(GridError):
        ComponentSelection(((),))
    with pytest.raises(GridError):
        ComponentSelection(((0,),))
    with pytest.raises(GridError):
        select_components(np.zeros((3, 2, 2, 2)), ComponentSelection(((5,),)))


def test_argmax_harden_examples():
    np.testing.assert_array_equal(argmax_harden(voxel(0.7, 0.2, 0.1)).ravel(), [1, 0, 0])
    np.testing.assert_array_equal(argmax_harden(voxel(0.5, 0.5)).ravel(), [1, 0])


def test_hardened_is_one_hot(rng):
    g = LabelGrid(argmax_harden(rng.random((4, 5, 5, 5))))
    assert g.is_one_hot()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 2, 3, 2), elements=st.floats(0, 1)))
def test_harden_commutes_with_soft_binarize(values):
    top2 = np.sort(values, axis=0)[-2:]
    margin = (top2[1] - top2[0]).min()
    if margin <= 1e-9:
        return
    np.testing.assert_array_equal(argmax_harden(soft_binarize(values, 0.01)), argmax_harden(values))


def test_vgf_roundtrip(tmp_path, rng):
    g = LabelGrid(one_hot(rng).astype(np.uint8), ("bg", "a", "b", "c"), 2.0)
    save_vgf(g, tmp_path / "x")
    back = load_vgf(tmp_path / "x.json")
    assert back.labels == g.labels and back.voxel_edge == 2.0
    np.testing.assert_array_equal(back.data, g.data)
    # documented linearization: ((c*H + i)*W + j)*D + k
    raw = np.frombuffer((tmp_path / "x.raw").read_bytes(), dtype=np.uint8)
    c, i, j, k = 2, 1, 4, 3
    assert raw[((c * 6 + i) * 6 + j) * 6 + k] == g.data[c, i, j, k]


def test_vgf_soft_roundtrip(tmp_path, rng):
    g = LabelGrid(rng.random((3, 4, 4, 4)).astype(np.float32))
    save_vgf(g, tmp_path / "soft")
    np.testing.assert_array_equal(load_vgf(tmp_path / "soft").data, g.data)


def test_vgf_truncated_payload(tmp_path, rng):
    g = LabelGrid(one_hot(rng).astype(np.uint8))
    save_vgf(g, tmp_path / "t")
    (tmp_path / "t.raw").write_bytes(b"\0" * 10)
    with pytest.raises(GridError):
        load_vgf(tmp_path / "t")
