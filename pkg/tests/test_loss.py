import json

import numpy as np
import pytest

from geoguide.grid import ComponentSelection, LabelGrid, coordinate_field, save_vgf, select_components, soft_binarize
from geoguide.loss import (
    ConstraintError,
    ConstraintSet,
    geometric_loss,
    load_constraints,
    loss_gradient_wrt_grid,
)
from geoguide.moments import STABILIZER, extract_moments
from geoguide.phantom import rasterize_ellipsoid


def iso_shape(e):
    return np.broadcast_to(np.eye(3) / 3, (e, 3, 3)).copy()


def random_constraints(rng, channels, e=2, lambdas=(1e3, 1e2, 1e1)):
    groups = []
    for _ in range(e):
        size = rng.integers(1, 3)
        groups.append(tuple(rng.choice(np.arange(1, channels), size=size, replace=False)))
    a = rng.normal(size=(e, 3, 3))
    spd = a @ np.swapaxes(a, -1, -2) + 0.1 * np.eye(3)
    spd /= np.trace(spd, axis1=-2, axis2=-1)[:, None, None]
    return ConstraintSet(
        ComponentSelection(tuple(groups)),
        rng.uniform(0.05, 0.4, size=e),
        rng.uniform(0.2, 0.8, size=(e, 3)),
        spd,
        rng.random(e) < 0.8,
        rng.random(e) < 0.8,
        np.ones(e, bool),
        lambdas,
        1.0,
    )


def test_zero_loss_at_target(rng):
    shape = (6, 6, 6)
    sel = ComponentSelection(((1,), (2, 3)))
    fields = select_components(rng.random((4, *shape)), sel)
    m = extract_moments(fields, coordinate_field(shape))
    cs = ConstraintSet.from_moments(m, sel)
    assert geometric_loss(m, cs).total == 0.0


def test_size_term_default_weight():
    sel = ComponentSelection(((1,),))
    cs = ConstraintSet(sel, [0.11], np.zeros((1, 3)), iso_shape(1), True, False, False, (1e7, 1e5, 1e4))
    shape = (10, 10, 10)
    field = np.zeros((1, *shape))
    field.reshape(-1)[:120] = 1.0  # M = 0.12, |M - target| = 0.01
    m = extract_moments(field, coordinate_field(shape))
    out = geometric_loss(m, cs)
    assert out.total == pytest.approx(1e3, rel=1e-9)
    assert out.size == pytest.approx(1e-4, rel=1e-9)


def test_zero_weights_zero_gradient(rng):
    cs = random_constraints(rng, 4).with_weights(lambdas=(0, 0, 0))
    values = rng.random((4, 5, 5, 5))
    out, grad = loss_gradient_wrt_grid(values, cs, 0.1)
    assert out.total == 0 and np.all(grad == 0)


def _fd_loss(values, cs, t):
    return float(loss_gradient_wrt_grid(values, cs, t)[0].total)


def test_gradient_matches_finite_differences(rng):
    values = rng.random((4, 8, 8, 8))
    cs = random_constraints(rng, 4)
    t = 0.3
    _, grad = loss_gradient_wrt_grid(values, cs, t)
    h = 1e-4
    flat = values.reshape(-1)
    for idx in rng.choice(flat.size, size=25, replace=False):
        plus, minus = flat.copy(), flat.copy()
        plus[idx] += h
        minus[idx] -= h
        fd = (_fd_loss(plus.reshape(values.shape), cs, t) - _fd_loss(minus.reshape(values.shape), cs, t)) / (2 * h)
        an = grad.reshape(-1)[idx]
        assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an), 1e-8)


def test_mass_push_direction():
    shape = (12, 12, 12)
    ball = rasterize_ellipsoid((0.5,) * 3, (0.25,) * 3, np.eye(3), shape).astype(float)
    values = np.stack([1 - ball, ball]) * 0.6 + 0.2  # soft, winner margin 0.2
    sel = ComponentSelection(((1,),))
    m = extract_moments(select_components(soft_binarize(values, 0.1), sel), coordinate_field(shape))
    cs = ConstraintSet(sel, m.mass * 1.5, np.zeros((1, 3)), iso_shape(1), True, False, False)
    _, grad = loss_gradient_wrt_grid(values, cs, 0.1)
    # descent direction raises the selected channel where it is present
    assert grad[1][ball > 0].mean() < 0


def test_term_linearity(rng):
    values = rng.random((4, 6, 6, 6))
    cs = random_constraints(rng, 4, lambdas=(3.0, 5.0, 7.0))
    _, full = loss_gradient_wrt_grid(values, cs, 0.2)
    parts = [loss_gradient_wrt_grid(values, cs.with_weights(lambdas=l), 0.2)[1]
             for l in ((3, 0, 0), (0, 5, 0), (0, 0, 7))]
    np.testing.assert_allclose(sum(parts), full, atol=1e-12 * np.abs(full).max(), rtol=0)


def test_size_only_matches_full_with_zeroed_terms(rng):
    values = rng.random((4, 6, 6, 6))
    cs = random_constraints(rng, 4, lambdas=(3.0, 0.0, 0.0))
    only_mass = ConstraintSet(cs.selection, cs.mass, cs.centroid, cs.shape, cs.mass_on, False, False, cs.lambdas)
    a = loss_gradient_wrt_grid(values, cs, 0.2)[1]
    b = loss_gradient_wrt_grid(values, only_mass, 0.2)[1]
    np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)


def test_shape_loss_invariant_to_mass_scaling():
    shape = (20, 20, 20)
    coords = coordinate_field(shape)
    field = rasterize_ellipsoid((0.5,) * 3, (0.3, 0.2, 0.15), np.eye(3), shape).astype(float)[None]
    from geoguide.moments import moment_gradients

    sel = ComponentSelection(((1,),))
    cs = ConstraintSet(sel, [0.0], np.zeros((1, 3)), iso_shape(1), False, False, True, (0, 0, 1.0))
    from geoguide.loss import geometric_loss_cotangents

    for scale in (0.3, 0.7, 1.0):
        f = field * scale
        m = extract_moments(f, coords, stabilizer=STABILIZER)
        _, _, g_shape = geometric_loss_cotangents(m, cs)
        g = moment_gradients(f, coords, shape_cot=g_shape, stabilizer=STABILIZER)
        # directional derivative along f itself (uniform rescaling)
        assert abs((g * f).sum()) < 1e-6


def test_nonnegative_and_zero_iff_match(rng):
    shape = (6, 6, 6)
    cs = random_constraints(rng, 4)
    for _ in range(5):
        values = rng.random((4, *shape))
        assert loss_gradient_wrt_grid(values, cs, 0.3)[0].total >= 0


def test_empty_component_gated():
    shape = (6, 6, 6)
    sel = ComponentSelection(((1,),))
    cs = ConstraintSet(sel, [0.1], [[0.5, 0.5, 0.5]], iso_shape(1), True, True, True)
    values = np.zeros((2, *shape))
    values[0] = 1.0
    out, grad = loss_gradient_wrt_grid(values, cs, 0.01)
    assert not out.gate[0]
    assert out.position == 0 and out.shape == 0
    assert np.all(np.isfinite(grad))


def test_invalid_shape_target():
    sel = ComponentSelection(((1,),))
    with pytest.raises(ConstraintError):
        ConstraintSet(sel, [0.1], np.zeros((1, 3)), 2 * iso_shape(1), False, False, True)


def test_constraint_file_with_reference(tmp_path):
    shape = (10, 10, 10)
    ball = rasterize_ellipsoid((0.5,) * 3, (0.3,) * 3, np.eye(3), shape)
    data = np.stack([~ball, ball]).astype(np.uint8)
    save_vgf(LabelGrid(data, ("background", "RV")), tmp_path / "ref")
    doc = {
        "groups": [{"labels": ["RV"], "mass": {"on": True}, "centroid": {"on": True}, "shape": {"on": False}}],
        "lambdas": [1, 2, 3],
        "w": 0.5,
        "reference": {"grid": "ref.json", "multipliers": {"mass": 2.0}},
    }
    (tmp_path / "c.json").write_text(json.dumps(doc))
    cs = load_constraints(tmp_path / "c.json")
    assert cs.mass[0] == pytest.approx(2 * ball.mean())
    np.testing.assert_allclose(cs.centroid[0], 0.5, atol=1e-12)
    assert cs.lambdas == (1, 2, 3) and cs.w == 0.5
    assert list(cs.shape_on) == [False]


def test_constraint_file_errors(tmp_path):
    (tmp_path / "bad.json").write_text(json.dumps({"groups": [{"channels": [1], "mass": {"on": True}}]}))
    with pytest.raises(ConstraintError, match=r"groups\[0\]\.mass"):
        load_constraints(tmp_path / "bad.json")
