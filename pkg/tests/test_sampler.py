import numpy as np
import pytest
import torch

from geoguide.diffusion import (
    Architecture,
    NetworkDenoiser,
    NoiseSchedule,
    PointDenoiser,
    SamplerConfig,
    build_network,
    decode,
    encode,
    guided_sample,
    inpaint,
    sample,
)
from geoguide.diffusion.checkpoint import load_checkpoint, read_header, save_checkpoint
from geoguide.diffusion.sampler import SamplerError
from geoguide.diffusion.schedule import ScheduleError
from geoguide.diffusion.train import TrainingConfig, train, validation_loss
from geoguide.grid import ComponentSelection, coordinate_field, select_components
from geoguide.loss import ConstraintSet
from geoguide.moments import extract_moments
from geoguide.phantom import default_spec, generate_array

TINY = Architecture(channels=5, widths=(8, 16, 16), emb_dim=16, groups=4)


@pytest.fixture(scope="module")
def phantom16():
    return generate_array(default_spec(0, (16, 16, 16)), 1)[0]


@pytest.fixture(scope="module")
def tiny_denoiser():
    return NetworkDenoiser(build_network(TINY, seed=0))


def rv_constraints(grid, w=1.0, lambdas=(1e7, 1e5, 1e4), scale=1.0):
    sel = ComponentSelection(((3,),), ("RV",))
    m = extract_moments(select_components(grid[None].astype(float), sel), coordinate_field(grid.shape[1:]))
    return ConstraintSet.from_moments(m, sel, lambdas=lambdas, w=w, mass_scale=scale).take(0)


# -- schedule ------------------------------------------------------------------


def test_schedule_endpoints_exact():
    s = NoiseSchedule(50, 1e-2, 80.0, 3.0).sigmas
    assert len(s) == 51
    assert s[0] == 80.0 and s[49] == 0.01 and s[50] == 0.0
    assert np.all(np.diff(s) < 0)


def test_schedule_matches_power_interpolation():
    sched = NoiseSchedule(7)
    i = np.arange(7)
    expected = (80 ** (1 / 3) + i / 6 * (0.01 ** (1 / 3) - 80 ** (1 / 3))) ** 3
    np.testing.assert_allclose(sched.sigmas[:-1], expected, rtol=1e-13)


@pytest.mark.parametrize("kw", [{"steps": 1}, {"sigma_min": 0.0}, {"sigma_min": 90.0}, {"rho": 0.0}])
def test_schedule_rejects_bad_parameters(kw):
    with pytest.raises(ScheduleError):
        NoiseSchedule(**kw)


# -- encoding and network ------------------------------------------------------------


def test_encode_decode_roundtrip(rng):
    x = rng.random((2, 3, 4, 4, 4))
    for a in (1.0, 4.0):
        np.testing.assert_allclose(decode(encode(x, a), a), x, atol=1e-15)
    assert encode(np.array([0.0, 1.0]), 4.0).tolist() == [-4.0, 4.0]


def test_denoiser_shape_and_small_sigma_skip(rng, tiny_denoiser):
    z = rng.normal(size=(2, 5, 16, 16, 16))
    out = tiny_denoiser(z, 1.0)
    assert out.shape == z.shape
    near = tiny_denoiser(z, 1e-4)
    assert np.linalg.norm(near - z) / np.linalg.norm(z) < 1e-3


def test_denoiser_vjp_matches_autograd(rng):
    net = build_network(TINY, seed=1).double()
    d = NetworkDenoiser(net)
    z = rng.normal(size=(1, 5, 16, 16, 16))
    cot = rng.normal(size=z.shape)
    x = torch.from_numpy(z).requires_grad_(True)
    sigma = torch.full((1,), 0.7, dtype=torch.float64)
    (g_ref,) = torch.autograd.grad((net(x, sigma) * torch.from_numpy(cot)).sum(), x)
    _, vjp = d.with_vjp(z, 0.7)
    g = vjp(cot)
    np.testing.assert_allclose(g, g_ref.numpy(), rtol=1e-10, atol=1e-12)


def test_checkpoint_roundtrip(tmp_path, rng):
    cfg = TrainingConfig(arch=TINY)
    net = build_network(TINY, seed=3)
    path = save_checkpoint(net, cfg, tmp_path / "m.ggck", {"note": "x"})
    header, _ = read_header(path)
    assert header["training_hash"] == cfg.digest()
    assert header["sigma_data"] == 1.0
    again, cfg2 = load_checkpoint(path)
    assert cfg2 == cfg
    z = rng.normal(size=(1, 5, 16, 16, 16))
    np.testing.assert_array_equal(NetworkDenoiser(net)(z, 2.0), NetworkDenoiser(again)(z, 2.0))


# -- sampler ------------------------------------------------------------------------


def test_first_state_has_sigma_max_spread():
    rng = np.random.default_rng([0, 0])
    z0 = 80.0 * rng.standard_normal((5, 16, 16, 16))
    assert z0.std() == pytest.approx(80.0, rel=0.02)


@pytest.mark.parametrize("solver", ["ode", "sde"])
def test_point_denoiser_recovers_point(phantom16, solver):
    d = PointDenoiser(encode(phantom16))
    res = sample(d, NoiseSchedule(50), phantom16.shape, n=3, seed=7, cfg=SamplerConfig(solver=solver))
    agreement = (res.grids == phantom16[None]).all(axis=1).mean()
    assert agreement >= 0.99


def test_sampling_is_deterministic_and_batch_independent(tiny_denoiser):
    sched = NoiseSchedule(4)
    shape = (5, 16, 16, 16)
    a = sample(tiny_denoiser, sched, shape, n=3, seed=11, cfg=SamplerConfig(batch_size=3))
    b = sample(tiny_denoiser, sched, shape, n=3, seed=11, cfg=SamplerConfig(batch_size=1))
    np.testing.assert_allclose(a.decoded, b.decoded, atol=1e-5)
    c = sample(tiny_denoiser, sched, shape, n=3, seed=11, cfg=SamplerConfig(batch_size=3))
    assert a.grids.tobytes() == c.grids.tobytes()


def test_zero_weight_guidance_is_bit_identical(tiny_denoiser, phantom16):
    sched = NoiseSchedule(5)
    cs = rv_constraints(phantom16, w=0.0)
    plain = sample(tiny_denoiser, sched, phantom16.shape, n=2, seed=3)
    guided = guided_sample(tiny_denoiser, sched, cs, phantom16.shape, n=2, seed=3)
    assert plain.decoded.tobytes() == guided.decoded.tobytes()
    assert plain.grids.tobytes() == guided.grids.tobytes()


def test_zero_lambdas_is_bit_identical(tiny_denoiser, phantom16):
    sched = NoiseSchedule(5)
    cs = rv_constraints(phantom16, lambdas=(0, 0, 0))
    plain = sample(tiny_denoiser, sched, phantom16.shape, n=1, seed=4)
    guided = guided_sample(tiny_denoiser, sched, cs, phantom16.shape, n=1, seed=4)
    assert plain.decoded.tobytes() == guided.decoded.tobytes()


class GaussianDenoiser(PointDenoiser):
    """Exact denoiser for data distributed as N(point, tau^2 I)."""

    def __init__(self, point, tau=0.5):
        super().__init__(point)
        self.tau2 = tau * tau

    def __call__(self, z, sigma):
        s2 = sigma * sigma
        return (self.tau2 * z + s2 * self.point) / (self.tau2 + s2)

    def with_vjp(self, z, sigma):
        k = self.tau2 / (self.tau2 + sigma * sigma)
        return self(z, sigma), lambda cot: k * np.asarray(cot, dtype=np.float64)


@pytest.mark.parametrize("path", ["full", "clean"])
def test_guidance_moves_mass_toward_target(path):
    # undecided logits: unguided samples fill about half the grid
    shape = (2, 12, 12, 12)
    d = GaussianDenoiser(np.zeros(shape), tau=2.0)
    cs = ConstraintSet(ComponentSelection(((1,),), ("blob",)), [0.3], np.zeros((1, 3)), np.eye(3)[None] / 3,
                       True, False, False)
    cfg = SamplerConfig(gradient_path=path)
    plain = sample(d, NoiseSchedule(20), shape, n=2, seed=0, cfg=cfg)
    guided = guided_sample(d, NoiseSchedule(20), cs, shape, n=2, seed=0, cfg=cfg)
    assert np.all(np.abs(occupancy(plain.grids) - 0.3) > 0.15)
    assert np.all(np.abs(occupancy(guided.grids) - 0.3) < 0.05)
    assert guided.history[-1]["size"] < guided.history[0]["size"]


def test_uncapped_guidance_overshoots():
    shape = (2, 12, 12, 12)
    d = GaussianDenoiser(np.zeros(shape), tau=2.0)
    cs = ConstraintSet(ComponentSelection(((1,),), ("blob",)), [0.3], np.zeros((1, 3)), np.eye(3)[None] / 3,
                       True, False, False)
    wild = guided_sample(d, NoiseSchedule(20), cs, shape, n=2, seed=0, cfg=SamplerConfig(step_cap=1e9))
    assert np.all(occupancy(wild.grids) == 0.0)


def test_step_cap_must_be_positive():
    with pytest.raises(SamplerError):
        SamplerConfig(step_cap=0.0)


def occupancy(grids):
    return grids[:, 1].mean(axis=(1, 2, 3))


def test_guided_history_records_terms(tiny_denoiser, phantom16):
    res = guided_sample(tiny_denoiser, NoiseSchedule(3), rv_constraints(phantom16), phantom16.shape, n=1, seed=0)
    assert [h["step"] for h in res.history] == [0, 1, 2]
    assert {"loss", "size", "position", "shape", "gated", "sigma"} <= set(res.history[0])


def test_clean_gradient_path_runs(tiny_denoiser, phantom16):
    res = guided_sample(tiny_denoiser, NoiseSchedule(3), rv_constraints(phantom16), phantom16.shape, n=1,
                        seed=0, cfg=SamplerConfig(gradient_path="clean"))
    assert res.grids.shape == (1, *phantom16.shape)


def test_batched_targets_must_match_sample_count(tiny_denoiser, phantom16):
    cs = rv_constraints(phantom16)
    batched = ConstraintSet(cs.selection, np.repeat(cs.mass[None], 3, 0), np.repeat(cs.centroid[None], 3, 0),
                            np.repeat(cs.shape[None], 3, 0), True, True, True)
    with pytest.raises(SamplerError):
        guided_sample(tiny_denoiser, NoiseSchedule(2), batched, phantom16.shape, n=2)


def test_bad_sampler_options():
    with pytest.raises(SamplerError):
        SamplerConfig(solver="heun")
    with pytest.raises(SamplerError):
        SamplerConfig(gradient_path="partial")


# -- inpainting --------------------------------------------------------------------


def test_inpaint_empty_mask_returns_known(tiny_denoiser, phantom16):
    mask = np.zeros(phantom16.shape[1:], dtype=np.uint8)
    res = inpaint(tiny_denoiser, NoiseSchedule(4), None, phantom16, mask, n=2, seed=0)
    assert np.array_equal(res.grids, np.broadcast_to(phantom16, res.grids.shape))


def test_inpaint_keeps_outside_of_mask(tiny_denoiser, phantom16):
    mask = np.zeros(phantom16.shape[1:], dtype=np.uint8)
    mask[4:12, 4:12, 4:12] = 1
    res = inpaint(tiny_denoiser, NoiseSchedule(4), rv_constraints(phantom16), phantom16, mask, n=2, seed=0)
    outside = mask == 0
    assert np.array_equal(res.grids[:, :, outside], np.broadcast_to(phantom16[:, outside], (2, 5, outside.sum())))


def test_inpaint_full_mask_equals_guided(tiny_denoiser, phantom16):
    mask = np.ones(phantom16.shape[1:], dtype=np.uint8)
    cs = rv_constraints(phantom16)
    a = inpaint(tiny_denoiser, NoiseSchedule(3), cs, phantom16, mask, n=1, seed=5)
    b = guided_sample(tiny_denoiser, NoiseSchedule(3), cs, phantom16.shape, n=1, seed=5)
    assert a.decoded.tobytes() == b.decoded.tobytes()


def test_inpaint_warns_when_mask_misses_component(tiny_denoiser, phantom16):
    mask = np.zeros(phantom16.shape[1:], dtype=np.uint8)
    mask[0, 0, 0] = 1
    with pytest.warns(UserWarning, match="covers no voxels"):
        inpaint(tiny_denoiser, NoiseSchedule(2), rv_constraints(phantom16), phantom16, mask, n=1)


def test_inpaint_validates_inputs(tiny_denoiser, phantom16):
    with pytest.raises(SamplerError):
        inpaint(tiny_denoiser, NoiseSchedule(2), None, phantom16, np.full(phantom16.shape[1:], 0.5), n=1)
    with pytest.raises(SamplerError):
        inpaint(tiny_denoiser, NoiseSchedule(2), None, phantom16 * 0.5, np.ones(phantom16.shape[1:]), n=1)


# -- training ---------------------------------------------------------------------


def test_exact_denoiser_has_zero_loss():
    # D(z + n; s) = z exactly gives zero weighted loss for any sigma
    z = torch.randn(2, 5, 4, 4, 4)
    assert float(((z - z) ** 2).mean()) == 0.0


def test_short_training_reduces_validation_loss():
    spec = default_spec(0, (16, 16, 16))
    data = generate_array(spec, 16)
    val = generate_array(spec, 8, start=1000)
    cfg = TrainingConfig(epochs=6, batch_size=4, warmup_steps=4, arch=TINY)
    before = validation_loss(build_network(TINY, cfg.seed), val)
    result = train(data, cfg, log_every=4)
    assert validation_loss(result.net, val) < before
    assert result.curve and all(np.isfinite(c["loss"]) for c in result.curve)


def test_training_rejects_channel_mismatch():
    from geoguide.diffusion.train import TrainingError

    with pytest.raises(TrainingError):
        train(np.zeros((2, 3, 16, 16, 16)), TrainingConfig(epochs=1, arch=TINY))


@pytest.mark.slow
def test_single_sample_memorization():
    spec = default_spec(0, (16, 16, 16))
    data = generate_array(spec, 1)
    cfg = TrainingConfig(epochs=300, batch_size=1, lr=2e-3, warmup_steps=20, arch=TINY)
    net = train(data, cfg, log_every=100).net
    res = sample(NetworkDenoiser(net), NoiseSchedule(30), data.shape[1:], n=2, seed=0)
    agreement = (res.grids == data).all(axis=1).mean()
    assert agreement >= 0.95
