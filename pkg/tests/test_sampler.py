import numpy as np
import pytest

import selfguide.autodiff as ad
from selfguide.denoiser import (
    MlpConfig,
    MlpDenoiser,
    Normalization,
    augment_dataset,
    prepare_fixed,
)
from selfguide.oracle import EmpiricalDenoiser
from selfguide.rng import SeededRng
from selfguide.sampler import (
    GuidanceConfig,
    GuidanceError,
    dump_samples_csv,
    extract_w,
    guided_eps,
    sample,
    sample_swg_r,
    sample_unguided,
    self_guidance_grad,
)
from selfguide.schedules import build_cosine

from conftest import fd_grad, rel_err


class ConstModel:
    """Predicts a fixed noise vector regardless of input."""

    conditioning = "none"

    def __init__(self, const):
        self.const = np.asarray(const, dtype=np.float64)
        self.dim = len(self.const)

    def predict_eps(self, z, k, c=None, **kw):
        return ad.add(ad.mul(z, 0.0), self.const)


class ExplodingModel(ConstModel):
    """Sends selected chains to infinity at one step."""

    def __init__(self, dim, bad_rows, at_k):
        super().__init__(np.zeros(dim))
        self.bad_rows = bad_rows
        self.at_k = at_k

    def predict_eps(self, z, k, c=None, **kw):
        out = ad.add(ad.mul(z, 0.0), self.const)
        if k == self.at_k:
            val = ad.value_of(out).copy()
            val[self.bad_rows] = np.inf
            return ad.add(ad.mul(out, 0.0), val) if isinstance(out, ad.Var) else val
        return out


def _random_mlp(seed, dim=3, K=20):
    rng = SeededRng(seed)
    model = MlpDenoiser(MlpConfig(dim=dim, K=K, depth=2, width=24), rng=rng)
    for name in model.params:
        if name.startswith("out."):
            model.params[name] = 0.2 * rng.gaussian(model.params[name].shape)
    # keep predicted clean weights decisively positive for gradient tests
    model.params["out.bias"][-1] = -0.5
    return model


def test_extract_w_definition():
    assert extract_w(np.array([0.3, 2.5])) == 2.5


def test_extract_w_linearity():
    rng = SeededRng(1)
    u, v = rng.gaussian((4,)), rng.gaussian((4,))
    assert extract_w(u + v) == pytest.approx(extract_w(u) + extract_w(v))


def test_extract_w_commutes_with_batch_mean():
    batch = SeededRng(2).gaussian((32, 3))
    assert extract_w(batch.mean(axis=0)) == pytest.approx(
        extract_w(batch).mean())


def test_extract_w_rejects_narrow_vectors():
    with pytest.raises(ValueError):
        extract_w(np.array([1.0]))


def test_constant_network_guidance_is_explicit_formula():
    # eps ignores z: grad log w0 = e_w / (alpha * w0)
    sched = build_cosine(10)
    model = ConstModel([0.2, -0.1, 0.3])
    z = np.array([0.5, 0.1, 0.9])
    for k in (1, 5, 10):
        a, s = float(sched.alpha[k]), float(sched.sigma[k])
        w0 = (z[-1] - s * model.const[-1]) / a
        expected = np.array([0.0, 0.0, 1.0 / (a * w0)])
        g = self_guidance_grad(model, sched, z, k)
        np.testing.assert_allclose(g, expected, rtol=1e-12)


def test_equal_weights_give_zero_guidance():
    sched = build_cosine(50)
    data = np.column_stack([SeededRng(3).gaussian((20, 2)),
                            np.full(20, 1.7)])
    oracle = EmpiricalDenoiser(data, sched)
    z = SeededRng(4).gaussian((8, 3))
    for k in (1, 25, 50):
        g = self_guidance_grad(oracle, sched, z, k)
        assert np.max(np.abs(g)) < 1e-8


def test_guidance_gradient_matches_finite_differences():
    sched = build_cosine(20)
    model = _random_mlp(5)
    rng = SeededRng(6)
    clamp = 1e-6
    for k in (1, 10, 20):
        z = rng.gaussian((3,)) * 0.8
        g = self_guidance_grad(model, sched, z, k, clamp_eps=clamp)

        def logw(x, kk=k):
            eps = model.predict_eps(x[None, :], kk)
            zhat = sched.data_prediction(x[None, :], eps, kk)
            return float(np.log(max(zhat[0, -1], clamp)))

        g_fd = fd_grad(logw, z.copy(), h=1e-6)
        assert rel_err(g, g_fd) < 1e-4, k


def test_guided_eps_rho_zero_is_bit_exact_reduction():
    sched = build_cosine(12)
    model = _random_mlp(7)
    z = SeededRng(8).gaussian((5, 3))
    for k in (1, 6, 12):
        raw = model.predict_eps(z, k)
        guided = guided_eps(model, sched, z, k,
                            g=GuidanceConfig(rho=0.0))
        np.testing.assert_array_equal(guided, raw)


def test_guided_eps_composes_score_and_scale():
    sched = build_cosine(12)
    model = _random_mlp(9)
    z = SeededRng(10).gaussian((4, 3))
    k = 6
    for rho in (1.0, 5.0, 25.0):
        guided = guided_eps(model, sched, z, k, g=GuidanceConfig(rho=rho))
        expected = model.predict_eps(z, k) - rho * sched.sigma[k] * \
            self_guidance_grad(model, sched, z, k)
        np.testing.assert_allclose(guided, expected, rtol=1e-12)


def test_weight_rescale_invariance_through_pipeline():
    """Globally rescaled weights leave the guided prediction unchanged."""
    sched = build_cosine(30)
    actions = SeededRng(11).gaussian((12, 2))
    w = np.abs(SeededRng(12).gaussian((12,))) + 0.3
    z_query = SeededRng(13).gaussian((6, 3))
    base = None
    for c in (1.0, 0.1, 10.0):
        data = prepare_fixed(augment_dataset(actions, c * w))
        oracle = EmpiricalDenoiser(data.z, sched)
        eps = guided_eps(oracle, sched, z_query, 15, g=GuidanceConfig(rho=1.0))
        if base is None:
            base = eps
        else:
            assert np.max(np.abs(eps - base)) < 1e-10


@pytest.mark.parametrize("kind", ["ddpm", "ddim"])
def test_rho_zero_sampling_matches_unguided_bitwise(kind):
    sched = build_cosine(20)
    model = _random_mlp(14)
    a = sample(model, sched, 64, SeededRng(99), g=GuidanceConfig(rho=0.0, sampler_kind=kind))
    b = sample_unguided(model, sched, 64, SeededRng(99), sampler_kind=kind)
    np.testing.assert_array_equal(a.z0, b.z0)


def test_sampling_deterministic_given_seed():
    sched = build_cosine(15)
    model = _random_mlp(15)
    a = sample(model, sched, 32, SeededRng(123))
    b = sample(model, sched, 32, SeededRng(123))
    np.testing.assert_array_equal(a.z0, b.z0)
    np.testing.assert_array_equal(a.clamp_hits, b.clamp_hits)


def test_two_point_oracle_mode_frequencies():
    # p ~ q * w over two atoms with weights 1:3 is categorical (1/4, 3/4)
    sched = build_cosine(100)
    actions = np.array([[-1.0, -1.0], [1.0, 1.0]])
    data = prepare_fixed(augment_dataset(actions, np.array([1.0, 3.0])))
    oracle = EmpiricalDenoiser(data.z, sched)
    out = sample(oracle, sched, 4000, SeededRng(16),
                 normalization=data.normalization)
    nearest = np.argmin(
        ((out.actions[:, None, :] - actions[None]) ** 2).sum(-1), axis=1)
    freq = np.bincount(nearest, minlength=2) / 4000
    np.testing.assert_allclose(freq, [0.25, 0.75], atol=0.05)


def test_sampler_output_invariants():
    sched = build_cosine(10)
    model = _random_mlp(17)
    out = sample(model, sched, 25, SeededRng(18))
    assert out.z0.shape == (25, 3)
    assert out.clamp_hits.shape == (25,)
    assert np.all(out.clamp_hits >= 0)
    assert out.diagnostics["steps"] == 10


def test_clamp_hits_counted_when_weights_go_negative():
    # constant prediction forcing negative clean-weight estimates
    sched = build_cosine(8)
    model = ConstModel([0.0, 0.0, 4.0])  # w0_hat = (z_w - sigma*4)/alpha < 0
    z = np.array([[0.0, 0.0, -2.0]])
    _, hits = None, None
    g = self_guidance_grad(model, sched, z, 4, clamp_eps=1e-6)
    np.testing.assert_array_equal(g, 0.0)  # clamped: log is locally constant
    out = sample(model, sched, 6, SeededRng(19), g=GuidanceConfig(rho=1.0))
    assert np.all(out.clamp_hits > 0)


def test_aborted_chains_reported_and_count_preserved():
    sched = build_cosine(6)
    model = ExplodingModel(dim=3, bad_rows=[1, 4], at_k=3)
    out = sample(model, sched, 6, SeededRng(20))
    assert out.z0.shape == (6, 3)
    assert out.diagnostics["aborted_chains"] == [1, 4]
    assert np.isnan(out.z0[1]).all() and np.isnan(out.z0[4]).all()
    assert np.isfinite(out.z0[[0, 2, 3, 5]]).all()


def test_swg_r_single_candidate_matches_sample():
    sched = build_cosine(12)
    model = _random_mlp(21)
    action = sample_swg_r(model, sched, lambda a: np.ones(len(a)), 1,
                          SeededRng(22))
    ref = sample(model, sched, 1, SeededRng(22))
    np.testing.assert_array_equal(action, ref.actions[0])


def test_swg_r_constant_weights_tie_break_to_first():
    sched = build_cosine(12)
    model = _random_mlp(23)
    action = sample_swg_r(model, sched, lambda a: np.full(len(a), 2.0), 8,
                          SeededRng(24))
    ref = sample(model, sched, 8, SeededRng(24))
    np.testing.assert_array_equal(action, ref.actions[0])


@pytest.mark.parametrize("M", [1, 2, 4, 8, 16])
def test_swg_r_candidate_sweep(M):
    sched = build_cosine(8)
    model = _random_mlp(25)
    fn = lambda a: -np.sum(a**2, axis=1)  # prefer small actions
    action = sample_swg_r(model, sched, fn, M, SeededRng(26))
    ref = sample(model, sched, M, SeededRng(26))
    best = ref.actions[np.argmax(fn(ref.actions))]
    np.testing.assert_array_equal(action, best)


def test_swg_r_categorical_and_w_channel_modes():
    sched = build_cosine(8)
    model = _random_mlp(27)
    a1 = sample_swg_r(model, sched, lambda a: np.abs(a[:, 0]) + 0.1, 4,
                      SeededRng(28), selection="categorical")
    assert a1.shape == (2,)
    a2 = sample_swg_r(model, sched, lambda a: np.ones(len(a)), 4,
                      SeededRng(28), use_w_channel=True)
    assert a2.shape == (2,)


def test_guidance_config_validation():
    with pytest.raises(ValueError):
        GuidanceConfig(rho=-1.0)
    with pytest.raises(ValueError):
        GuidanceConfig(clamp_eps=0.0)
    with pytest.raises(ValueError):
        GuidanceConfig(sampler_kind="euler")
    sched = build_cosine(10)
    with pytest.raises(GuidanceError, match="K"):
        sample(_random_mlp(29), sched, 2, SeededRng(30),
               g=GuidanceConfig(K=99))


def test_samples_csv_format(tmp_path):
    sched = build_cosine(6)
    model = _random_mlp(31)
    out = sample(model, sched, 5, SeededRng(32))
    path = tmp_path / "samples.csv"
    dump_samples_csv(path, out)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "chain_id,a_1,a_2,w_hat,clamp_hits"
    assert len(lines) == 6
    first = [float(x) for x in lines[1].split(",")]
    assert first[0] == 0.0
    np.testing.assert_allclose(first[1:4], out.z0[0], rtol=1e-15)
