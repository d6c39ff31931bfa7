import math

import numpy as np
import pytest
from scipy import stats

from dvdp.cascade import EXPLICIT, LatentState, build_cascade, downsample, project, upsample
from dvdp.denoiser import AnalyticDenoiser
from dvdp.mixture import GaussianMixture
from dvdp.process import marginal_sample, posterior
from dvdp.sampler import (
    ANCESTRAL,
    DDIM,
    SamplerConfig,
    SamplerError,
    ancestral_step,
    ddim_sample,
    ddim_step,
    ddim_timesteps,
    default_eta_window,
    predict_x0,
    sample,
    sample_items,
    turn_up,
)
from dvdp.schedule import DvdpSchedule, build_schedule, schedule_for


class TrueNoise:
    """Oracle denoiser that knows the clean tensor: ε = (x_t - Λ̄ x0) / σ̄."""

    def __init__(self, c, s, x0):
        self.c, self.s, self.x0 = c, s, x0

    def evaluate(self, state):
        from dvdp.cascade import apply_diag

        lam = self.s.lambda_values(state.level, state.time)
        return (state.data - apply_diag(self.c, state.level, lam, self.x0)) / self.s.sigma_bar[state.time]


class Recorder:
    """Wraps a denoiser and keeps every x̂0 implied by its output."""

    def __init__(self, inner, c, s):
        self.inner, self.c, self.s = inner, c, s
        self.x0s = []

    def evaluate(self, state):
        eps = self.inner.evaluate(state)
        self.x0s.append(predict_x0(self.c, self.s, state, eps))
        return eps


def tiny():
    c = build_cascade((1,), 0, EXPLICIT)
    s = DvdpSchedule(2, (), np.ones((1, 3)), np.array([0.0, 1.0, math.sqrt(2.0)]), 0.01)
    return c, s


def test_predict_x0_inverts_marginal(rng):
    c = build_cascade((1, 8, 8), 2)
    s = build_schedule(1000, (300, 600))
    for k, t in [(0, 17), (0, 300), (1, 450), (2, 999)]:
        x0 = rng.standard_normal((3,) + c.shapes[k])
        eps = rng.standard_normal((3,) + c.shapes[k])
        st = marginal_sample(c, s, x0, k, t, eps)
        np.testing.assert_allclose(predict_x0(c, s, st, eps), x0, atol=1e-9)
    x = rng.standard_normal((1, 8, 8))
    np.testing.assert_array_equal(predict_x0(c, s, LatentState(0, 0, x), np.zeros_like(x)), x)
    np.testing.assert_array_equal(predict_x0(c, s, LatentState(0, 50, np.zeros_like(x)), np.zeros_like(x)), 0.0)


def test_predict_x0_underflow():
    c = build_cascade((2,), 1, EXPLICIT)
    s = DvdpSchedule(
        4, (2,), np.array([[1, 1e-6, 1e-13, 1e-13, 1e-13], [1, 1, 1, 1, 1.0]]), np.arange(5.0), 1e-13
    )
    with pytest.raises(SamplerError, match="too small"):
        predict_x0(c, s, LatentState(0, 2, np.zeros(2)), np.zeros(2))


def test_one_dim_ancestral_example():
    c, s = tiny()
    x0 = np.array([2.0])
    state = LatentState(0, 2, np.array([4.0]))
    out = ancestral_step(c, s, state, TrueNoise(c, s, x0), noise=np.zeros(1))
    assert out.data.item() == pytest.approx(3.0, abs=1e-14)
    assert (out.level, out.time) == (0, 1)


def test_oracle_step_equals_posterior_mean(rng):
    c = build_cascade((1, 4, 4), 1)
    s = build_schedule()
    x0 = rng.standard_normal((1, 4, 4))
    st = marginal_sample(c, s, x0, 0, 321, rng.standard_normal((1, 4, 4)))
    out = ancestral_step(c, s, st, TrueNoise(c, s, x0), noise=np.zeros_like(x0))
    np.testing.assert_allclose(out.data, posterior(c, s, st, x0).mean, atol=1e-12)


def test_last_step_is_noise_free(rng):
    c = build_cascade((1, 4, 4), 1)
    s = build_schedule()
    x0 = rng.standard_normal((1, 4, 4))
    st = marginal_sample(c, s, x0, 0, 1, rng.standard_normal((1, 4, 4)))
    a = ancestral_step(c, s, st, TrueNoise(c, s, x0), noise=np.zeros_like(x0))
    b = ancestral_step(c, s, st, TrueNoise(c, s, x0), noise=rng.standard_normal((1, 4, 4)) * 100)
    np.testing.assert_array_equal(a.data, b.data)


def test_single_step_distribution_ks():
    c = build_cascade((2,), 1, EXPLICIT)
    s = schedule_for(c, 1000, (500,))
    rng = np.random.default_rng(8)
    x0 = np.array([0.7, -1.2])
    t = 240
    st = marginal_sample(c, s, x0, 0, t, rng.standard_normal(2))
    n = 10_000
    batch = LatentState(0, t, np.broadcast_to(st.data, (n, 2)).copy())
    out = ancestral_step(c, s, batch, TrueNoise(c, s, x0), rng)
    post = posterior(c, s, st, x0)
    u = np.array([1.0, -1.0]) / math.sqrt(2)
    for direction, var in ((u, post.variances[0]), (np.array([1.0, 1.0]) / math.sqrt(2), post.variances[1])):
        z = (out.data @ direction - post.mean @ direction) / math.sqrt(var)
        assert stats.kstest(z, "norm").pvalue > 0.01


def test_turn_up(rng):
    c = build_cascade((1, 4, 4), 1)
    s = build_schedule()
    y = LatentState(1, 600, rng.standard_normal((1, 2, 2)))
    up = turn_up(c, s, y, rng)
    assert (up.level, up.time) == (0, 600)
    assert np.max(np.abs(downsample(c, 1, up.data) - y.data)) <= 1e-10
    plain = turn_up(c, s, y, noise=np.zeros((1, 4, 4)))
    np.testing.assert_array_equal(plain.data, upsample(c, 1, y.data))
    with pytest.raises(SamplerError):
        turn_up(c, s, LatentState(1, 601, y.data), rng)


def test_turn_up_complement_covariance():
    c = build_cascade((1, 2, 2), 1, EXPLICIT)
    s = build_schedule()
    n = 100_000
    rng = np.random.default_rng(4)
    y = LatentState(1, 600, np.zeros((n, 1, 1, 1)))
    noise = turn_up(c, s, y, rng).data.reshape(n, 4)
    comp = c.bases[0][:, :3]  # orthonormal complement basis
    coords = noise @ comp
    cov = coords.T @ coords / n
    sig2 = s.sigma_bar[600] ** 2
    se = sig2 * math.sqrt(2.0 / n)
    np.testing.assert_allclose(np.diag(cov), sig2, atol=4 * se)
    off = cov[~np.eye(3, dtype=bool)]
    assert np.max(np.abs(off)) < 4 * sig2 / math.sqrt(n)
    assert np.max(np.abs(noise @ c.bases[0][:, 3])) < 1e-9


def test_deterministic_and_lattice(two_blob, flat2):
    c, s = flat2
    den = AnalyticDenoiser(two_blob, c, s)
    seen = []
    a = sample(c, s, den, 4, np.random.default_rng(1), callback=lambda st: seen.append((st.level, st.time)))
    b = sample(c, s, den, 4, np.random.default_rng(1))
    np.testing.assert_array_equal(a, b)
    assert a.shape == (4, 2)
    assert seen[0] == (1, 1000) and seen[-1] == (0, 0)
    assert len(seen) == s.T + c.levels + 1
    for lvl, t in seen:
        lo, hi = s.window(lvl)
        assert lo <= t <= hi


@pytest.mark.parametrize("K", [0, 1])
def test_moments_small_run(K):
    gm = GaussianMixture.isotropic([0.4, 0.6], [[2.0, 0.5], [-1.0, -1.5]], [0.3, 0.5])
    c = build_cascade((2,), K, EXPLICIT)
    s = schedule_for(c, 1000, (500,) * K)
    n = 4000
    x = sample(c, s, AnalyticDenoiser(gm, c, s), n, np.random.default_rng(K))
    se = np.sqrt(np.diag(gm.covariance()) / n)
    assert np.all(np.abs(x.mean(axis=0) - gm.mean()) < 3 * se)
    cov = np.cov(x.T)
    # per-entry standard error of a sample covariance: sqrt((s_ii s_jj + s_ij^2) / n)
    ref = gm.covariance()
    se_cov = np.sqrt((np.outer(np.diag(ref), np.diag(ref)) + ref**2) / n)
    assert np.all(np.abs(cov - ref) < 3.5 * se_cov)


def test_eta_window_rule():
    assert default_eta_window(build_schedule(1000, (300, 600))) == (225, 450)
    assert default_eta_window(build_schedule(1000, (600,))) == (450, 800)
    assert default_eta_window(build_schedule(1000, ())) is None


def test_ddim_timesteps():
    s = build_schedule(1000, (300, 600))
    full = ddim_timesteps(s, 1000)
    assert full[0] == list(range(300, -1, -1))
    assert full[2] == list(range(1000, 599, -1))
    plan = ddim_timesteps(s, 250)
    assert sum(len(p) - 1 for p in plan) == 250
    for k, ts in enumerate(plan):
        lo, hi = s.window(k)
        assert ts[0] == hi and ts[-1] == lo
        assert all(a > b for a, b in zip(ts, ts[1:]))
    with pytest.raises(SamplerError):
        ddim_timesteps(s, 2)


def test_ddim_full_noise_reproduces_ancestral(two_blob, flat2):
    c, s = flat2
    den = AnalyticDenoiser(two_blob, c, s)
    ra, rd = Recorder(den, c, s), Recorder(den, c, s)
    anc = sample(c, s, ra, 3, np.random.default_rng(9))
    ddim = ddim_sample(c, s, rd, 3, np.random.default_rng(9), eta=lambda t: 1.0)
    np.testing.assert_allclose(ddim, anc, atol=1e-9)
    assert len(ra.x0s) == len(rd.x0s) == s.T
    for a, b in zip(ra.x0s, rd.x0s):
        np.testing.assert_allclose(a, b, atol=1e-9)


def test_ddim_step_without_noise_is_deterministic(rng, flat2, two_blob):
    c, s = flat2
    den = AnalyticDenoiser(two_blob, c, s)
    st = LatentState(0, 300, rng.standard_normal((2, 2)))
    a, x0a = ddim_step(c, s, st, 250, 0.0, den, rng.standard_normal((2, 2)))
    b, x0b = ddim_step(c, s, st, 250, 0.0, den, rng.standard_normal((2, 2)))
    np.testing.assert_array_equal(a.data, b.data)
    # η = 0 keeps x̂0 and ε̂ on the marginal: x_s = Λ̄_s x̂0 + σ̄_s ε̂
    eps = den.evaluate(st)
    from dvdp.cascade import apply_diag

    np.testing.assert_allclose(a.data, apply_diag(c, 0, s.lambda_values(0, 250), x0a) + s.sigma_bar[250] * eps, atol=1e-12)


def test_sample_items_thread_invariant(two_blob, flat2):
    c, s = flat2
    den = AnalyticDenoiser(two_blob, c, s)
    cfg = SamplerConfig(mode=DDIM, ddim_steps=40, seed=5)
    one = sample_items(c, s, den, 5, cfg, threads=1)
    two = sample_items(c, s, den, 5, cfg, threads=3)
    np.testing.assert_array_equal(one, two)
    first = sample_items(c, s, den, 2, cfg)
    np.testing.assert_array_equal(first, one[:2])


def test_literal_update_differs(two_blob, flat2):
    c, s = flat2
    den = AnalyticDenoiser(two_blob, c, s)
    st = LatentState(0, 300, np.ones((1, 2)))
    xi = np.ones((1, 2))
    a = ancestral_step(c, s, st, den, noise=xi)
    b = ancestral_step(c, s, st, den, noise=xi, literal_alg2=True)
    assert not np.allclose(a.data, b.data)
    out = sample(c, s, den, 2, np.random.default_rng(0), cfg=SamplerConfig(literal_alg2=True))
    assert out.shape == (2, 2)


def test_config_validation(default_schedule):
    with pytest.raises(SamplerError):
        SamplerConfig(mode="euler").validate(default_schedule)
    with pytest.raises(SamplerError):
        SamplerConfig(mode=DDIM, ddim_steps=5000).validate(default_schedule)
    with pytest.raises(SamplerError):
        SamplerConfig(mode=ANCESTRAL, eta_window=(10, 2000)).validate(default_schedule)
    with pytest.raises(SamplerError):
        SamplerConfig(sigma_choice="upper").validate(default_schedule)
