import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from helpers import tiny_schedule
from lesionsynth.diffusion import (
    Conditioning,
    cfg_combine,
    ddim_step,
    ddim_timesteps,
    ddpm_reverse_kernel,
    iterated_forward_equivalence,
    make_schedule,
    predict_x0,
    q_sample,
    sample_latent,
)

# cumulative products evaluated independently with mpmath at 40 digits
AB_LINEAR_1000 = 4.0358297653756833e-05
AB_TINY_200 = 0.0061219652412928356
AB_SCALED_1000 = 0.0046600985130772404


class TestSchedule:
    def test_single_step(self):
        s = make_schedule(1, 0.5, 0.5)
        assert s.alpha_bar[1:].tolist() == [0.5]
        assert s.alpha_bar[0] == 1.0

    def test_linear_1000_terminal(self):
        s = make_schedule(1000, 1e-4, 0.02)
        assert s.alpha_bar[-1] < 1e-4
        assert s.alpha_bar[-1] == pytest.approx(AB_LINEAR_1000, rel=1e-10)

    def test_tiny_and_scaled_terminal(self):
        assert tiny_schedule().alpha_bar[-1] == pytest.approx(AB_TINY_200, rel=1e-10)
        s = make_schedule(1000, 0.00085, 0.012, "scaled_linear")
        assert s.alpha_bar[-1] == pytest.approx(AB_SCALED_1000, rel=1e-10)

    def test_reversed_betas_rejected(self):
        with pytest.raises(ValueError):
            make_schedule(10, 0.02, 1e-4)

    def test_bad_kind_and_T(self):
        with pytest.raises(ValueError):
            make_schedule(10, 1e-4, 0.02, "cosine")
        with pytest.raises(ValueError):
            make_schedule(0, 1e-4, 0.02)

    @given(
        T=st.integers(1, 400),
        b0=st.floats(1e-6, 0.5),
        span=st.floats(0.0, 0.49),
        kind=st.sampled_from(["linear", "scaled_linear"]),
    )
    def test_alpha_bar_strictly_decreasing(self, T, b0, span, kind):
        s = make_schedule(T, b0, min(b0 + span, 0.999), kind)
        ab = s.alpha_bar
        assert np.all(np.diff(ab) < 0)
        assert ab[0] == 1.0 and ab[-1] > 0

    def test_dict_roundtrip(self):
        s = make_schedule(50, 1e-3, 0.03, "scaled_linear")
        np.testing.assert_array_equal(type(s).from_dict(s.to_dict()).beta, s.beta)


class TestForward:
    def test_t0_is_identity(self, sched):
        x0 = np.random.default_rng(0).standard_normal((3, 4))
        eps = np.random.default_rng(1).standard_normal((3, 4))
        np.testing.assert_array_equal(q_sample(x0, 0, eps, sched), x0)

    def test_pure_noise_limit(self):
        s = make_schedule(2000, 0.5, 0.9)
        x0 = np.full(5, 7.0)
        eps = np.arange(5.0)
        np.testing.assert_allclose(q_sample(x0, 2000, eps, s), eps, atol=1e-12)

    def test_batch_timesteps_torch(self, sched):
        x0 = torch.randn(3, 2, 4, 4)
        eps = torch.randn(3, 2, 4, 4)
        t = torch.tensor([1, 50, 200])
        out = q_sample(x0, t, eps, sched)
        for i in range(3):
            torch.testing.assert_close(out[i], q_sample(x0[i], int(t[i]), eps[i], sched))

    def test_out_of_range_t(self, sched):
        with pytest.raises(ValueError):
            q_sample(np.zeros(2), 201, np.zeros(2), sched)

    def test_t1_iterated_equals_closed_form_by_construction(self, sched):
        # one Markov step with noise n is sqrt(1-b1) x0 + sqrt(b1) n = q_sample(x0, 1, n)
        x0 = np.array([0.3, -1.2])
        a = iterated_forward_equivalence(x0, 1, sched, np.random.default_rng(5))
        n = np.random.default_rng(5).standard_normal(2)
        np.testing.assert_allclose(a, q_sample(x0, 1, n, sched), rtol=1e-12)

    @pytest.mark.parametrize("x0", [np.array([0.0, 0.0]), np.array([1.5, -0.7])])
    def test_iterated_moments_t10(self, sched, x0):
        n, t = 100_000, 10
        rng = np.random.default_rng(11)
        xs = iterated_forward_equivalence(np.broadcast_to(x0, (n, 2)), t, sched, rng)
        ab = sched.alpha_bar[t]
        sd = np.sqrt(1 - ab)
        assert np.all(np.abs(xs.mean(0) - np.sqrt(ab) * x0) < 3 * sd / np.sqrt(n))
        np.testing.assert_allclose(xs.var(0), 1 - ab, rtol=0.01)


class TestInverse:
    @given(t=st.integers(1, 200), seed=st.integers(0, 2**31 - 1))
    def test_predict_x0_inverts_q_sample(self, t, seed):
        s = tiny_schedule()
        rng = np.random.default_rng(seed)
        x0, eps = rng.standard_normal((2, 3, 5))
        rec = predict_x0(q_sample(x0, t, eps, s), eps, t, s)
        np.testing.assert_allclose(rec, x0, rtol=1e-6, atol=1e-9)

    def test_zero_eps(self, sched):
        z = np.array([0.5, -2.0])
        np.testing.assert_allclose(predict_x0(z, np.zeros(2), 40, sched), z / np.sqrt(sched.alpha_bar[40]))

    def test_symbolic_rearrangement(self, sched):
        # x0 = (z - sqrt(1-ab) e) / sqrt(ab), evaluated term by term
        z, e, t = 0.8, -0.3, 77
        ab = float(np.prod(1.0 - sched.beta[:t]))
        expect = z / ab**0.5 - e * ((1 - ab) / ab) ** 0.5
        assert float(predict_x0(np.array(z), np.array(e), t, sched)) == pytest.approx(expect, rel=1e-12)

    def test_ddpm_mean_matches_posterior(self, sched):
        # posterior mean of q(x_{t-1}|x_t, x0) with x0 = predict_x0(x_t, eps)
        rng = np.random.default_rng(3)
        z, e = rng.standard_normal((2, 6))
        t = 30
        k = ddpm_reverse_kernel(z, e, t, sched)
        b, ab, abp = sched.beta[t - 1], sched.alpha_bar[t], sched.alpha_bar[t - 1]
        x0 = predict_x0(z, e, t, sched)
        mu = np.sqrt(abp) * b / (1 - ab) * x0 + np.sqrt(1 - b) * (1 - abp) / (1 - ab) * z
        np.testing.assert_allclose(k.mu, mu, rtol=1e-10)
        assert k.sigma == pytest.approx(np.sqrt(b * (1 - abp) / (1 - ab)))


class TestDdim:
    def test_identity_step_when_alpha_bar_equal(self):
        # betas this small make alpha_bar_{t_prev} equal alpha_bar_t to ~1e-12
        s = make_schedule(2, 1e-12, 1e-12)
        z, e = np.array([0.1, 0.4, -3.0]), np.array([0.2, -0.5, 1.0])
        np.testing.assert_allclose(ddim_step(z, e, 2, 1, s), z, atol=1e-5)

    def test_zero_eps_scaling(self, sched):
        z = np.array([1.0, -2.0, 0.5])
        out = ddim_step(z, np.zeros(3), 100, 60, sched)
        ratio = np.sqrt(sched.alpha_bar[60]) / np.sqrt(sched.alpha_bar[100])
        np.testing.assert_allclose(out, ratio * z, rtol=1e-12)

    def test_deterministic(self, sched):
        z = torch.randn(2, 4, 8, 8, generator=torch.Generator().manual_seed(0))
        e = torch.randn(2, 4, 8, 8, generator=torch.Generator().manual_seed(1))
        assert torch.equal(ddim_step(z, e, 120, 80, sched), ddim_step(z, e, 120, 80, sched))

    def test_eta_requires_noise(self, sched):
        with pytest.raises(ValueError):
            ddim_step(np.ones(2), np.ones(2), 10, 5, sched, eta=1.0)

    def test_eta_one_matches_ddpm_sigma(self, sched):
        z, e = np.ones(3), np.full(3, 0.2)
        a = ddim_step(z, e, 10, 9, sched, eta=1.0, noise=np.zeros(3))
        b = ddim_step(z, e, 10, 9, sched, eta=1.0, noise=np.ones(3))
        assert np.allclose(b - a, ddpm_reverse_kernel(z, e, 10, sched).sigma)

    def test_bad_order(self, sched):
        with pytest.raises(ValueError):
            ddim_step(np.ones(2), np.ones(2), 5, 5, sched)

    def test_timesteps(self):
        ts = ddim_timesteps(1000, 45)
        assert len(ts) == 45 and ts[0] == 1000 and ts[-1] == 1
        assert all(a > b for a, b in zip(ts, ts[1:]))
        assert ddim_timesteps(200, 1) == [200]
        with pytest.raises(ValueError):
            ddim_timesteps(200, 0)
        with pytest.raises(ValueError):
            ddim_timesteps(10, 11)


class TestGuidance:
    def test_scale_endpoints(self):
        u, c = np.array([1.0, 2.0]), np.array([-3.0, 5.0])
        np.testing.assert_array_equal(cfg_combine(u, c, 1.0), c)
        np.testing.assert_array_equal(cfg_combine(u, c, 0.0), u)

    def test_default_scale(self):
        v = np.array([0.5, -1.0, 2.0])
        np.testing.assert_allclose(cfg_combine(np.zeros(3), v, 1.22), 1.22 * v)

    @given(
        s=st.floats(-5, 5),
        a=st.lists(st.floats(-10, 10), min_size=3, max_size=3),
        b=st.lists(st.floats(-10, 10), min_size=3, max_size=3),
    )
    def test_affine_identities(self, s, a, b):
        a, b = np.array(a), np.array(b)
        # swapping the branches mirrors the scale about 1/2
        np.testing.assert_allclose(cfg_combine(a, b, s), cfg_combine(b, a, 1 - s), atol=1e-9)
        np.testing.assert_allclose(cfg_combine(a, b, s) + cfg_combine(b, a, s), a + b, atol=1e-9)
        np.testing.assert_allclose(cfg_combine(a, b, s) + cfg_combine(a, b, 1 - s), a + b, atol=1e-9)


class _Counter:
    def __init__(self, fn=None):
        self.calls = 0
        self.fn = fn

    def __call__(self, z, t, ctx):
        self.calls += 1
        return torch.zeros_like(z) if self.fn is None else self.fn(z, t, ctx)


def _cond(width=8):
    return Conditioning(torch.ones(3, width)), Conditioning(torch.zeros(3, width), null_flag=True)


class TestSampleLatent:
    def test_one_step_zero_denoiser(self, sched):
        cond, _ = _cond()
        z = sample_latent(_Counter(), cond, None, (1, 2, 3, 3), sched, 1, 1.0, seed=4)
        zT = torch.randn((1, 2, 3, 3), generator=torch.Generator().manual_seed(4))
        # single step T -> 0: z_0 = sqrt(ab_0) * z_T / sqrt(ab_T) with ab_0 = 1
        torch.testing.assert_close(z, zT / float(np.sqrt(sched.alpha_bar[sched.T])))

    def test_seed_determinism(self, sched):
        cond, unc = _cond()
        f = lambda z, t, c: 0.1 * z + c.mean()  # noqa: E731
        a = sample_latent(f, cond, unc, (1, 2, 4, 4), sched, 10, 1.22, seed=9)
        b = sample_latent(f, cond, unc, (1, 2, 4, 4), sched, 10, 1.22, seed=9)
        c = sample_latent(f, cond, unc, (1, 2, 4, 4), sched, 10, 1.22, seed=10)
        assert torch.equal(a, b)
        assert not torch.equal(a, c)

    def test_pair_evaluations_per_step(self, sched):
        cond, unc = _cond()
        counter = _Counter()
        sample_latent(counter, cond, unc, (1, 2, 4, 4), sched, 45, 1.22, seed=0)
        assert counter.calls == 90
        counter = _Counter()
        sample_latent(counter, cond, unc, (1, 2, 4, 4), sched, 45, 1.0, seed=0)
        assert counter.calls == 45
