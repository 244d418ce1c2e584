"""SDS / VSD / SSD step behavior, the surrogate denoiser, and the reparam loss."""

import numpy as np
import pytest

from distillforge.diffusion import (Condition, DenoiserOracle, GuidanceSpec,
                                    TimePolicy, build_schedule)
from distillforge.distill import (SurrogateDenoiser, TraceWriter, reparam_loss,
                                  sds_step, ssd_step, vsd_step)
from distillforge.errors import ConfigurationError, TrainingError
from distillforge.oracles import GaussianOracle, gaussian_eps
from distillforge import verification

SCHED = build_schedule(1000, 1e-4, 2e-2)
COND = Condition(prompt_tag="y")
POL = TimePolicy(0.02, 0.98)


class TestReparamLoss:
    def test_zero_grad_zero_loss(self):
        loss, gx = reparam_loss(np.random.default_rng(0).standard_normal(5),
                                np.zeros(5))
        assert loss == 0.0
        assert np.all(gx == 0.0)

    def test_loss_is_mean_square_of_grad(self):
        rng = np.random.default_rng(1)
        x, g = rng.standard_normal((2, 4, 4))
        loss, _ = reparam_loss(x, g)
        assert loss == pytest.approx(np.mean(g ** 2), rel=1e-12)

    def test_gradient_scale_two_over_n(self):
        rng = np.random.default_rng(2)
        x, g = rng.standard_normal((2, 8, 8))
        _, gx = reparam_loss(x, g)
        assert np.allclose(gx, (2.0 / 64) * g, rtol=1e-15)

    def test_finite_difference(self):
        rng = np.random.default_rng(3)
        x, g = rng.standard_normal((2, 8, 8))
        _, analytic = reparam_loss(x, g)
        target = x - g
        h = 1e-6
        for idx in [(0, 0), (3, 5), (7, 7)]:
            xp, xm = x.copy(), x.copy()
            xp[idx] += h
            xm[idx] -= h
            fd = (np.mean((xp - target) ** 2) - np.mean((xm - target) ** 2)) / (2 * h)
            assert fd == pytest.approx(analytic[idx], rel=1e-6)


class PresetEpsOracle(DenoiserOracle):
    """Returns a preset eps regardless of input: the 'perfect denoiser'."""

    def __init__(self, value):
        self.value = value

    @property
    def image_shape(self):
        return self.value.shape

    def predict_eps(self, x_t, t, condition):
        return self.value.copy()


class TestSdsStep:
    def test_perfect_denoiser_gives_zero_grad(self):
        # oracle that predicts exactly the drawn noise: difference vanishes
        rng = np.random.default_rng(4)
        probe = np.random.default_rng(4)
        t_probe = probe.integers(int(0.02 * 1000), int(0.98 * 1000))
        eps_probe = probe.standard_normal(3)
        res = sds_step(np.zeros(3), PresetEpsOracle(eps_probe),
                       GuidanceSpec(100.0), SCHED, POL, 0, rng, COND)
        assert res.diagnostics["t"] == t_probe
        assert np.allclose(res.grad_image, 0.0, atol=1e-15)
        assert res.scalar_loss == pytest.approx(0.0, abs=1e-30)

    def test_monte_carlo_mean_vanishes_at_target(self):
        # identity rendering with theta = mu: E[grad] = 0
        mu = np.array([0.5, -0.25])
        oracle = GaussianOracle({"y": mu, "": mu}, 0.04, SCHED)
        rng = np.random.default_rng(5)
        n = 10_000
        grads = np.empty((n, 2))
        for i in range(n):
            grads[i] = sds_step(mu, oracle, GuidanceSpec(100.0), SCHED, POL,
                                i, rng, COND).grad_image
        mean = grads.mean(axis=0)
        se = grads.std(axis=0, ddof=1) / np.sqrt(n)
        assert np.all(np.abs(mean) <= 3.0 * se)

    def test_mode_seeking_two_mode_mixture(self):
        theta = verification.run_sds_mode_seek(SCHED, seed=1)
        mode_dist = min(np.linalg.norm(theta - m) for m in verification.SDS_MODES)
        assert mode_dist < 0.05
        assert np.linalg.norm(theta) > 0.4  # far from the mixture mean

    def test_diagnostics_fields(self):
        oracle = GaussianOracle({"y": np.zeros(2), "": np.zeros(2)}, 0.1, SCHED)
        res = sds_step(np.ones(2), oracle, GuidanceSpec(7.5), SCHED, POL, 0,
                       np.random.default_rng(0), COND)
        assert {"t", "eps_gap", "cfg_weight", "omega"} <= res.diagnostics.keys()


class TestSsdStep:
    def test_weight_one_no_negative_exact_zero(self):
        oracle = GaussianOracle({"y": np.array([0.3, 0.8]),
                                 "": np.array([0.0, 0.0])}, 0.02, SCHED,
                                variance_by_condition={"": 1.0})
        rng = np.random.default_rng(6)
        for i in range(200):
            res = ssd_step(rng.standard_normal(2), oracle, GuidanceSpec(1.0),
                           SCHED, POL, i, rng, COND)
            assert np.all(res.grad_image == 0.0)

    def test_equal_cond_uncond_zero_for_any_weight(self):
        mu = np.array([0.4, 0.4])
        oracle = GaussianOracle({"y": mu, "": mu}, 0.02, SCHED)
        rng = np.random.default_rng(7)
        for w in (0.5, 7.5, 100.0):
            res = ssd_step(np.ones(2), oracle, GuidanceSpec(w), SCHED, POL, 0,
                           rng, COND)
            assert np.allclose(res.grad_image, 0.0, atol=1e-12)

    def test_descent_matches_grid_search_fixed_point(self):
        target = verification.grid_search_ssd_fixed_point(SCHED)
        theta = verification.run_ssd_descent(SCHED, seed=1)
        assert np.linalg.norm(theta - target) <= 1e-2

    def test_negative_prompt_changes_hi_branch(self):
        oracle = GaussianOracle(
            {"y": np.array([1.0, 0.0]), "": np.zeros(2),
             "neg": np.array([-1.0, 0.5])}, 0.05, SCHED)
        cond = Condition(prompt_tag="y", negative_tag="neg")
        args = (SCHED, POL, 0)
        a = ssd_step(np.ones(2), oracle, GuidanceSpec(7.5, use_negative=False),
                     *args, np.random.default_rng(8), cond)
        b = ssd_step(np.ones(2), oracle, GuidanceSpec(7.5, use_negative=True),
                     *args, np.random.default_rng(8), cond)
        assert not np.allclose(a.grad_image, b.grad_image)


class MirrorSurrogate:
    """Test double whose prediction equals the target oracle's output."""

    def __init__(self, oracle):
        self.oracle = oracle

    def predict_eps(self, x_t, t, condition):
        return self.oracle.predict_eps(x_t, t, condition)

    def train_step(self, *a, **k):
        return 0.0


class TestVsdStep:
    def test_surrogate_equal_to_target_zero_grad(self):
        mu = np.array([0.5, 0.5])
        oracle = GaussianOracle({"y": mu, "": mu}, 0.04, SCHED)
        res = vsd_step(np.ones(2), oracle, MirrorSurrogate(oracle),
                       GuidanceSpec(1.0), SCHED, POL, 0,
                       np.random.default_rng(9), COND)
        assert np.allclose(res.grad_image, 0.0, atol=1e-14)

    def test_fresh_surrogate_grad_close_to_guided(self):
        mu = np.array([2.0, -2.0])
        oracle = GaussianOracle({"y": mu, "": np.zeros(2)}, 0.01, SCHED,
                                variance_by_condition={"": 1.0})
        sur = SurrogateDenoiser((2,), 1000, rng=np.random.default_rng(0))
        rng = np.random.default_rng(10)
        probe = np.random.default_rng(10)
        t = int(probe.integers(20, 980))
        eps = probe.standard_normal(2)
        sa, sn = SCHED.signal_and_noise(t)
        x_t = sa * np.ones(2) + sn * eps
        e_c = oracle.predict_eps(x_t, t, COND)
        e_u = oracle.predict_eps(x_t, t, Condition(prompt_tag=""))
        guided = e_u + 7.5 * (e_c - e_u)
        res = vsd_step(np.ones(2), oracle, sur, GuidanceSpec(7.5), SCHED, POL,
                       0, rng, COND)
        # freshly initialized surrogate output is ~0.01-scale
        assert np.linalg.norm(res.grad_image - guided) < 0.05 * np.linalg.norm(guided)

    def test_surrogate_learns_optimal_eps(self):
        # 2000 lockstep updates on a fixed Gaussian, then compare held-out
        # predictions against the analytic optimum
        mu = np.array([0.6, -0.3])
        var = 0.04
        sur = SurrogateDenoiser((2,), 1000, rng=np.random.default_rng(7))
        rng = np.random.default_rng(0)
        for _ in range(2000):
            x0 = mu + np.sqrt(var) * rng.standard_normal(2)
            t = int(rng.integers(0, 1000))
            eps = rng.standard_normal(2)
            sa, sn = SCHED.signal_and_noise(t)
            sur.train_step(sa * x0 + sn * eps, eps, t, COND)
        rng2 = np.random.default_rng(99)
        errs = []
        for _ in range(500):
            x0 = mu + np.sqrt(var) * rng2.standard_normal(2)
            t = int(rng2.integers(0, 1000))
            eps = rng2.standard_normal(2)
            sa, sn = SCHED.signal_and_noise(t)
            x_t = sa * x0 + sn * eps
            pred = sur.predict_eps(x_t, t, COND)
            opt = gaussian_eps(x_t, mu, var, SCHED.alpha_bar[t])
            errs.append(np.mean((pred - opt) ** 2))
        assert np.mean(errs) <= 0.1

    def test_divergence_raises_training_error(self):
        sur = SurrogateDenoiser((2,), 1000)
        with pytest.raises(TrainingError, match="step"):
            sur.train_step(np.zeros(2), np.array([np.inf, 0.0]), 10, COND)

    def test_param_budget_enforced(self):
        with pytest.raises(ConfigurationError):
            SurrogateDenoiser((64, 64, 3), 1000, hidden=64, param_budget=1000)


class TestOracleConstancy:
    def test_unrelated_oracle_internals_do_not_change_grad(self):
        mu_y = np.array([0.3, -0.3])
        a = GaussianOracle({"y": mu_y, "": np.zeros(2)}, 0.05, SCHED)
        b = GaussianOracle({"y": mu_y, "": np.zeros(2),
                            "unused": np.ones(2) * 9}, 0.05, SCHED)
        for step_fn, extra in ((sds_step, ()),
                               (ssd_step, ())):
            ga = step_fn(np.ones(2), a, GuidanceSpec(7.5), SCHED, POL, 0,
                         np.random.default_rng(11), COND).grad_image
            gb = step_fn(np.ones(2), b, GuidanceSpec(7.5), SCHED, POL, 0,
                         np.random.default_rng(11), COND).grad_image
            assert np.array_equal(ga, gb)


class TestDescentSanity:
    """Each loss decreases distance to its fixed point over a 500-step window."""

    def _window(self, step_fn, theta0, fixed_point, seed, lr=0.02):
        rng = np.random.default_rng(seed)
        theta = theta0.copy()
        for i in range(500):
            theta = theta - lr * step_fn(theta, i, rng).grad_image
        return np.linalg.norm(theta - fixed_point), np.linalg.norm(theta0 - fixed_point)

    def test_sds_gaussian(self):
        mu_c, mu_u = np.array([0.8, 0.1]), np.array([0.2, 0.3])
        oracle = GaussianOracle({"y": mu_c, "": mu_u}, 0.05, SCHED)
        w = 7.5
        fp = mu_u + w * (mu_c - mu_u)  # equal variances: guided mean
        pol = TimePolicy(0.02, 0.3)
        end, start = self._window(
            lambda th, i, rng: sds_step(th, oracle, GuidanceSpec(w), SCHED,
                                        pol, i, rng, COND),
            np.array([-2.0, -2.0]), fp, seed=12, lr=0.05)
        assert end < start

    def test_ssd_gaussian(self):
        sched = SCHED
        target = verification.grid_search_ssd_fixed_point(sched)
        oracle = verification.ssd_fixed_point_oracle(sched)
        pol = verification.SSD_FP_SETUP["policy"]
        end, start = self._window(
            lambda th, i, rng: ssd_step(th, oracle, GuidanceSpec(7.5), sched,
                                        pol, i, rng, COND),
            np.array([-1.0, 1.5]), target, seed=13, lr=0.01)
        assert end < start

    def test_vsd_gaussian(self):
        mu_c, mu_u = np.array([0.9, -0.2]), np.array([0.1, 0.1])
        oracle = GaussianOracle({"y": mu_c, "": mu_u}, 0.05, SCHED)
        sur = SurrogateDenoiser((2,), 1000, rng=np.random.default_rng(3))
        w = 7.5
        fp = mu_u + w * (mu_c - mu_u)
        pol = TimePolicy(0.02, 0.3)
        end, start = self._window(
            lambda th, i, rng: vsd_step(th, oracle, sur, GuidanceSpec(w),
                                        SCHED, pol, i, rng, COND),
            np.array([-2.0, -2.0]), fp, seed=14, lr=0.05)
        assert end < start


class TestTraceWriter:
    def test_rows_and_byte_stability(self, tmp_path):
        rows = [(0, 0.5, 1.25, 400, 7.5), (1, 0.25, 0.75, 300, 7.5)]
        paths = []
        for name in ("a.csv", "b.csv"):
            p = tmp_path / name
            with TraceWriter(p) as tw:
                for r in rows:
                    tw.append(*r)
            paths.append(p)
        assert paths[0].read_bytes() == paths[1].read_bytes()
        lines = paths[0].read_text().strip().split("\n")
        assert lines[0] == "iter,loss,grad_norm,t,cfg_weight"
        assert len(lines) == 3
