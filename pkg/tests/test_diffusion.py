"""Schedule construction, forward diffusion, time sampling, CFG algebra."""

import numpy as np
import pytest

from distillforge.diffusion import (Condition, GuidanceSpec, NoiseSchedule,
                                    TimePolicy, add_noise, build_schedule,
                                    cfg_compose, omega, sample_time)
from distillforge.errors import ConfigurationError, DimensionError


def brute_force_alpha_bar(step_count, beta_start, beta_end):
    """Independent cumulative product, one scalar multiply at a time."""
    betas = np.linspace(beta_start, beta_end, step_count)
    out = np.empty(step_count)
    acc = 1.0
    for i, b in enumerate(betas):
        acc = acc * (1.0 - b)
        out[i] = acc
    return out


class TestBuildSchedule:
    def test_two_step_equal_betas(self):
        s = build_schedule(2, 0.5, 0.5)
        assert np.allclose(s.alpha_bar, [0.5, 0.25], rtol=0, atol=1e-15)

    def test_matches_brute_force_product(self):
        s = build_schedule(1000, 1e-4, 2e-2)
        expected = brute_force_alpha_bar(1000, 1e-4, 2e-2)
        assert np.allclose(s.alpha_bar, expected, rtol=1e-10, atol=0)
        # frozen endpoint from the brute-force oracle above
        assert s.alpha_bar[-1] == pytest.approx(4.035829765375676e-05, rel=1e-10)

    def test_alpha_bar_strictly_decreasing(self):
        s = build_schedule(500, 1e-4, 5e-2)
        assert np.all(np.diff(s.alpha_bar) < 0)

    def test_sigma_identity(self):
        s = build_schedule(100, 1e-3, 1e-2)
        assert np.array_equal(s.sigma, np.sqrt(1.0 - s.alpha_bar))

    @pytest.mark.parametrize("args", [
        (2, 0.9, 0.1),    # beta_start > beta_end
        (1, 0.1, 0.2),    # too few steps
        (5, 0.0, 0.2),    # beta_start not positive
        (5, 0.1, 1.0),    # beta_end not < 1
    ])
    def test_invalid_ranges(self, args):
        with pytest.raises(ConfigurationError):
            build_schedule(*args)


class TestAddNoise:
    def test_zero_noise(self):
        s = build_schedule(10, 0.1, 0.1)
        x0 = np.array([1.0, -2.0, 3.0])
        out = add_noise(x0, 3, np.zeros(3), s)
        assert np.allclose(out, np.sqrt(s.alpha_bar[3]) * x0, rtol=0, atol=0)

    def test_hand_evaluated(self):
        # alpha_bar = 0.25 after two steps of beta=0.5
        s = build_schedule(2, 0.5, 0.5)
        out = add_noise(np.array([1.0, 0.0]), 1, np.array([0.0, 1.0]), s)
        assert out == pytest.approx([0.5, np.sqrt(0.75)], rel=1e-15)

    def test_identity_limit(self):
        # beta tiny => alpha_bar ~ 1 => x_t ~ x0
        s = build_schedule(2, 1e-12, 1e-12)
        x0 = np.array([0.3, -0.7])
        out = add_noise(x0, 0, np.zeros(2), s)
        assert out == pytest.approx(x0, rel=1e-11)

    def test_shape_mismatch(self):
        s = build_schedule(10, 0.1, 0.1)
        with pytest.raises(DimensionError):
            add_noise(np.zeros(3), 0, np.zeros(4), s)

    def test_recover_x0_with_true_noise(self):
        rng = np.random.default_rng(0)
        s = build_schedule(1000, 1e-4, 2e-2)
        x0 = rng.standard_normal((4, 4))
        for t in (0, 57, 500, 999):
            eps = rng.standard_normal((4, 4))
            x_t = add_noise(x0, t, eps, s)
            sa, sn = s.signal_and_noise(t)
            assert np.allclose((x_t - sn * eps) / sa, x0, rtol=0, atol=1e-10)


class TestSampleTime:
    def test_geometry_cap(self):
        pol = TimePolicy(min_fraction=0.02, max_fraction=0.5)
        rng = np.random.default_rng(1)
        draws = [sample_time(0, pol, 1000, rng) for _ in range(5000)]
        assert max(draws) < 500
        assert min(draws) >= 20

    def test_anneal_kicks_in(self):
        pol = TimePolicy(min_fraction=0.02, max_fraction=0.98,
                         anneal_at_iter=5000, annealed_max_fraction=0.7)
        rng = np.random.default_rng(2)
        before = [sample_time(4999, pol, 1000, rng) for _ in range(3000)]
        after = [sample_time(6000, pol, 1000, rng) for _ in range(3000)]
        assert max(before) >= 700  # pre-anneal window reaches past 0.7
        assert max(after) < 700

    def test_single_element_window(self):
        pol = TimePolicy(min_fraction=0.2, max_fraction=0.201)
        rng = np.random.default_rng(3)
        assert all(sample_time(0, pol, 1000, rng) == 200 for _ in range(50))

    def test_never_exceeds_effective_max(self):
        # property: across 10^5 draws no sample leaves the window
        pol = TimePolicy(min_fraction=0.1, max_fraction=0.9,
                         anneal_at_iter=10, annealed_max_fraction=0.4)
        rng = np.random.default_rng(4)
        draws = np.array([sample_time(it, pol, 777, rng)
                          for it in (0, 5, 10, 20) for _ in range(25000)])
        assert draws.max() < int(0.9 * 777)
        late = np.array([sample_time(50, pol, 777, rng) for _ in range(1000)])
        assert late.max() < int(0.4 * 777)

    def test_empty_window_rejected(self):
        pol = TimePolicy(min_fraction=0.5, max_fraction=0.5005)
        with pytest.raises(ConfigurationError):
            sample_time(0, pol, 100, np.random.default_rng(0))

    def test_invalid_policies(self):
        with pytest.raises(ConfigurationError):
            TimePolicy(min_fraction=0.5, max_fraction=0.4)
        with pytest.raises(ConfigurationError):
            TimePolicy(min_fraction=0.1, max_fraction=0.5,
                       anneal_at_iter=10, annealed_max_fraction=0.6)


class TestCfgCompose:
    def test_weight_one_is_exact_cond(self):
        rng = np.random.default_rng(5)
        c, u = rng.standard_normal((2, 7, 7))
        out = cfg_compose(c, u, GuidanceSpec(1.0))
        assert np.array_equal(out, c)

    def test_weight_zero_is_exact_uncond(self):
        rng = np.random.default_rng(6)
        c, u = rng.standard_normal((2, 3, 3))
        assert np.array_equal(cfg_compose(c, u, GuidanceSpec(0.0)), u)

    def test_equal_inputs_fixed_point(self):
        rng = np.random.default_rng(7)
        c = rng.standard_normal(10)
        for w in (0.0, 1.0, 7.5, 100.0):
            assert np.allclose(cfg_compose(c, c.copy(), GuidanceSpec(w)), c,
                               rtol=0, atol=1e-12)

    def test_affine_in_weight(self):
        rng = np.random.default_rng(8)
        c, u = rng.standard_normal((2, 16))
        for a, b in ((0.5, 7.5), (2.0, 100.0), (3.3, 4.4)):
            lhs = (cfg_compose(c, u, GuidanceSpec(a))
                   + cfg_compose(c, u, GuidanceSpec(b)))
            rhs = 2.0 * cfg_compose(c, u, GuidanceSpec((a + b) / 2))
            assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            cfg_compose(np.zeros(3), np.zeros(4), GuidanceSpec(2.0))

    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigurationError):
            GuidanceSpec(-1.0)


class TestCondition:
    def test_unconditional_swaps_prompt(self):
        c = Condition(prompt_tag="head", negative_tag="bad", view_tag="front")
        assert c.unconditional(False).prompt_tag == ""
        assert c.unconditional(True).prompt_tag == "bad"

    def test_unconditional_without_negative_uses_empty(self):
        c = Condition(prompt_tag="head")
        assert c.unconditional(True).prompt_tag == ""

    def test_back_view_requires_contour_only_landmark(self):
        class FakeMap:
            contour_only = False
        with pytest.raises(ConfigurationError):
            Condition(prompt_tag="p", view_tag="back", landmark=FakeMap())
        FakeMap.contour_only = True
        Condition(prompt_tag="p", view_tag="back", landmark=FakeMap())  # ok


def test_omega_kinds():
    s = build_schedule(10, 0.1, 0.1)
    assert omega(s, 3, "one") == 1.0
    assert omega(s, 3, "one_minus_alpha_bar") == pytest.approx(
        1.0 - s.alpha_bar[3], rel=1e-15)
    with pytest.raises(ConfigurationError):
        omega(s, 3, "bogus")
