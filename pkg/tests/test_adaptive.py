import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_scene, small_view
from xraysplat.adaptive import (
    AdaptiveConfig,
    densify,
    eta,
    mean_attenuation,
    prune,
    prune_mask,
    residual_guided_insert,
    sample_offsets,
    select_densify,
    split_kernel,
)
from xraysplat.errors import CapExceeded, InvalidConfig, NoSamples
from xraysplat.geometry import project_point
from xraysplat.scene import (
    LOG_SCALE_MIN,
    GaussianKernel,
    KernelStats,
    Scene,
    SceneConfig,
    accumulate_attenuation,
    covariance_from_params,
    init_scene,
)


def _stats(atten=None, grads=None):
    n = len(atten if atten is not None else grads)
    s = KernelStats.zeros(n)
    if atten is not None:
        a = np.asarray(atten, dtype=float)
        s.atten_sum[:] = a.sum(axis=1)
        s.atten_count[:] = a.shape[1]
    if grads is not None:
        for i, g in enumerate(grads):
            s.grad_norm_sum[i] = float(np.sum(g))
            s.grad_count[i] = len(g)
    return s


class TestMeanAttenuation:
    def test_constant_samples(self):
        np.testing.assert_allclose(mean_attenuation(_stats([[0.5, 0.5, 0.5]])), [0.5])

    def test_zero_samples(self):
        assert mean_attenuation(_stats([[0.0, 0.0]])).tolist() == [0.0]

    def test_random_samples(self, rng):
        x = rng.uniform(0, 1, size=(1, 100))
        assert abs(mean_attenuation(_stats(x))[0] - x.mean()) <= 1e-7

    def test_no_samples(self):
        with pytest.raises(NoSamples):
            mean_attenuation(KernelStats.zeros(3))


class TestPrune:
    def test_all_zero_kernel_is_pruned(self):
        s = init_scene(SceneConfig(n_init=2), seed=0)
        for _ in range(3):
            accumulate_attenuation(s, [0.0, 0.3])
        assert prune(s, AdaptiveConfig()) == 1 and len(s) == 1

    def test_boundary_value_is_kept(self):
        s = init_scene(SceneConfig(n_init=3), seed=0)
        accumulate_attenuation(s, [1e-6, np.nextafter(1e-6, 0), 2e-6])
        keep = prune_mask(s.stats, AdaptiveConfig())
        assert keep.tolist() == [True, False, True]

    @given(st.lists(st.floats(0, 3e-6), min_size=1, max_size=40), st.integers(1, 5))
    def test_survivors_equal_brute_force_filter(self, rhos, reps):
        s = init_scene(SceneConfig(n_init=len(rhos)), seed=0)
        s.mu[:, 0] = np.arange(len(rhos))  # tag kernels to identify survivors
        logged = []
        for r in range(reps):
            sample = np.array(rhos) * (1 + 0.1 * r)
            accumulate_attenuation(s, sample)
            logged.append(sample)
        means = np.mean(logged, axis=0)
        want = [i for i in range(len(rhos)) if not means[i] < 1e-6]
        removed = prune(s, AdaptiveConfig())
        assert removed == len(rhos) - len(want)
        assert s.mu[:, 0].astype(int).tolist() == want
        assert len(s.stats) == len(s) and not s.stats.atten_count.any()

    def test_prune_twice_removes_nothing_more(self, rng):
        s = init_scene(SceneConfig(n_init=30), seed=0)
        rho = rng.uniform(0, 2e-6, 30)
        accumulate_attenuation(s, rho)
        prune(s, AdaptiveConfig())
        accumulate_attenuation(s, rho[rho >= 1e-6])
        assert prune(s, AdaptiveConfig()) == 0

    def test_mid_window(self):
        with pytest.raises(NoSamples):
            prune(init_scene(SceneConfig(n_init=2), seed=0), AdaptiveConfig())


class TestSelect:
    def _scene(self, grads):
        s = init_scene(SceneConfig(n_init=len(grads)), seed=0)
        s.stats = _stats(grads=grads)
        return s

    def test_threshold_example(self):
        s = self._scene([[0.02], [0.0], [0.016]])
        assert select_densify(s, AdaptiveConfig(), 0, 3000).tolist() == [0]

    def test_uncounted_never_selected(self):
        s = init_scene(SceneConfig(n_init=2), seed=0)
        s.stats.grad_norm_sum[:] = 5.0
        assert select_densify(s, AdaptiveConfig(), 0, 10).size == 0

    def test_eta_schedule(self):
        cfg = AdaptiveConfig()
        assert eta(0, 3000, cfg) == 1.0
        assert eta(3000, 3000, cfg) == 0.5
        assert math.isclose(eta(1500, 3000, cfg), 0.75)
        # later iterations accept smaller gradients
        s = self._scene([[0.01]])
        assert select_densify(s, cfg, 0, 3000).size == 0
        assert select_densify(s, cfg, 3000, 3000).tolist() == [0]

    @given(st.lists(st.lists(st.floats(0, 0.05), min_size=0, max_size=5), min_size=1, max_size=30),
           st.integers(0, 3000))
    def test_selection_equals_brute_force(self, grads, it):
        s = self._scene(grads)
        thr = 0.016 * (1.0 - 0.5 * it / 3000)
        want = [i for i, g in enumerate(grads) if g and sum(g) / len(g) > thr]
        assert select_densify(s, AdaptiveConfig(), it, 3000).tolist() == want

    @given(st.lists(st.floats(0, 0.05), min_size=1, max_size=30), st.floats(1e-4, 0.05), st.floats(1e-4, 0.05))
    def test_monotone_in_threshold(self, g, d1, d2):
        lo, hi = sorted((d1, d2))
        s = self._scene([[x] for x in g])
        a = set(select_densify(s, AdaptiveConfig(grad_threshold=lo), 100, 1000).tolist())
        b = set(select_densify(s, AdaptiveConfig(grad_threshold=hi), 100, 1000).tolist())
        assert b <= a


class TestSplit:
    def test_child_scale_is_beta_times_parent(self, rng):
        parent = GaussianKernel(np.array([1.0, 2.0, 3.0]), np.zeros(3), np.array([1.0, 0, 0, 0]))
        kids = split_kernel(parent, AdaptiveConfig(), rng)
        assert len(kids) == 2
        for k in kids:
            np.testing.assert_allclose(k.scale, [0.6, 0.6, 0.6], rtol=1e-12)
            np.testing.assert_array_equal(k.rot, parent.rot)

    @given(st.lists(st.floats(-6, 2.9), min_size=3, max_size=3))
    def test_child_scale_exact_or_clamped(self, ls):
        parent = GaussianKernel(np.zeros(3), np.array(ls), np.array([0.5, 0.5, 0.5, 0.5]))
        for k in split_kernel(parent, AdaptiveConfig(), np.random.default_rng(0)):
            want = np.maximum(np.array(ls) + math.log(0.6), LOG_SCALE_MIN)
            np.testing.assert_allclose(k.log_scale, want, rtol=0, atol=1e-12)

    def test_zero_alpha_keeps_parent_mean(self, rng):
        parent = GaussianKernel(np.array([4.0, -1.0, 2.0]), np.ones(3), np.array([1.0, 0, 0, 0]))
        for k in split_kernel(parent, AdaptiveConfig(offset_alpha=0.0, K_children=3), rng):
            np.testing.assert_array_equal(k.mu, parent.mu)

    def test_offset_covariance_monte_carlo(self, rng):
        Sigma = covariance_from_params(np.log([2.0, 0.5, 1.0]), np.array([0.9, 0.1, -0.3, 0.2]))
        for alpha in (1.0, 0.3):
            x = sample_offsets(Sigma, alpha, 100_000, rng)
            emp = np.cov(x.T)
            assert np.linalg.norm(emp - alpha * Sigma) <= 0.05 * np.linalg.norm(alpha * Sigma)

    def test_deterministic_for_seed(self):
        parent = GaussianKernel(np.zeros(3), np.ones(3), np.array([1.0, 0, 0, 0]))
        a = split_kernel(parent, AdaptiveConfig(), np.random.default_rng(5))
        b = split_kernel(parent, AdaptiveConfig(), np.random.default_rng(5))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.mu, y.mu)

    def test_cap(self, rng):
        parent = GaussianKernel(np.zeros(3), np.ones(3), np.array([1.0, 0, 0, 0]))
        with pytest.raises(CapExceeded):
            split_kernel(parent, AdaptiveConfig(max_kernels=10), rng, n_kernels=10)

    def test_densify_replaces_parents(self, rng):
        s = random_scene(rng, 6)
        s.mu[:, 0] = np.arange(6)
        n = densify(s, [1, 4], AdaptiveConfig(offset_alpha=0.0), rng)
        assert n == 2 and len(s) == 8
        assert s.mu[:4, 0].tolist() == [0, 2, 3, 5]
        assert s.mu[4:, 0].tolist() == [1, 1, 4, 4]
        assert not s.stats.grad_count.any() and len(s.stats) == 8

    def test_densify_stops_at_cap(self, rng):
        s = random_scene(rng, 5)
        n = densify(s, [0, 1, 2, 3], AdaptiveConfig(max_kernels=7), rng)
        assert n == 2 and len(s) == 7


class TestResidualInsert:
    def _scene(self, rng):
        s = random_scene(rng, 20, spread=15.0, log_scale=(0.3, 1.2))
        return Scene(s.mu, s.log_scale, s.rot, KernelStats.zeros(20), bbox=(-50, -50, -50, 50, 50, 50))

    def test_zero_residual(self, rng):
        s = self._scene(rng)
        assert residual_guided_insert(s, np.zeros((32, 32)), small_view(), AdaptiveConfig(), rng) == 0
        assert len(s) == 20

    @pytest.mark.parametrize("pixel", [(5, 7), (16, 16), (30, 2)])
    def test_single_hot_pixel(self, rng, pixel):
        s = self._scene(rng)
        view = small_view(angle=25.0)
        res = np.zeros((32, 32))
        res[pixel[1], pixel[0]] = 1.0
        assert residual_guided_insert(s, res, view, AdaptiveConfig(), rng) == 1
        uv, _ = project_point(s.mu[-1].astype(np.float64), view)
        assert np.hypot(uv[0] - pixel[0] - 0.5, uv[1] - pixel[1] - 0.5) <= 0.5
        np.testing.assert_array_equal(s.rot[-1], [1, 0, 0, 0])
        assert s.stats.grad_count[-1] == 0 and s.stats.atten_count[-1] == 0

    def test_depth_from_top_contributor(self, rng):
        view = small_view(angle=0.0)
        s = Scene(np.zeros((1, 3)), np.full((1, 3), 1.5), np.array([[1.0, 0, 0, 0]]), KernelStats.zeros(1))
        res = np.zeros((32, 32))
        res[16, 16] = 1.0
        residual_guided_insert(s, res, view, AdaptiveConfig(), rng)
        d0 = (view.R @ s.mu[0].astype(float) + view.t_vec)[2]
        d1 = (view.R @ s.mu[1].astype(float) + view.t_vec)[2]
        assert math.isclose(d0, d1, rel_tol=1e-6)
        assert math.isclose(float(np.exp(s.log_scale[1, 0])), 0.5 * math.exp(1.5), rel_tol=1e-6)

    def test_fallback_depth_is_closest_approach_to_centre(self, rng):
        view = small_view(angle=0.0)
        s = Scene(np.array([[0.0, 0.0, 45.0]]), np.zeros((1, 3)), np.array([[1.0, 0, 0, 0]]), KernelStats.zeros(1))
        res = np.zeros((32, 32))
        res[29, 28] = 1.0  # a tile the lone kernel does not reach
        residual_guided_insert(s, res, view, AdaptiveConfig(), rng)
        p = s.mu[-1].astype(float)
        d = p - view.center
        d /= np.linalg.norm(d)
        # the inserted point is the foot of the perpendicular from the box centre
        assert abs(np.dot(-p, d)) <= 1e-3

    def test_cap_per_window(self, rng):
        s = self._scene(rng)
        res = rng.uniform(size=(64, 64))
        view = small_view(64, 64)
        n = residual_guided_insert(s, res, view, AdaptiveConfig(residual_quantile=0.5), rng)
        assert n == 32 and len(s) == 52

    def test_kernel_cap(self, rng):
        s = self._scene(rng)
        res = rng.uniform(size=(32, 32))
        assert residual_guided_insert(s, res, small_view(), AdaptiveConfig(max_kernels=25), rng) == 5
        assert residual_guided_insert(s, res, small_view(), AdaptiveConfig(max_kernels=25), rng) == 0


@pytest.mark.parametrize("kwargs", [dict(scale_beta=1.0), dict(scale_beta=0.0), dict(eta_end=1.5),
                                    dict(prune_eps=0.0), dict(window=0), dict(grad_reduction="max")])
def test_config_invariants(kwargs):
    with pytest.raises(InvalidConfig):
        AdaptiveConfig(**kwargs)
