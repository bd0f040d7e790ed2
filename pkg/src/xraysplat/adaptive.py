"""Adaptive density control: attenuation pruning, sub-pixel gradient
densification and residual-guided kernel insertion."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import CapExceeded, InvalidConfig
from .geometry import CameraView, backproject, pixel_ray
from .rasterizer import RasterCache, RenderContext, rasterize, top_contributors
from .scene import (
    LOG_SCALE_MAX,
    LOG_SCALE_MIN,
    GaussianKernel,
    KernelStats,
    Scene,
    covariance_from_params,
    mean_attenuation,
)

log = logging.getLogger(__name__)

__all__ = [
    "AdaptiveConfig", "mean_attenuation", "prune_mask", "prune", "eta", "select_densify",
    "sample_offsets", "split_kernel", "densify", "residual_guided_insert",
]


@dataclass
class AdaptiveConfig:
    """Adaptive density control settings.

    ``grad_reduction`` fixes the unit of the accumulated screen-space
    gradient that ``grad_threshold`` is compared against: ``"sum"`` measures
    it for the loss summed over LR pixels (the trainer rescales the
    mean-reduced gradient by the LR pixel count), ``"mean"`` uses the
    mean-reduced loss as is.
    """

    window: int = 100
    prune_eps: float = 1e-6
    grad_threshold: float = 0.016
    eta_start: float = 1.0
    eta_end: float = 0.5
    K_children: int = 2
    offset_alpha: float = 1.0
    scale_beta: float = 0.6
    residual_quantile: float = 0.99
    residual_insert_cap: int = 32
    max_kernels: int = 20000
    grad_reduction: str = "sum"

    def __post_init__(self):
        if not 0.0 < self.scale_beta < 1.0:
            raise InvalidConfig("scale_beta must lie in (0, 1)")
        if not 0.0 < self.eta_end <= self.eta_start:
            raise InvalidConfig("need 0 < eta_end <= eta_start")
        if self.prune_eps <= 0:
            raise InvalidConfig("prune_eps must be positive")
        if self.window < 1 or self.K_children < 1 or self.max_kernels < 1:
            raise InvalidConfig("window, K_children and max_kernels must be positive")
        if self.offset_alpha < 0:
            raise InvalidConfig("offset_alpha must be non-negative")
        if self.grad_reduction not in ("sum", "mean"):
            raise InvalidConfig("grad_reduction must be 'sum' or 'mean'")


def prune_mask(stats: KernelStats, config: AdaptiveConfig) -> np.ndarray:
    """True for kernels that survive (window-mean attenuation >= eps)."""
    return ~(mean_attenuation(stats) < config.prune_eps)


def prune(scene: Scene, config: AdaptiveConfig) -> int:
    """Drop kernels whose mean attenuation over the window is below ``prune_eps``.

    Survivors start a fresh attenuation window.
    """
    keep = prune_mask(scene.stats, config)
    removed = int((~keep).sum())
    if removed:
        scene.keep(keep)
    scene.stats.atten_sum[:] = 0.0
    scene.stats.atten_count[:] = 0
    return removed


def eta(iteration: int, max_iter: int, config: AdaptiveConfig) -> float:
    """Linearly decaying threshold multiplier."""
    frac = 0.0 if max_iter <= 0 else min(max(iteration / max_iter, 0.0), 1.0)
    return config.eta_start + (config.eta_end - config.eta_start) * frac


def select_densify(scene: Scene, config: AdaptiveConfig, iteration: int, max_iter: int) -> np.ndarray:
    st = scene.stats
    threshold = config.grad_threshold * eta(iteration, max_iter, config)
    counted = st.grad_count > 0
    mean = np.zeros(len(st))
    mean[counted] = st.grad_norm_sum[counted] / st.grad_count[counted]
    return np.flatnonzero(counted & (mean > threshold))


def sample_offsets(Sigma, alpha: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draws from N(0, alpha * Sigma) through a Cholesky factor."""
    z = rng.standard_normal((n, 3))
    if alpha == 0.0:
        return np.zeros((n, 3))
    L = np.linalg.cholesky(alpha * np.asarray(Sigma, dtype=np.float64))
    return z @ L.T


def split_kernel(kernel: GaussianKernel, config: AdaptiveConfig, rng: np.random.Generator,
                 n_kernels: int | None = None) -> list[GaussianKernel]:
    """Children replacing ``kernel``: jittered means, scales shrunk by ``scale_beta``.

    ``n_kernels`` is the current scene size, used for the cap check.
    """
    K = config.K_children
    if n_kernels is not None and n_kernels - 1 + K > config.max_kernels:
        raise CapExceeded(f"splitting would grow the scene past {config.max_kernels} kernels")
    Sigma = covariance_from_params(kernel.log_scale, kernel.rot)
    offsets = sample_offsets(Sigma, config.offset_alpha, K, rng)
    mu = np.asarray(kernel.mu, dtype=np.float64)
    ls = np.clip(np.asarray(kernel.log_scale, dtype=np.float64) + math.log(config.scale_beta),
                 LOG_SCALE_MIN, LOG_SCALE_MAX)
    rot = np.asarray(kernel.rot, dtype=np.float64)
    return [GaussianKernel(mu + off, ls.copy(), rot.copy()) for off in offsets]


def densify(scene: Scene, indices, config: AdaptiveConfig, rng: np.random.Generator) -> int:
    """Split every selected kernel (in index order) until the cap is reached."""
    children = []
    n = len(scene)
    parents = []
    for i in np.asarray(indices, dtype=np.int64):
        try:
            kids = split_kernel(scene.kernel(int(i)), config, rng, n_kernels=n)
        except CapExceeded:
            log.info("kernel cap %d reached; %d splits skipped", config.max_kernels,
                     len(indices) - len(parents))
            break
        n += len(kids) - 1
        parents.append(int(i))
        children.extend(kids)
    if not parents:
        return 0
    keep = np.ones(len(scene), dtype=bool)
    keep[parents] = False
    scene.keep(keep)
    scene.extend(np.array([c.mu for c in children]), np.array([c.log_scale for c in children]),
                 np.array([c.rot for c in children]))
    return len(parents)


def residual_guided_insert(scene: Scene, residual_image, view: CameraView, config: AdaptiveConfig,
                           rng: np.random.Generator, raster: RasterCache | None = None,
                           ctx: RenderContext | None = None) -> int:
    """Seed small kernels behind the highest-residual pixels of one view.

    Depth for each new kernel comes from the kernel contributing most to that
    pixel in ``raster`` (the render that produced the residual).  Without a
    raster cache, footprints are ranked with unit attenuation.  Pixels no
    kernel reaches fall back to the ray's closest approach to the box centre.
    """
    res = np.asarray(residual_image, dtype=np.float64)
    if res.shape != (view.height_hr, view.width_hr):
        view = view.scaled(res.shape[1], res.shape[0])
    thr = np.quantile(res, config.residual_quantile)
    ys, xs = np.nonzero(res > thr)
    if len(xs) == 0:
        return 0
    room = config.max_kernels - len(scene)
    n_take = min(len(xs), config.residual_insert_cap, max(room, 0))
    if n_take < min(len(xs), config.residual_insert_cap):
        log.info("kernel cap %d limits residual insertion to %d", config.max_kernels, n_take)
    if n_take == 0:
        return 0
    pick = np.sort(rng.choice(len(xs), size=n_take, replace=False))
    pix = np.stack([xs[pick], ys[pick]], axis=1)

    if raster is None and len(scene):
        _, raster = rasterize(scene.mu, scene.log_scale, scene.rot, np.ones(len(scene)), view, ctx)
    best = top_contributors(raster, pix) if raster is not None else np.full(n_take, -1)
    depth = raster.proj.depth if raster is not None else None

    if len(scene):
        med = float(np.median(np.exp(scene.log_scale.astype(np.float64).mean(axis=1))))
    else:
        med = float(np.linalg.norm(scene.bbox[1] - scene.bbox[0])) / 100.0
    ls = np.clip(math.log(0.5 * med), LOG_SCALE_MIN, LOG_SCALE_MAX)
    centre = scene.bbox.mean(axis=0)

    mus = []
    for (x, y), b in zip(pix, best):
        uv = (x + 0.5, y + 0.5)
        if b >= 0:
            d = float(depth[b])
        else:
            o, dirn = pixel_ray(view, uv)
            s = float(np.dot(centre - o, dirn))
            d = float((view.R @ (o + s * dirn) + view.t_vec)[2])
        mus.append(backproject(view, uv, d))
    m = len(mus)
    scene.extend(np.array(mus), np.full((m, 3), ls), np.tile([1.0, 0.0, 0.0, 0.0], (m, 1)))
    return m
