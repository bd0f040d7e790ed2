"""Gaussian kernel set, parameterization and per-kernel running statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfig, NoSamples
from .geometry import DEFAULT_BBOX

SCALE_MIN = 1e-3
SCALE_MAX = 20.0
LOG_SCALE_MIN = math.log(SCALE_MIN)
LOG_SCALE_MAX = math.log(SCALE_MAX)


@dataclass
class GaussianKernel:
    mu: np.ndarray
    log_scale: np.ndarray
    rot: np.ndarray  # unit quaternion (w, x, y, z)

    @property
    def scale(self) -> np.ndarray:
        return np.exp(np.asarray(self.log_scale, dtype=np.float64))

    @property
    def covariance(self) -> np.ndarray:
        return covariance_from_params(self.log_scale, self.rot)


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrices for (..., 4) quaternions (w, x, y, z); normalizes internally."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return R.reshape(q.shape[:-1] + (3, 3))


def covariance_from_params(log_scale, rot) -> np.ndarray:
    """``Sigma = R_q diag(exp(2 log_scale)) R_q^T`` (batched over leading axes)."""
    Rq = quat_to_rotmat(rot)
    s2 = np.exp(2.0 * np.asarray(log_scale, dtype=np.float64))
    return (Rq * s2[..., None, :]) @ np.swapaxes(Rq, -1, -2)


@dataclass
class KernelStats:
    """Running accumulators, one entry per kernel."""

    grad_norm_sum: np.ndarray
    grad_count: np.ndarray
    atten_sum: np.ndarray
    atten_count: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "KernelStats":
        return cls(np.zeros(n), np.zeros(n, dtype=np.int64), np.zeros(n), np.zeros(n, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.grad_count)

    def subset(self, idx) -> "KernelStats":
        return KernelStats(self.grad_norm_sum[idx].copy(), self.grad_count[idx].copy(),
                           self.atten_sum[idx].copy(), self.atten_count[idx].copy())

    def mean_gradient(self) -> np.ndarray:
        out = np.zeros(len(self))
        nz = self.grad_count > 0
        out[nz] = self.grad_norm_sum[nz] / self.grad_count[nz]
        return out


def _bbox_array(bbox) -> np.ndarray:
    b = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
    if np.any(b[1] <= b[0]):
        raise InvalidConfig(f"degenerate bounding box {bbox}")
    return b


@dataclass
class Scene:
    """Struct-of-arrays kernel set.

    ``opt_state`` holds per-kernel optimizer moments registered by the
    trainer; every structural edit (keep/extend) applies to it as well so the
    arrays stay parallel.
    """

    mu: np.ndarray
    log_scale: np.ndarray
    rot: np.ndarray
    stats: KernelStats
    bbox: np.ndarray = field(default_factory=lambda: _bbox_array(DEFAULT_BBOX))
    opt_state: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mu = np.ascontiguousarray(self.mu, dtype=np.float32).reshape(-1, 3)
        self.log_scale = np.ascontiguousarray(self.log_scale, dtype=np.float32).reshape(-1, 3)
        self.rot = np.ascontiguousarray(self.rot, dtype=np.float32).reshape(-1, 4)
        self.bbox = _bbox_array(self.bbox)

    def __len__(self) -> int:
        return self.mu.shape[0]

    @property
    def n(self) -> int:
        return len(self)

    def kernel(self, i: int) -> GaussianKernel:
        return GaussianKernel(self.mu[i].copy(), self.log_scale[i].copy(), self.rot[i].copy())

    def covariances(self) -> np.ndarray:
        return covariance_from_params(self.log_scale, self.rot)

    def keep(self, mask) -> None:
        mask = np.asarray(mask)
        self.mu = self.mu[mask]
        self.log_scale = self.log_scale[mask]
        self.rot = self.rot[mask]
        self.stats = self.stats.subset(mask)
        for k, v in self.opt_state.items():
            self.opt_state[k] = v[mask]

    def extend(self, mu, log_scale, rot) -> None:
        """Append kernels with zeroed statistics and optimizer state."""
        mu = np.asarray(mu, dtype=np.float32).reshape(-1, 3)
        m = mu.shape[0]
        if m == 0:
            return
        self.mu = np.concatenate([self.mu, mu])
        self.log_scale = np.concatenate([self.log_scale, np.asarray(log_scale, np.float32).reshape(m, 3)])
        self.rot = np.concatenate([self.rot, np.asarray(rot, np.float32).reshape(m, 4)])
        z = KernelStats.zeros(m)
        s = self.stats
        self.stats = KernelStats(
            np.concatenate([s.grad_norm_sum, z.grad_norm_sum]),
            np.concatenate([s.grad_count, z.grad_count]),
            np.concatenate([s.atten_sum, z.atten_sum]),
            np.concatenate([s.atten_count, z.atten_count]),
        )
        for k, v in self.opt_state.items():
            self.opt_state[k] = np.concatenate([v, np.zeros((m,) + v.shape[1:], v.dtype)])

    def sanitize(self) -> None:
        """Renormalize quaternions, clamp scales and keep means near the box."""
        q = self.rot.astype(np.float64)
        norm = np.linalg.norm(q, axis=1, keepdims=True)
        bad = norm[:, 0] < 1e-12
        q[bad] = (1.0, 0.0, 0.0, 0.0)
        norm[bad] = 1.0
        self.rot = (q / norm).astype(np.float32)
        np.clip(self.log_scale, LOG_SCALE_MIN, LOG_SCALE_MAX, out=self.log_scale)
        pad = 0.1 * (self.bbox[1] - self.bbox[0])
        np.clip(self.mu, (self.bbox[0] - pad).astype(np.float32),
                (self.bbox[1] + pad).astype(np.float32), out=self.mu)

    def copy(self) -> "Scene":
        return Scene(self.mu.copy(), self.log_scale.copy(), self.rot.copy(),
                     self.stats.subset(slice(None)), self.bbox.copy(),
                     {k: v.copy() for k, v in self.opt_state.items()})


@dataclass
class SceneConfig:
    bbox: tuple = DEFAULT_BBOX
    n_init: int = 2000


def init_scene(config: SceneConfig, seed: int, points=None) -> Scene:
    """Uniform-random isotropic kernels inside ``config.bbox``.

    ``points`` (M x 3) replaces the random means when given, e.g. a coarse
    point cloud from another reconstruction.
    """
    bbox = _bbox_array(config.bbox)
    rng = np.random.default_rng(seed)
    if points is not None:
        mu = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        n = mu.shape[0]
        if n < 1:
            raise InvalidConfig("empty seed point cloud")
    else:
        n = int(config.n_init)
        if n < 1:
            raise InvalidConfig("n_init must be >= 1")
        mu = rng.uniform(bbox[0], bbox[1], size=(n, 3))
    diag = float(np.linalg.norm(bbox[1] - bbox[0]))
    s = np.clip(diag / np.cbrt(n) / 4.0, SCALE_MIN, SCALE_MAX)
    log_scale = np.full((n, 3), math.log(s))
    rot = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    return Scene(mu, log_scale, rot, KernelStats.zeros(n), bbox)


def reset_stats(scene: Scene, which: str = "both") -> None:
    if which not in ("gradients", "attenuation", "both"):
        raise InvalidConfig(f"unknown stats selector {which!r}")
    n = len(scene)
    if which in ("gradients", "both"):
        scene.stats.grad_norm_sum = np.zeros(n)
        scene.stats.grad_count = np.zeros(n, dtype=np.int64)
    if which in ("attenuation", "both"):
        scene.stats.atten_sum = np.zeros(n)
        scene.stats.atten_count = np.zeros(n, dtype=np.int64)


def accumulate_attenuation(scene: Scene, rho) -> None:
    rho = np.asarray(rho, dtype=np.float64)
    scene.stats.atten_sum += rho
    scene.stats.atten_count += 1


def mean_attenuation(stats: KernelStats) -> np.ndarray:
    """Time-averaged attenuation over the current pruning window."""
    if np.any(np.asarray(stats.atten_count) <= 0):
        raise NoSamples("attenuation queried before any sample was accumulated")
    return np.asarray(stats.atten_sum) / np.asarray(stats.atten_count)
