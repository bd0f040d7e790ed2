"""Cone-beam projection geometry.

Pixel centres sit at half-integer coordinates: pixel ``(x, y)`` covers
``[x, x+1) x [y, y+1)`` and is sampled at ``(x + 0.5, y + 0.5)``.  With this
convention an LR camera is obtained from an HR one by scaling the first two
rows of ``K`` by ``1/factor`` and the 4x4 block mean of HR pixels lines up
with the LR pixel centre.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BehindCamera, FormatError, InvalidConfig, NonPSD

DEPTH_EPS = 1e-6
COV2D_FLOOR = 0.1
DEFAULT_BBOX = (-50.0, -50.0, -50.0, 50.0, 50.0, 50.0)


@dataclass(frozen=True, eq=False)
class CameraView:
    view_id: int
    K: np.ndarray
    R: np.ndarray
    t_vec: np.ndarray
    width_hr: int
    height_hr: int
    timestamp: float = 0.0

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t_vec, dtype=np.float64).reshape(3)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t_vec", t)
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-5 or np.linalg.det(R) < 0:
            raise InvalidConfig(f"view {self.view_id}: R is not a proper rotation")
        if np.any(np.tril(K, -1) != 0) or K[0, 0] <= 0 or K[1, 1] <= 0 or K[2, 2] <= 0:
            raise InvalidConfig(f"view {self.view_id}: K must be upper-triangular with positive focals")
        if not 0.0 <= self.timestamp <= 1.0:
            raise InvalidConfig(f"view {self.view_id}: timestamp {self.timestamp} outside [0, 1]")
        if self.width_hr < 1 or self.height_hr < 1:
            raise InvalidConfig("image dimensions must be positive")

    @property
    def P(self) -> np.ndarray:
        """3x4 projection matrix ``K [R | t]``."""
        return self.K @ np.hstack([self.R, self.t_vec[:, None]])

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t_vec

    def scaled(self, width: int, height: int) -> "CameraView":
        """Same pose rendered onto a ``width x height`` pixel grid."""
        sx = width / self.width_hr
        sy = height / self.height_hr
        K = self.K.copy()
        K[0] *= sx
        K[1] *= sy
        return replace(self, K=K, width_hr=int(width), height_hr=int(height))

    def lowres(self, factor: int = 4) -> "CameraView":
        if self.width_hr % factor or self.height_hr % factor:
            raise InvalidConfig(f"HR dims not divisible by {factor}")
        return self.scaled(self.width_hr // factor, self.height_hr // factor)

    def to_dict(self) -> dict:
        return {
            "view_id": int(self.view_id),
            "K": [float(v) for v in self.K.ravel()],
            "R": [float(v) for v in self.R.ravel()],
            "t": [float(v) for v in self.t_vec],
            "width_hr": int(self.width_hr),
            "height_hr": int(self.height_hr),
            "timestamp": float(self.timestamp),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraView":
        try:
            return cls(
                view_id=int(d["view_id"]),
                K=np.array(d["K"], dtype=np.float64),
                R=np.array(d["R"], dtype=np.float64),
                t_vec=np.array(d["t"], dtype=np.float64),
                width_hr=int(d["width_hr"]),
                height_hr=int(d["height_hr"]),
                timestamp=float(d["timestamp"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad view record: {exc}") from exc


@dataclass
class DetectorParams:
    width_hr: int = 256
    height_hr: int = 256
    detector_distance: float = 1000.0  # source-to-detector, mm
    pixel_pitch: float = 1.0  # mm per HR pixel

    @property
    def focal_px(self) -> float:
        return self.detector_distance / self.pixel_pitch


@dataclass
class Trajectory:
    views: list[CameraView]
    source_distance: float
    detector_distance: float
    angles_deg: list[float] = field(default_factory=list)

    def __post_init__(self):
        if len(self.views) < 2:
            raise InvalidConfig("a trajectory needs at least 2 views")
        ts = [v.timestamp for v in self.views]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise InvalidConfig("view timestamps must be non-decreasing")

    def __len__(self) -> int:
        return len(self.views)

    def __iter__(self):
        return iter(self.views)

    def __getitem__(self, i: int) -> CameraView:
        return self.views[i]


def _camera_to_world_rotation(center: np.ndarray, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    # rows are the camera x (image right), y (image down) and z (forward) axes
    z = -center / np.linalg.norm(center)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z])


def look_at_view(
    view_id: int,
    angle_deg: float,
    source_distance: float,
    detector: DetectorParams,
    timestamp: float = 0.0,
) -> CameraView:
    """Camera on the z=0 circle of radius ``source_distance`` facing the origin."""
    a = math.radians(angle_deg)
    center = source_distance * np.array([math.cos(a), math.sin(a), 0.0])
    R = _camera_to_world_rotation(center)
    t = -R @ center
    f = detector.focal_px
    K = np.array([
        [f, 0.0, detector.width_hr / 2.0],
        [0.0, f, detector.height_hr / 2.0],
        [0.0, 0.0, 1.0],
    ])
    return CameraView(view_id, K, R, t, detector.width_hr, detector.height_hr, timestamp)


def make_circular_trajectory(
    n_views: int,
    span_degrees: float,
    source_distance: float = 500.0,
    detector_params: DetectorParams | None = None,
    time_mode: str = "sweep",
    start_degrees: float = 0.0,
    first_view_id: int = 0,
) -> Trajectory:
    """Evenly spaced views on a circular arc around the z axis.

    Arc endpoints are both included unless the span is a full circle, in
    which case the last view would duplicate the first and is dropped.
    """
    detector = detector_params or DetectorParams()
    if n_views < 2:
        raise InvalidConfig("n_views must be >= 2")
    if not 0.0 < span_degrees <= 360.0:
        raise InvalidConfig("span_degrees must lie in (0, 360]")
    if time_mode not in ("sweep", "static"):
        raise InvalidConfig(f"unknown time_mode {time_mode!r}")
    if source_distance <= 0 or detector.detector_distance <= 0:
        raise InvalidConfig("distances must be positive")

    step = span_degrees / n_views if span_degrees == 360.0 else span_degrees / (n_views - 1)
    views, angles = [], []
    for k in range(n_views):
        ang = start_degrees + k * step
        ts = k / (n_views - 1) if time_mode == "sweep" else 0.0
        views.append(look_at_view(first_view_id + k, ang, source_distance, detector, ts))
        angles.append(ang)
    return Trajectory(views, source_distance, detector.detector_distance, angles)


def project_point(mu, view: CameraView, depth_eps: float = DEPTH_EPS):
    """Project a world point to pixel coordinates.

    Returns ``(uv, depth)`` where depth is the camera-frame z in mm.
    """
    xc = view.R @ np.asarray(mu, dtype=np.float64) + view.t_vec
    if xc[2] <= depth_eps:
        raise BehindCamera(f"camera-frame depth {xc[2]:.3g} <= {depth_eps}")
    p = view.K @ xc
    return p[:2] / p[2], float(xc[2])


def projection_jacobian(xc: np.ndarray, K: np.ndarray) -> np.ndarray:
    """2x3 Jacobian of the perspective map ``xc -> (K xc)[:2] / (K xc)[2]``."""
    p = K @ xc
    uv = p[:2] / p[2]
    return (K[:2] - np.outer(uv, K[2])) / p[2]


def _check_psd(Sigma: np.ndarray) -> None:
    if not np.all(np.isfinite(Sigma)) or np.max(np.abs(Sigma - Sigma.T)) > 1e-9 * max(1.0, np.abs(Sigma).max()):
        raise NonPSD("covariance is not symmetric")
    if np.linalg.eigvalsh(Sigma).min() <= -1e-9:
        raise NonPSD("covariance has a negative eigenvalue")


def project_covariance(Sigma, mu, view: CameraView, floor: float = COV2D_FLOOR,
                       depth_eps: float = DEPTH_EPS) -> np.ndarray:
    """Local-affine projection of a 3D covariance to pixel units."""
    Sigma = np.asarray(Sigma, dtype=np.float64)
    _check_psd(Sigma)
    xc = view.R @ np.asarray(mu, dtype=np.float64) + view.t_vec
    if xc[2] <= depth_eps:
        raise BehindCamera(f"camera-frame depth {xc[2]:.3g} <= {depth_eps}")
    J = projection_jacobian(xc, view.K)
    T = J @ view.R
    S2 = T @ Sigma @ T.T
    S2 = 0.5 * (S2 + S2.T)
    S2[0, 0] += floor
    S2[1, 1] += floor
    return S2


def pixel_ray(view: CameraView, uv) -> tuple[np.ndarray, np.ndarray]:
    """World-space origin and unit direction of the ray through ``uv``."""
    d_cam = np.linalg.solve(view.K, np.array([uv[0], uv[1], 1.0]))
    d = view.R.T @ d_cam
    return view.center, d / np.linalg.norm(d)


def backproject(view: CameraView, uv, depth: float) -> np.ndarray:
    """World point on the ray through ``uv`` whose camera-frame z equals ``depth``."""
    d_cam = np.linalg.solve(view.K, np.array([uv[0], uv[1], 1.0]))
    xc = d_cam * (depth / d_cam[2])
    return view.R.T @ (xc - view.t_vec)


def save_geometry(path, views: Sequence[CameraView]) -> None:
    """Write views as JSON with 17 significant digits (exact float64 round trip)."""
    recs = [v.to_dict() for v in views]

    def fmt(o, indent=0):
        # json.dumps already emits shortest round-trip reprs; force 17 digits instead
        if isinstance(o, float):
            return format(o, ".17g")
        if isinstance(o, list):
            return "[" + ", ".join(fmt(x) for x in o) + "]"
        if isinstance(o, dict):
            return "{" + ", ".join(f"{json.dumps(k)}: {fmt(v)}" for k, v in o.items()) + "}"
        return json.dumps(o)

    text = "[\n" + ",\n".join("  " + fmt(r) for r in recs) + "\n]\n"
    Path(path).write_text(text)


def load_geometry(path) -> list[CameraView]:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if not isinstance(data, list):
        raise FormatError(f"{path}: expected a JSON array of views")
    return [CameraView.from_dict(d) for d in data]
