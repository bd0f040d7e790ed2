"""Synthetic dynamic vessel phantom with exact line-integral projections.

The phantom is a mixture of elongated Gaussian blobs laid along a branching
tree.  Contrast reaches each blob at an arrival time growing with its path
length from the root and then follows a gamma-variate curve.  Because every
blob is Gaussian, the X-ray line integral through the phantom has a closed
form, which makes this module the ground truth for reconstruction tests.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, FormatError, InvalidConfig, check_time
from .geometry import (
    DEFAULT_BBOX,
    CameraView,
    DetectorParams,
    Trajectory,
    load_geometry,
    look_at_view,
    make_circular_trajectory,
    save_geometry,
)
from .io import read_pfm, write_pfm
from .supervision import downsample_area

ROOT_RADIUS = 2.0  # mm
HR_PATTERN = "hr/{view}_{frame:04}.pfm"
LR_PATTERN = "lr/{view}_{frame:04}.pfm"
HELDOUT_PATTERN = "heldout/hr/{view}_{frame:04}.pfm"


@dataclass
class PhantomBlob:
    mu: np.ndarray
    Sigma: np.ndarray
    branch_id: int
    arrival: float


@dataclass
class BolusParams:
    a: float = 1.0
    k: float = 3.0
    tau_b: float = 0.15

    def __post_init__(self):
        if self.a <= 0 or self.k <= 0 or self.tau_b <= 0:
            raise InvalidConfig("bolus parameters must be positive")


def bolus_curve(t, arrival, params: BolusParams | None = None):
    """Gamma-variate contrast concentration, peaking at ``a`` when
    ``t = arrival + k * tau_b``."""
    p = params or BolusParams()
    dt = np.asarray(t, dtype=np.float64) - np.asarray(arrival, dtype=np.float64)
    pos = np.maximum(dt, 0.0)
    val = p.a * (pos / (p.k * p.tau_b)) ** p.k * np.exp(p.k - pos / p.tau_b)
    out = np.where(dt > 0, val, 0.0)
    return float(out) if out.ndim == 0 else out


def bolus_integral(params: BolusParams | None = None) -> float:
    """Integral of the curve over ``[arrival, inf)``."""
    p = params or BolusParams()
    return p.a * math.exp(p.k) * p.tau_b * math.gamma(p.k + 1) / p.k ** p.k


def _rotate_towards(d: np.ndarray, angle: float, azimuth: float) -> np.ndarray:
    # tilt unit vector d by `angle` in the plane picked by `azimuth`
    helper = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(d, helper)
    u /= np.linalg.norm(u)
    v = np.cross(d, u)
    perp = math.cos(azimuth) * u + math.sin(azimuth) * v
    return math.cos(angle) * d + math.sin(angle) * perp


def generate_phantom(seed: int, n_branches: int = 31, blobs_per_branch: int = 8,
                     bbox=DEFAULT_BBOX, arrival_offset: float = 0.05) -> list[PhantomBlob]:
    """Blob list for a binary vessel tree with ``n_branches`` segments.

    Segments are created breadth-first: the root runs up the z axis and each
    segment forks into two thinner, shorter children.  The tree is sized to a
    quarter of the smallest box extent so it stays in view from every angle
    of a circular orbit.
    """
    if n_branches < 1 or blobs_per_branch < 1:
        raise InvalidConfig("n_branches and blobs_per_branch must be >= 1")
    lo = np.asarray(bbox[:3], dtype=np.float64)
    hi = np.asarray(bbox[3:], dtype=np.float64)
    if np.any(hi <= lo):
        raise InvalidConfig("bbox must have positive extent")
    rng = np.random.default_rng(seed)
    centre = 0.5 * (lo + hi)
    size = 0.25 * float(np.min(hi - lo))
    margin = 0.05 * (hi - lo)

    # queue entries: (start, direction, length, radius, path length at start)
    queue = [(centre - np.array([0.0, 0.0, size]), np.array([0.0, 0.0, 1.0]), 0.8 * size, ROOT_RADIUS, 0.0)]
    segments = []
    while queue and len(segments) < n_branches:
        start, d, length, radius, path0 = queue.pop(0)
        end = np.clip(start + length * d, lo + margin, hi - margin)
        length = float(np.linalg.norm(end - start))
        if length < 1e-6:
            continue
        d = (end - start) / length
        segments.append((start, end, d, length, radius, path0))
        azimuth = rng.uniform(0.0, 2 * math.pi)
        for side in (0.0, math.pi):
            angle = rng.uniform(math.radians(25), math.radians(45))
            child_d = _rotate_towards(d, angle, azimuth + side)
            queue.append((end, child_d, 0.7 * length, 0.5 * radius, path0 + length))

    blobs = []
    max_path = max(p0 + L for _, _, _, L, _, p0 in segments)
    for branch_id, (start, end, d, length, radius, path0) in enumerate(segments):
        sig_long = length / blobs_per_branch
        # orthonormal frame with d first
        helper = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        u = np.cross(d, helper)
        u /= np.linalg.norm(u)
        v = np.cross(d, u)
        frame = np.stack([d, u, v], axis=1)
        Sigma = frame @ np.diag([sig_long ** 2, radius ** 2, radius ** 2]) @ frame.T
        Sigma = 0.5 * (Sigma + Sigma.T)
        for j in range(blobs_per_branch):
            s = (j + 0.5) / blobs_per_branch * length
            arrival = arrival_offset + 0.5 * (path0 + s) / max_path
            blobs.append(PhantomBlob(start + s * d, Sigma.copy(), branch_id, float(arrival)))
    return blobs


def _pixel_directions(view: CameraView, width: int, height: int) -> np.ndarray:
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    u, v = np.meshgrid(xs, ys)
    pix = np.stack([u.ravel(), v.ravel(), np.ones(u.size)], axis=1)
    d_cam = np.linalg.solve(view.K, pix.T).T
    d = d_cam @ view.R  # rows are R^T d_cam
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def blob_line_integrals(blobs, view: CameraView, width: int, height: int) -> np.ndarray:
    """``(H*W, B)`` matrix of unit-amplitude line integrals, one column per blob.

    For a ray ``o + s d`` and quadratic ``q(x) = (x-mu)^T P (x-mu)`` the
    integral of ``exp(-q/2)`` over ``s`` is ``sqrt(2 pi / a) exp(-(c - b^2/a)/2)``
    with ``a = d^T P d``, ``b = d^T P (o-mu)``, ``c = (o-mu)^T P (o-mu)``.
    """
    D = _pixel_directions(view, width, height)
    o = view.center
    if not len(blobs):
        return np.zeros((D.shape[0], 0))
    P = np.linalg.inv(np.stack([b.Sigma for b in blobs]))  # (B, 3, 3)
    E = o[None, :] - np.stack([b.mu for b in blobs])  # (B, 3)
    # quadratic form d^T P d from the six unique products of d
    DD = np.stack([D[:, 0] ** 2, D[:, 1] ** 2, D[:, 2] ** 2,
                   2 * D[:, 0] * D[:, 1], 2 * D[:, 0] * D[:, 2], 2 * D[:, 1] * D[:, 2]], axis=1)
    Pv = np.stack([P[:, 0, 0], P[:, 1, 1], P[:, 2, 2], P[:, 0, 1], P[:, 0, 2], P[:, 1, 2]])
    a = DD @ Pv
    PE = np.einsum("bij,bj->bi", P, E)
    b = D @ PE.T
    c = np.einsum("bi,bi->b", E, PE)
    M = np.sqrt(2 * np.pi / a) * np.exp(-0.5 * np.maximum(c[None, :] - b * b / a, 0.0))
    return M


def concentrations(blobs, t, bolus: BolusParams | None = None) -> np.ndarray:
    arrivals = np.array([b.arrival for b in blobs])
    return np.asarray(bolus_curve(t, arrivals, bolus), dtype=np.float64).reshape(len(blobs))


def analytic_project(blobs, bolus: BolusParams | None, view: CameraView, t: float,
                     width: int | None = None, height: int | None = None) -> np.ndarray:
    """Exact line-integral projection of the phantom at time ``t``."""
    t = check_time(t)
    width = width or view.width_hr
    height = height or view.height_hr
    if (width, height) != (view.width_hr, view.height_hr):
        view = view.scaled(width, height)
    c = concentrations(blobs, t, bolus)
    live = c > 0
    if not np.any(live):
        return np.zeros((height, width))
    M = blob_line_integrals([b for b, k in zip(blobs, live) if k], view, width, height)
    return (M @ c[live]).reshape(height, width)


def frame_times(n_frames: int) -> np.ndarray:
    if n_frames < 1:
        raise InvalidConfig("n_frames must be >= 1")
    if n_frames == 1:
        return np.zeros(1)
    return np.arange(n_frames) / (n_frames - 1)


def _project_all(blobs, bolus, views, times, hr_dims) -> np.ndarray:
    W, H = hr_dims
    C = np.stack([concentrations(blobs, t, bolus) for t in times], axis=1)  # (B, F)
    out = np.empty((len(views), len(times), H, W))
    for i, view in enumerate(views):
        v = view if (view.width_hr, view.height_hr) == (W, H) else view.scaled(W, H)
        M = blob_line_integrals(blobs, v, W, H)
        out[i] = (M @ C).T.reshape(len(times), H, W)
    return out


def make_dataset(blobs, trajectory: Trajectory, n_frames: int, hr_dims, out_dir,
                 heldout=None, bolus: BolusParams | None = None,
                 factor: int = 4, noise_sigma: float = 0.0, seed: int = 0,
                 extra: dict | None = None) -> Path:
    """Write HR ground truth, LR observations, geometry and a manifest.

    ``hr_dims`` is ``(width, height)``.  One global scale maps the largest
    HR value over training and held-out views to 1.  Optional Gaussian noise
    (``noise_sigma``, after normalization) is added to the LR images only.
    """
    W, H = (hr_dims, hr_dims) if isinstance(hr_dims, int) else tuple(hr_dims)
    if W % factor or H % factor:
        raise InvalidConfig(f"HR dims {W}x{H} not divisible by {factor}")
    out = Path(out_dir)
    times = frame_times(n_frames)
    views = [v if (v.width_hr, v.height_hr) == (W, H) else v.scaled(W, H) for v in trajectory.views]
    hv = [] if heldout is None else [v if (v.width_hr, v.height_hr) == (W, H) else v.scaled(W, H)
                                     for v in list(heldout)]
    hr = _project_all(blobs, bolus, views, times, (W, H))
    hr_held = _project_all(blobs, bolus, hv, times, (W, H)) if hv else np.zeros((0,))
    peak = max(float(hr.max()), float(hr_held.max()) if hv else 0.0)
    scale = 1.0 / peak if peak > 0 else 1.0
    rng = np.random.default_rng(seed)
    try:
        for i, view in enumerate(views):
            for f in range(n_frames):
                img = (hr[i, f] * scale).astype(np.float32)
                write_pfm(out / HR_PATTERN.format(view=view.view_id, frame=f), img)
                lr = downsample_area(img.astype(np.float64), factor)
                if noise_sigma > 0:
                    lr = lr + rng.normal(0.0, noise_sigma, lr.shape)
                write_pfm(out / LR_PATTERN.format(view=view.view_id, frame=f), lr)
        for i, view in enumerate(hv):
            for f in range(n_frames):
                write_pfm(out / HELDOUT_PATTERN.format(view=view.view_id, frame=f),
                          (hr_held[i, f] * scale).astype(np.float32))
        save_geometry(out / "geometry.json", views)
        if hv:
            save_geometry(out / "heldout_geometry.json", hv)
        manifest = {
            "hr_dims": [W, H],
            "lr_dims": [W // factor, H // factor],
            "factor": factor,
            "n_views": len(views),
            "n_frames": n_frames,
            "frame_times": [float(t) for t in times],
            "normalization_scale": scale,
            "hr": HR_PATTERN,
            "lr": LR_PATTERN,
            "geometry": "geometry.json",
            "heldout": {"n_views": len(hv), "hr": HELDOUT_PATTERN,
                        "geometry": "heldout_geometry.json"} if hv else None,
            "noise_sigma": noise_sigma,
        }
        if extra:
            manifest.update(extra)
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    except OSError as exc:
        raise OSError(f"failed writing dataset under {out}: {exc}") from exc
    return out


def heldout_views(n_views: int, span_degrees: float, n_heldout: int, detector: DetectorParams,
                  source_distance: float = 500.0, first_view_id: int = 1000) -> list[CameraView]:
    """Views halfway between neighbouring training angles, spread evenly over the arc."""
    step = span_degrees / n_views if span_degrees == 360.0 else span_degrees / (n_views - 1)
    n_gaps = n_views if span_degrees == 360.0 else n_views - 1
    if not 1 <= n_heldout <= n_gaps:
        raise InvalidConfig(f"n_heldout must lie in [1, {n_gaps}]")
    gaps = np.unique(np.round(np.linspace(0, n_gaps - 1, n_heldout)).astype(int))
    return [look_at_view(first_view_id + i, (g + 0.5) * step, source_distance, detector)
            for i, g in enumerate(gaps)]


def build_dataset(out_dir, n_views: int = 30, n_frames: int = 20, hr: int = 256, seed: int = 0,
                  span_degrees: float = 180.0, n_heldout: int = 10, n_branches: int = 31,
                  blobs_per_branch: int = 8, noise_sigma: float = 0.0, factor: int = 4) -> Path:
    """Phantom, circular trajectory and held-out views written as one dataset."""
    detector = DetectorParams(width_hr=hr, height_hr=hr)
    traj = make_circular_trajectory(n_views, span_degrees, detector_params=detector)
    held = heldout_views(n_views, span_degrees, n_heldout, detector) if n_heldout > 0 else None
    blobs = generate_phantom(seed, n_branches, blobs_per_branch)
    extra = {"phantom": {"seed": seed, "n_branches": n_branches, "blobs_per_branch": blobs_per_branch,
                         "span_degrees": span_degrees}}
    return make_dataset(blobs, traj, n_frames, (hr, hr), out_dir, heldout=held, factor=factor,
                        noise_sigma=noise_sigma, seed=seed, extra=extra)


@dataclass
class Dataset:
    """Read side of a dataset directory; images load lazily and are cached."""

    root: Path
    manifest: dict
    views: list[CameraView]
    heldout_views: list[CameraView] = field(default_factory=list)
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    @classmethod
    def load(cls, root) -> "Dataset":
        root = Path(root)
        try:
            manifest = json.loads((root / "manifest.json").read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{root / 'manifest.json'}: {exc}") from exc
        for key in ("hr_dims", "lr_dims", "n_views", "n_frames", "normalization_scale", "hr", "lr"):
            if key not in manifest:
                raise FormatError(f"manifest missing key {key!r}")
        views = load_geometry(root / manifest.get("geometry", "geometry.json"))
        if len(views) != manifest["n_views"]:
            raise FormatError("geometry view count disagrees with manifest")
        held = []
        if manifest.get("heldout"):
            held = load_geometry(root / manifest["heldout"]["geometry"])
        return cls(root, manifest, views, held)

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def n_frames(self) -> int:
        return int(self.manifest["n_frames"])

    @property
    def factor(self) -> int:
        return int(self.manifest.get("factor", 4))

    @property
    def hr_dims(self) -> tuple[int, int]:
        w, h = self.manifest["hr_dims"]
        return int(w), int(h)

    @property
    def lr_dims(self) -> tuple[int, int]:
        w, h = self.manifest["lr_dims"]
        return int(w), int(h)

    def frame_time(self, frame: int) -> float:
        times = self.manifest.get("frame_times")
        return float(times[frame]) if times else float(frame_times(self.n_frames)[frame])

    def _read(self, pattern: str, view_id: int, frame: int, dims) -> np.ndarray:
        key = (pattern, view_id, frame)
        if key not in self._cache:
            img = read_pfm(self.root / pattern.format(view=view_id, frame=frame)).astype(np.float64)
            if img.shape != (dims[1], dims[0]):
                raise DimensionMismatch(f"{pattern.format(view=view_id, frame=frame)} has shape {img.shape}")
            self._cache[key] = img
        return self._cache[key]

    def lr(self, view_index: int, frame: int) -> np.ndarray:
        return self._read(self.manifest["lr"], self.views[view_index].view_id, frame, self.lr_dims)

    def hr(self, view_index: int, frame: int) -> np.ndarray:
        return self._read(self.manifest["hr"], self.views[view_index].view_id, frame, self.hr_dims)

    def heldout_hr(self, view_index: int, frame: int) -> np.ndarray:
        if not self.heldout_views:
            raise FormatError("dataset has no held-out views")
        return self._read(self.manifest["heldout"]["hr"], self.heldout_views[view_index].view_id,
                          frame, self.hr_dims)

    def drop_cache(self) -> None:
        self._cache.clear()


def load_dataset(root) -> Dataset:
    return Dataset.load(root)
