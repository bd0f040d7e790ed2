"""Additive X-ray splatting with an exact backward pass.

Each kernel projects to a 2D Gaussian footprint (local affine approximation
plus a small diagonal floor) and contributes ``rho * exp(-q/2)`` to pixels
near its projected mean.  With ``cull="tile"`` (the default) a kernel covers
every pixel of each tile touched by the bounding box of its
``cutoff_sigma`` ellipse; with ``cull="pixel"`` it covers only pixels whose
Mahalanobis radius is within ``cutoff_sigma``, which is cheaper but drops
more of the tail.  There is no alpha compositing and no depth ordering:
pixel values are plain sums taken in kernel-index order, which makes the
result independent of the number of worker threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

from .errors import DimensionMismatch, check_time
from .geometry import COV2D_FLOOR, DEPTH_EPS, CameraView

# fastmath assumes finite values; an infinite cutoff is passed as _BIG instead
_FAST = True
_BIG = 1e300

ROLES = ("lr_obs", "lr_up", "sr", "teach", "render_hr", "render_lr")


@dataclass
class ProjectionImage:
    pixels: np.ndarray
    role: str = "render_hr"

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 2 or min(self.pixels.shape) < 1:
            raise DimensionMismatch(f"image must be 2-D and non-empty, got {self.pixels.shape}")
        if self.role not in ROLES:
            raise ValueError(f"unknown image role {self.role!r}")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass
class RenderContext:
    tile_size: int = 16
    cutoff_sigma: float = 3.0
    cov2d_floor: float = COV2D_FLOOR
    cull: str = "tile"

    def __post_init__(self):
        if not self.cutoff_sigma > 0:
            raise ValueError("cutoff_sigma must be positive")
        if self.cull not in ("tile", "pixel"):
            raise ValueError("cull must be 'tile' or 'pixel'")
        if self.tile_size < 1:
            raise ValueError("tile_size must be >= 1")


# ---------------------------------------------------------------------------
# numba kernels


@nb.njit(cache=True, error_model="numpy")
def _quat_rotmat(qw, qx, qy, qz, Rq):
    n = math.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
    w, x, y, z = qw / n, qx / n, qy / n, qz / n
    Rq[0, 0] = 1.0 - 2.0 * (y * y + z * z)
    Rq[0, 1] = 2.0 * (x * y - w * z)
    Rq[0, 2] = 2.0 * (x * z + w * y)
    Rq[1, 0] = 2.0 * (x * y + w * z)
    Rq[1, 1] = 1.0 - 2.0 * (x * x + z * z)
    Rq[1, 2] = 2.0 * (y * z - w * x)
    Rq[2, 0] = 2.0 * (x * z - w * y)
    Rq[2, 1] = 2.0 * (y * z + w * x)
    Rq[2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return n


@nb.njit(cache=True, error_model="numpy")
def _project_one(mu, ls, q, K, R, t, floor, Rq, M, Sig, xc, J, T):
    """Fills the work arrays; returns (u, v, c00, c01, c11, p2)."""
    _quat_rotmat(q[0], q[1], q[2], q[3], Rq)
    for j in range(3):
        s = math.exp(ls[j])
        for k in range(3):
            M[k, j] = Rq[k, j] * s
    for a in range(3):
        for b in range(3):
            acc = 0.0
            for j in range(3):
                acc += M[a, j] * M[b, j]
            Sig[a, b] = acc
    for a in range(3):
        xc[a] = R[a, 0] * mu[0] + R[a, 1] * mu[1] + R[a, 2] * mu[2] + t[a]
    p0 = K[0, 0] * xc[0] + K[0, 1] * xc[1] + K[0, 2] * xc[2]
    p1 = K[1, 0] * xc[0] + K[1, 1] * xc[1] + K[1, 2] * xc[2]
    p2 = K[2, 0] * xc[0] + K[2, 1] * xc[1] + K[2, 2] * xc[2]
    u = p0 / p2
    v = p1 / p2
    for b in range(3):
        J[0, b] = (K[0, b] - u * K[2, b]) / p2
        J[1, b] = (K[1, b] - v * K[2, b]) / p2
    for a in range(2):
        for b in range(3):
            T[a, b] = J[a, 0] * R[0, b] + J[a, 1] * R[1, b] + J[a, 2] * R[2, b]
    c = np.zeros(3)
    for a in range(3):
        for b in range(3):
            s = Sig[a, b]
            c[0] += T[0, a] * s * T[0, b]
            c[1] += T[0, a] * s * T[1, b]
            c[2] += T[1, a] * s * T[1, b]
    return u, v, c[0] + floor, c[1], c[2] + floor, p2


@nb.njit(parallel=True, cache=True, error_model="numpy")
def _preprocess(mu, ls, rot, K, R, t, W, H, cutoff, floor, depth_eps, snap):
    N = mu.shape[0]
    uv = np.zeros((N, 2))
    conic = np.zeros((N, 3))
    cov = np.zeros((N, 3))
    depth = np.zeros(N)
    rect = np.zeros((N, 4), np.int64)
    visible = np.zeros(N, np.bool_)
    full = not math.isfinite(cutoff)
    for i in nb.prange(N):
        Rq = np.empty((3, 3))
        M = np.empty((3, 3))
        Sig = np.empty((3, 3))
        xc = np.empty(3)
        J = np.empty((2, 3))
        T = np.empty((2, 3))
        u, v, c00, c01, c11, p2 = _project_one(mu[i], ls[i], rot[i], K, R, t, floor, Rq, M, Sig, xc, J, T)
        depth[i] = xc[2]
        if xc[2] <= depth_eps:
            continue
        det = c00 * c11 - c01 * c01
        uv[i, 0] = u
        uv[i, 1] = v
        cov[i, 0] = c00
        cov[i, 1] = c01
        cov[i, 2] = c11
        conic[i, 0] = c11 / det
        conic[i, 1] = -c01 / det
        conic[i, 2] = c00 / det
        if full:
            x0, x1, y0, y1 = 0, W - 1, 0, H - 1
        else:
            rx = cutoff * math.sqrt(c00)
            ry = cutoff * math.sqrt(c11)
            fx0 = math.ceil(u - rx - 0.5)
            fx1 = math.floor(u + rx - 0.5)
            fy0 = math.ceil(v - ry - 0.5)
            fy1 = math.floor(v + ry - 0.5)
            if fx1 < 0 or fy1 < 0 or fx0 > W - 1 or fy0 > H - 1:
                continue
            x0 = max(int(fx0), 0)
            x1 = min(int(fx1), W - 1)
            y0 = max(int(fy0), 0)
            y1 = min(int(fy1), H - 1)
            if snap > 0 and x0 <= x1 and y0 <= y1:
                x0 = (x0 // snap) * snap
                y0 = (y0 // snap) * snap
                x1 = min((x1 // snap + 1) * snap, W) - 1
                y1 = min((y1 // snap + 1) * snap, H) - 1
        if x0 > x1 or y0 > y1:
            continue
        rect[i, 0] = x0
        rect[i, 1] = x1
        rect[i, 2] = y0
        rect[i, 3] = y1
        visible[i] = True
    return uv, conic, cov, depth, rect, visible


@nb.njit(cache=True, error_model="numpy")
def _bin_tiles(rect, visible, tile, ntx, nty):
    N = rect.shape[0]
    counts = np.zeros(ntx * nty, np.int64)
    for i in range(N):
        if not visible[i]:
            continue
        for ty in range(rect[i, 2] // tile, rect[i, 3] // tile + 1):
            for tx in range(rect[i, 0] // tile, rect[i, 1] // tile + 1):
                counts[ty * ntx + tx] += 1
    offsets = np.zeros(ntx * nty + 1, np.int64)
    for k in range(ntx * nty):
        offsets[k + 1] = offsets[k] + counts[k]
    fill = offsets[:-1].copy()
    ids = np.empty(offsets[-1], np.int64)
    for i in range(N):
        if not visible[i]:
            continue
        for ty in range(rect[i, 2] // tile, rect[i, 3] // tile + 1):
            for tx in range(rect[i, 0] // tile, rect[i, 1] // tile + 1):
                k = ty * ntx + tx
                ids[fill[k]] = i
                fill[k] += 1
    return offsets, ids


@nb.njit(parallel=True, cache=True, error_model="numpy", fastmath=_FAST)
def _forward_tiles(uv, conic, rho, rect, offsets, ids, W, H, tile, ntx, nty, cutoff2):
    img = np.zeros((H, W))
    for k in nb.prange(ntx * nty):
        ty = k // ntx
        tx = k - ty * ntx
        ys = ty * tile
        xs = tx * tile
        ye = min(ys + tile, H) - 1
        xe = min(xs + tile, W) - 1
        # kernels are visited in index order, so every pixel sums in that order
        for j in range(offsets[k], offsets[k + 1]):
            i = ids[j]
            u = uv[i, 0]
            v = uv[i, 1]
            a00 = conic[i, 0]
            a01 = conic[i, 1]
            a11 = conic[i, 2]
            r = rho[i]
            for py in range(max(ys, rect[i, 2]), min(ye, rect[i, 3]) + 1):
                dy = py + 0.5 - v
                for px in range(max(xs, rect[i, 0]), min(xe, rect[i, 1]) + 1):
                    dx = px + 0.5 - u
                    q = a00 * dx * dx + 2.0 * a01 * dx * dy + a11 * dy * dy
                    if q <= cutoff2:
                        img[py, px] += r * math.exp(-0.5 * q)
    return img


@nb.njit(parallel=True, cache=True, error_model="numpy", fastmath=_FAST)
def _backward_kernels(mu, ls, rot, rho, K, R, t, floor, uv, conic, rect, visible, d_img, cutoff2):
    N = mu.shape[0]
    d_mu = np.zeros((N, 3))
    d_ls = np.zeros((N, 3))
    d_rot = np.zeros((N, 4))
    d_rho = np.zeros(N)
    d_uv = np.zeros((N, 2))
    for i in nb.prange(N):
        if not visible[i]:
            continue
        u = uv[i, 0]
        v = uv[i, 1]
        a00 = conic[i, 0]
        a01 = conic[i, 1]
        a11 = conic[i, 2]
        r = rho[i]
        g_rho = 0.0
        gu = 0.0
        gv = 0.0
        gA00 = 0.0
        gA01 = 0.0
        gA11 = 0.0
        for py in range(rect[i, 2], rect[i, 3] + 1):
            dy = py + 0.5 - v
            for px in range(rect[i, 0], rect[i, 1] + 1):
                g = d_img[py, px]
                if g == 0.0:
                    continue
                dx = px + 0.5 - u
                q = a00 * dx * dx + 2.0 * a01 * dx * dy + a11 * dy * dy
                if q > cutoff2:
                    continue
                G = math.exp(-0.5 * q)
                g_rho += g * G
                w = g * r * G
                gu += w * (a00 * dx + a01 * dy)
                gv += w * (a01 * dx + a11 * dy)
                gA00 += -0.5 * w * dx * dx
                gA01 += -0.5 * w * dx * dy
                gA11 += -0.5 * w * dy * dy
        d_rho[i] = g_rho
        d_uv[i, 0] = gu
        d_uv[i, 1] = gv

        Rq = np.empty((3, 3))
        M = np.empty((3, 3))
        Sig = np.empty((3, 3))
        xc = np.empty(3)
        J = np.empty((2, 3))
        T = np.empty((2, 3))
        _project_one(mu[i], ls[i], rot[i], K, R, t, floor, Rq, M, Sig, xc, J, T)
        p2 = K[2, 0] * xc[0] + K[2, 1] * xc[1] + K[2, 2] * xc[2]

        # dL/dcov = -A gA A (all symmetric 2x2)
        m00 = a00 * gA00 + a01 * gA01
        m01 = a00 * gA01 + a01 * gA11
        m10 = a01 * gA00 + a11 * gA01
        m11 = a01 * gA01 + a11 * gA11
        Gc = np.empty((2, 2))
        Gc[0, 0] = -(m00 * a00 + m01 * a01)
        Gc[0, 1] = -(m00 * a01 + m01 * a11)
        Gc[1, 0] = -(m10 * a00 + m11 * a01)
        Gc[1, 1] = -(m10 * a01 + m11 * a11)
        # cov = T Sig T^T + floor I, T = J R
        GcT = np.zeros((2, 3))
        for a in range(2):
            for b in range(3):
                GcT[a, b] = Gc[a, 0] * T[0, b] + Gc[a, 1] * T[1, b]
        Gsig = np.zeros((3, 3))
        for a in range(3):
            for b in range(3):
                Gsig[a, b] = T[0, a] * GcT[0, b] + T[1, a] * GcT[1, b]
        GT = np.zeros((2, 3))
        for a in range(2):
            for b in range(3):
                acc = 0.0
                for c in range(3):
                    acc += GcT[a, c] * Sig[c, b]
                GT[a, b] = 2.0 * acc
        GJ = np.zeros((2, 3))
        for a in range(2):
            for b in range(3):
                GJ[a, b] = GT[a, 0] * R[b, 0] + GT[a, 1] * R[b, 1] + GT[a, 2] * R[b, 2]
        gxc = np.zeros(3)
        for c in range(3):
            acc = J[0, c] * gu + J[1, c] * gv
            for a in range(2):
                for b in range(3):
                    acc -= GJ[a, b] * (J[a, b] * K[2, c] + J[a, c] * K[2, b]) / p2
            gxc[c] = acc
        for c in range(3):
            d_mu[i, c] = R[0, c] * gxc[0] + R[1, c] * gxc[1] + R[2, c] * gxc[2]
        # Sig = M M^T, M = Rq diag(s)
        GM = np.zeros((3, 3))
        for a in range(3):
            for b in range(3):
                GM[a, b] = 2.0 * (Gsig[a, 0] * M[0, b] + Gsig[a, 1] * M[1, b] + Gsig[a, 2] * M[2, b])
        GR = np.empty((3, 3))
        for j in range(3):
            s = math.exp(ls[i, j])
            gs = 0.0
            for k in range(3):
                gs += GM[k, j] * Rq[k, j]
                GR[k, j] = GM[k, j] * s
            d_ls[i, j] = gs * s
        qn = _quat_rotmat(rot[i, 0], rot[i, 1], rot[i, 2], rot[i, 3], Rq)
        w = rot[i, 0] / qn
        x = rot[i, 1] / qn
        y = rot[i, 2] / qn
        z = rot[i, 3] / qn
        gw = 2.0 * (-z * GR[0, 1] + y * GR[0, 2] + z * GR[1, 0] - x * GR[1, 2] - y * GR[2, 0] + x * GR[2, 1])
        gx = 2.0 * (y * GR[0, 1] + z * GR[0, 2] + y * GR[1, 0] - 2.0 * x * GR[1, 1] - w * GR[1, 2]
                    + z * GR[2, 0] + w * GR[2, 1] - 2.0 * x * GR[2, 2])
        gy = 2.0 * (-2.0 * y * GR[0, 0] + x * GR[0, 1] + w * GR[0, 2] + x * GR[1, 0] + z * GR[1, 2]
                    - w * GR[2, 0] + z * GR[2, 1] - 2.0 * y * GR[2, 2])
        gz = 2.0 * (-2.0 * z * GR[0, 0] - w * GR[0, 1] + x * GR[0, 2] + w * GR[1, 0] - 2.0 * z * GR[1, 1]
                    + y * GR[1, 2] + x * GR[2, 0] + y * GR[2, 1])
        dot = w * gw + x * gx + y * gy + z * gz
        d_rot[i, 0] = (gw - w * dot) / qn
        d_rot[i, 1] = (gx - x * dot) / qn
        d_rot[i, 2] = (gy - y * dot) / qn
        d_rot[i, 3] = (gz - z * dot) / qn
    return d_mu, d_ls, d_rot, d_rho, d_uv


@nb.njit(cache=True, error_model="numpy")
def _top_contributors(pix, uv, conic, rho, rect, visible, cutoff2):
    M = pix.shape[0]
    best = np.full(M, -1, np.int64)
    for m in range(M):
        px = pix[m, 0]
        py = pix[m, 1]
        top = 0.0
        for i in range(uv.shape[0]):
            if not visible[i]:
                continue
            if px < rect[i, 0] or px > rect[i, 1] or py < rect[i, 2] or py > rect[i, 3]:
                continue
            dx = px + 0.5 - uv[i, 0]
            dy = py + 0.5 - uv[i, 1]
            q = conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy + conic[i, 2] * dy * dy
            if q > cutoff2:
                continue
            c = rho[i] * math.exp(-0.5 * q)
            if c > top:
                top = c
                best[m] = i
    return best


# ---------------------------------------------------------------------------
# python surface


@dataclass
class Projected:
    """Per-kernel screen-space quantities from the forward preprocessing."""

    uv: np.ndarray
    conic: np.ndarray
    cov2d: np.ndarray
    depth: np.ndarray
    rect: np.ndarray
    visible: np.ndarray


@dataclass
class RasterCache:
    view: CameraView
    ctx: RenderContext
    mu: np.ndarray
    log_scale: np.ndarray
    rot: np.ndarray
    rho: np.ndarray
    proj: Projected


def _cutoff2(ctx: RenderContext) -> float:
    if ctx.cull == "tile":
        return _BIG
    return min(float(ctx.cutoff_sigma) ** 2, _BIG)


def _snap(ctx: RenderContext) -> int:
    return int(ctx.tile_size) if ctx.cull == "tile" else 0


def _f64(a, shape):
    return np.ascontiguousarray(np.asarray(a, dtype=np.float64).reshape(shape))


def project_kernels(mu, log_scale, rot, view: CameraView, ctx: RenderContext) -> Projected:
    mu = _f64(mu, (-1, 3))
    return Projected(*_preprocess(
        mu, _f64(log_scale, (-1, 3)), _f64(rot, (-1, 4)), view.K, view.R, view.t_vec,
        view.width_hr, view.height_hr, float(ctx.cutoff_sigma), float(ctx.cov2d_floor), DEPTH_EPS,
        _snap(ctx),
    ))


def rasterize(mu, log_scale, rot, rho, view: CameraView, ctx: RenderContext | None = None):
    """Splat kernels with given attenuations onto ``view``'s pixel grid.

    Returns ``(image, cache)``; the cache feeds :func:`rasterize_backward`.
    """
    ctx = ctx or RenderContext()
    mu = _f64(mu, (-1, 3))
    ls = _f64(log_scale, (-1, 3))
    q = _f64(rot, (-1, 4))
    rho = _f64(rho, (-1,))
    W, H = view.width_hr, view.height_hr
    proj = Projected(*_preprocess(mu, ls, q, view.K, view.R, view.t_vec, W, H,
                                  float(ctx.cutoff_sigma), float(ctx.cov2d_floor), DEPTH_EPS, _snap(ctx)))
    ts = int(ctx.tile_size)
    ntx = -(-W // ts)
    nty = -(-H // ts)
    offsets, ids = _bin_tiles(proj.rect, proj.visible, ts, ntx, nty)
    img = _forward_tiles(proj.uv, proj.conic, rho, proj.rect, offsets, ids, W, H, ts, ntx, nty,
                         _cutoff2(ctx))
    return img, RasterCache(view, ctx, mu, ls, q, rho, proj)


@dataclass
class KernelGrads:
    d_mu: np.ndarray
    d_log_scale: np.ndarray
    d_rot: np.ndarray
    d_rho: np.ndarray
    uv_grad_norm: np.ndarray
    visible: np.ndarray


def rasterize_backward(cache: RasterCache, d_image) -> KernelGrads:
    """Exact gradients of ``sum(d_image * image)`` w.r.t. kernel parameters and rho."""
    view = cache.view
    d_image = np.ascontiguousarray(d_image, dtype=np.float64)
    if d_image.shape != (view.height_hr, view.width_hr):
        raise DimensionMismatch(f"d_image {d_image.shape} vs render {(view.height_hr, view.width_hr)}")
    p = cache.proj
    d_mu, d_ls, d_rot, d_rho, d_uv = _backward_kernels(
        cache.mu, cache.log_scale, cache.rot, cache.rho, view.K, view.R, view.t_vec,
        float(cache.ctx.cov2d_floor), p.uv, p.conic, p.rect, p.visible, d_image,
        _cutoff2(cache.ctx),
    )
    return KernelGrads(d_mu, d_ls, d_rot, d_rho, np.linalg.norm(d_uv, axis=1), p.visible.copy())


@dataclass
class RenderResult:
    image: ProjectionImage
    rho: np.ndarray
    raster: RasterCache
    field_cache: object


def render(scene, field, view: CameraView, t: float, width: int | None = None,
           height: int | None = None, ctx: RenderContext | None = None) -> RenderResult:
    """Render ``scene`` at time ``t``; attenuations come from ``field``."""
    t = check_time(t)
    if width is not None or height is not None:
        view = view.scaled(width or view.width_hr, height or view.height_hr)
    if len(scene) == 0:
        img = np.zeros((view.height_hr, view.width_hr))
        return RenderResult(ProjectionImage(img), np.zeros(0), None, None)
    rho, fcache = field.forward(scene.mu, t)
    img, rcache = rasterize(scene.mu, scene.log_scale, scene.rot, rho, view, ctx)
    return RenderResult(ProjectionImage(img, "render_hr"), rho, rcache, fcache)


@dataclass
class SceneGrads:
    kernels: KernelGrads
    field: object  # dnaf.FieldGrads


def render_backward(scene, field, view: CameraView, t: float, d_image, result: RenderResult | None = None,
                    ctx: RenderContext | None = None) -> SceneGrads:
    """Backward of :func:`render`, with rho gradients chained through the field.

    ``d_mu`` in the returned kernel gradients already includes the field's
    dependence on kernel position.
    """
    if result is None:
        d = np.asarray(d_image)
        result = render(scene, field, view, t, d.shape[1], d.shape[0], ctx)
    if result.raster is None:
        z = np.zeros((0, 3))
        return SceneGrads(KernelGrads(z, z.copy(), np.zeros((0, 4)), np.zeros(0), np.zeros(0),
                                      np.zeros(0, bool)), None)
    kg = rasterize_backward(result.raster, d_image)
    fg, d_mu_field = field.backward(result.field_cache, kg.d_rho)
    kg.d_mu = kg.d_mu + d_mu_field
    return SceneGrads(kg, fg)


def accumulate_subpixel_grads(scene, uv_grad_norms, contributed=None) -> None:
    """Add this pass's projected-mean gradient norms to the running window."""
    g = np.asarray(uv_grad_norms, dtype=np.float64)
    mask = g > 0 if contributed is None else np.asarray(contributed, dtype=bool)
    scene.stats.grad_norm_sum[mask] += g[mask]
    scene.stats.grad_count[mask] += 1


def top_contributors(cache: RasterCache, pixels) -> np.ndarray:
    """Index of the kernel contributing most to each (x, y) pixel, or -1."""
    pix = np.ascontiguousarray(np.asarray(pixels, dtype=np.int64).reshape(-1, 2))
    p = cache.proj
    return _top_contributors(pix, p.uv, p.conic, cache.rho, p.rect, p.visible,
                             _cutoff2(cache.ctx))
