"""Multi-fidelity supervision: resampling, SSIM, confidence-weighted teaching
images and the LR/HR loss pair with analytic gradients."""

from __future__ import annotations

import functools
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DimensionMismatch, InvalidConfig, MissingPseudoLabel
from .io import read_pfm

SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class ConfidenceConfig:
    alpha_c: float = 5.0
    beta_c: float = 1.0
    learnable: bool = False
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    texture_window: int = 7

    def __post_init__(self):
        for w in (self.ssim_window, self.texture_window):
            if w < 3 or w % 2 == 0:
                raise InvalidConfig("windows must be odd and >= 3")


@dataclass
class LossConfig:
    lambda_ssim: float = 0.2
    mf_weight: float = 0.4

    def __post_init__(self):
        if not (0.0 <= self.lambda_ssim <= 1.0 and 0.0 <= self.mf_weight <= 1.0):
            raise InvalidConfig("lambda_ssim and mf_weight must lie in [0, 1]")


def _same_shape(*imgs):
    shapes = {np.shape(i) for i in imgs}
    if len(shapes) != 1:
        raise DimensionMismatch(f"image shapes differ: {sorted(shapes)}")


# ---------------------------------------------------------------------------
# resampling


def _cubic_weights(s: float, a: float = -0.5) -> np.ndarray:
    """Keys cubic weights for taps at offsets -1, 0, 1, 2 from floor position."""
    d = np.array([1.0 + s, s, 1.0 - s, 2.0 - s])

    def k(x):
        x = abs(x)
        if x <= 1:
            return (a + 2) * x ** 3 - (a + 3) * x ** 2 + 1
        if x < 2:
            return a * x ** 3 - 5 * a * x ** 2 + 8 * a * x - 4 * a
        return 0.0

    return np.array([k(x) for x in d])


def _upsample_axis(x: np.ndarray, factor: int, axis: int) -> np.ndarray:
    x = np.moveaxis(x, axis, 0)
    n = x.shape[0]
    out = []
    for j in range(n * factor):
        src = (j + 0.5) / factor - 0.5
        i0 = int(np.floor(src))
        w = _cubic_weights(src - i0)
        idx = np.clip(np.arange(i0 - 1, i0 + 3), 0, n - 1)
        centre = x[np.clip(int(round(src)), 0, n - 1)]
        # centre + sum w (x_k - centre): exact for constant input
        acc = centre.copy()
        for wk, ik in zip(w, idx):
            acc = acc + wk * (x[ik] - centre)
        out.append(acc)
    return np.moveaxis(np.stack(out), 0, axis)


def upsample_bicubic(img, factor: int = 4) -> np.ndarray:
    """Catmull-Rom (a = -0.5) upsampling with clamped edges."""
    x = np.asarray(img, dtype=np.float64)
    return _upsample_axis(_upsample_axis(x, factor, 0), factor, 1)


def _pairwise_sum(x: np.ndarray, axis: int) -> np.ndarray:
    parts = [np.take(x, i, axis=axis) for i in range(x.shape[axis])]
    while len(parts) > 1:
        nxt = [parts[i] + parts[i + 1] for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


def downsample_area(img, factor: int = 4) -> np.ndarray:
    """Box-average ``factor x factor`` blocks."""
    x = np.asarray(img, dtype=np.float64)
    h, w = x.shape
    if h % factor or w % factor:
        raise DimensionMismatch(f"{x.shape} not divisible by {factor}")
    blocks = x.reshape(h // factor, factor, w // factor, factor)
    return _pairwise_sum(_pairwise_sum(blocks, 3), 1) / (factor * factor)


def downsample_area_adjoint(g, factor: int = 4) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    return np.repeat(np.repeat(g, factor, axis=0), factor, axis=1) / (factor * factor)


# ---------------------------------------------------------------------------
# SSIM


@functools.lru_cache(maxsize=None)
def gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - size // 2
    w = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    return w / w.sum()


@functools.lru_cache(maxsize=None)
def _reflect_index(n: int, pad: int) -> np.ndarray:
    """Source index of each padded position under mirror (no edge repeat) padding."""
    j = np.arange(-pad, n + pad)
    if n == 1:
        return np.zeros_like(j)
    period = 2 * (n - 1)
    j = np.mod(j, period)
    return np.where(j > n - 1, period - j, j)


def _filter_axis(x, w, axis):
    pad = len(w) // 2
    idx = _reflect_index(x.shape[axis], pad)
    p = np.take(x, idx, axis=axis)
    out = ndimage.correlate1d(p, w, axis=axis, mode="constant")
    return np.take(out, np.arange(pad, pad + x.shape[axis]), axis=axis)


def _filter_axis_adjoint(g, w, axis):
    pad = len(w) // 2
    n = g.shape[axis]
    idx = _reflect_index(n, pad)
    shape = list(g.shape)
    shape[axis] = n + 2 * pad
    z = np.zeros(shape)
    sl = [slice(None)] * g.ndim
    sl[axis] = slice(pad, pad + n)
    z[tuple(sl)] = g
    c = ndimage.correlate1d(z, w[::-1], axis=axis, mode="constant")
    c = np.moveaxis(c, axis, 0)
    out = c[pad:pad + n].copy()
    for k in list(range(pad)) + list(range(pad + n, n + 2 * pad)):
        out[idx[k]] += c[k]
    return np.moveaxis(out, 0, axis)


def gaussian_filter(x, cfg: ConfidenceConfig) -> np.ndarray:
    w = gaussian_window(cfg.ssim_window, cfg.ssim_sigma)
    return _filter_axis(_filter_axis(x, w, 0), w, 1)


def gaussian_filter_adjoint(g, cfg: ConfidenceConfig) -> np.ndarray:
    w = gaussian_window(cfg.ssim_window, cfg.ssim_sigma)
    return _filter_axis_adjoint(_filter_axis_adjoint(g, w, 1), w, 0)


def _ssim_terms(a, b, cfg):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _same_shape(a, b)
    f = functools.partial(gaussian_filter, cfg=cfg)
    mu_a, mu_b = f(a), f(b)
    var_a = f(a * a) - mu_a * mu_a
    var_b = f(b * b) - mu_b * mu_b
    cov = f(a * b) - mu_a * mu_b
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    A1 = 2 * mu_a * mu_b + c1
    A2 = 2 * cov + c2
    B1 = mu_a ** 2 + mu_b ** 2 + c1
    B2 = var_a + var_b + c2
    return a, b, mu_a, mu_b, A1, A2, B1, B2


def ssim_map(a, b, cfg: ConfidenceConfig | None = None) -> np.ndarray:
    """Per-pixel SSIM, Gaussian window, dynamic range 1, mirror padding."""
    cfg = cfg or ConfidenceConfig()
    *_, A1, A2, B1, B2 = _ssim_terms(a, b, cfg)
    return (A1 * A2) / (B1 * B2)


def ssim_mean(a, b, cfg: ConfidenceConfig | None = None) -> float:
    return float(np.mean(ssim_map(a, b, cfg)))


def ssim_mean_grad(a, b, cfg: ConfidenceConfig | None = None):
    """Mean SSIM and its gradient with respect to ``a``."""
    cfg = cfg or ConfidenceConfig()
    a, b, mu_a, mu_b, A1, A2, B1, B2 = _ssim_terms(a, b, cfg)
    S = (A1 * A2) / (B1 * B2)
    g = 1.0 / S.size
    dS_dvar = -S / B2
    dS_dcov = 2.0 * S / A2
    dS_dmu = S * (2.0 * mu_b / A1 - 2.0 * mu_a / B1) - 2.0 * mu_a * dS_dvar - mu_b * dS_dcov
    adj = functools.partial(gaussian_filter_adjoint, cfg=cfg)
    grad = g * (adj(dS_dmu) + 2.0 * a * adj(dS_dvar) + b * adj(dS_dcov))
    return float(S.mean()), grad


# ---------------------------------------------------------------------------
# confidence and teaching image


def texture_richness(img, cfg: ConfidenceConfig | None = None) -> np.ndarray:
    """Local Sobel energy normalized by its 99th percentile, in [0, 1]."""
    cfg = cfg or ConfidenceConfig()
    x = np.asarray(img, dtype=np.float64)
    mag = np.hypot(ndimage.sobel(x, axis=1, mode="reflect"), ndimage.sobel(x, axis=0, mode="reflect"))
    avg = ndimage.uniform_filter(mag, size=cfg.texture_window, mode="reflect")
    p99 = np.percentile(avg, 99)
    if p99 < 1e-12:
        return np.zeros_like(x)
    return np.clip(avg / p99, 0.0, 1.0)


def _sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def confidence_map(I_sr, I_lr_up, cfg: ConfidenceConfig | None = None) -> np.ndarray:
    cfg = cfg or ConfidenceConfig()
    _same_shape(I_sr, I_lr_up)
    z = cfg.alpha_c * ssim_map(I_sr, I_lr_up, cfg) + cfg.beta_c * texture_richness(I_sr, cfg)
    return _sigmoid(z)


def teaching_image(I_sr, I_lr_up, C) -> np.ndarray:
    _same_shape(I_sr, I_lr_up, C)
    C = np.asarray(C, dtype=np.float64)
    return C * np.asarray(I_sr, dtype=np.float64) + (1.0 - C) * np.asarray(I_lr_up, dtype=np.float64)


# ---------------------------------------------------------------------------
# losses


def _l1_ssim(pred, target, lam, cfg):
    diff = pred - target
    l1 = float(np.mean(np.abs(diff)))
    s, ds = ssim_mean_grad(pred, target, cfg)
    value = (1.0 - lam) * l1 + lam * (1.0 - s)
    grad = (1.0 - lam) * np.sign(diff) / diff.size - lam * ds
    return value, grad


def loss_gt(I_rend_hr, I_lr, cfg: LossConfig | None = None, ssim_cfg: ConfidenceConfig | None = None,
            factor: int = 4):
    """LR-consistency loss of the area-downsampled render; returns (value, d/dI_rend_hr)."""
    cfg = cfg or LossConfig()
    I_rend_hr = np.asarray(I_rend_hr, dtype=np.float64)
    I_lr = np.asarray(I_lr, dtype=np.float64)
    if I_rend_hr.shape != (I_lr.shape[0] * factor, I_lr.shape[1] * factor):
        raise DimensionMismatch(f"render {I_rend_hr.shape} is not {factor}x LR {I_lr.shape}")
    value, g_lr = _l1_ssim(downsample_area(I_rend_hr, factor), I_lr, cfg.lambda_ssim, ssim_cfg)
    return value, downsample_area_adjoint(g_lr, factor)


def loss_sr(I_rend_hr, I_teach, cfg: LossConfig | None = None, ssim_cfg: ConfidenceConfig | None = None):
    """HR loss against the teaching image; returns (value, d/dI_rend_hr)."""
    cfg = cfg or LossConfig()
    I_rend_hr = np.asarray(I_rend_hr, dtype=np.float64)
    I_teach = np.asarray(I_teach, dtype=np.float64)
    _same_shape(I_rend_hr, I_teach)
    return _l1_ssim(I_rend_hr, I_teach, cfg.lambda_ssim, ssim_cfg)


def total_loss(L_gt: float, L_sr: float, cfg: LossConfig | None = None) -> float:
    cfg = cfg or LossConfig()
    return L_gt + cfg.mf_weight * L_sr


# ---------------------------------------------------------------------------
# pseudo-label providers


def _blur_detail(x, sigma):
    """``x - gaussian_blur(x)`` with clamped edges, exactly zero on flat input."""
    radius = int(4 * sigma + 0.5)
    w = gaussian_window(2 * radius + 1, sigma)
    # the separable blur is accumulated as weighted differences to the centre pixel
    rows = np.zeros_like(x)
    n0 = x.shape[0]
    for k, wk in zip(range(-radius, radius + 1), w):
        idx = np.clip(np.arange(n0) + k, 0, n0 - 1)
        rows += wk * (x[idx] - x)
    blurred_rows = x + rows
    cols = np.zeros_like(x)
    n1 = x.shape[1]
    for k, wk in zip(range(-radius, radius + 1), w):
        idx = np.clip(np.arange(n1) + k, 0, n1 - 1)
        cols += wk * (blurred_rows[:, idx] - blurred_rows)
    return -(rows + cols)


@dataclass
class SRProvider:
    """Source of HR pseudo-labels.

    ``bicubic_sharpen`` upsamples and applies an unsharp mask; ``file_ingest``
    reads ``<directory>/sr/{view_id}_{frame:04}.pfm`` produced by an external
    super-resolution model.
    """

    backend: str = "bicubic_sharpen"
    directory: Path | None = None
    amount: float = 0.5
    sigma: float = 1.0
    factor: int = 4

    def __post_init__(self):
        if self.backend not in ("bicubic_sharpen", "file_ingest"):
            raise InvalidConfig(f"unknown SR backend {self.backend!r}")
        if self.backend == "file_ingest":
            if self.directory is None:
                raise InvalidConfig("file_ingest needs a directory")
            self.directory = Path(self.directory)

    def path_for(self, view_id: int, frame: int) -> Path:
        return self.directory / "sr" / f"{view_id}_{frame:04}.pfm"


def sr_apply(provider: SRProvider, I_lr, key: tuple[int, int] | None = None) -> np.ndarray:
    """HR pseudo-label for one LR observation; ``key`` is ``(view_id, frame)``."""
    I_lr = np.asarray(I_lr, dtype=np.float64)
    f = provider.factor
    if provider.backend == "bicubic_sharpen":
        up = upsample_bicubic(I_lr, f)
        return up + provider.amount * _blur_detail(up, provider.sigma)
    if key is None:
        raise MissingPseudoLabel("file_ingest needs a (view_id, frame) key")
    path = provider.path_for(*key)
    if not path.exists():
        raise MissingPseudoLabel(f"no pseudo-label at {path}")
    img = read_pfm(path)
    if img.shape != (I_lr.shape[0] * f, I_lr.shape[1] * f):
        raise DimensionMismatch(f"{path}: {img.shape} is not {f}x {I_lr.shape}")
    return img
