"""Optimization loop, checkpoint cadence and evaluation."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, TextIO

import numpy as np

from .adaptive import AdaptiveConfig, densify, prune, residual_guided_insert, select_densify
from .checkpoint import load_checkpoint, save_checkpoint
from .dnaf import AttenuationField, FieldConfig
from .errors import DimensionMismatch, InvalidConfig, NonFiniteLoss
from .optim import Adam, AdamConfig, exp_decay
from .phantom import Dataset
from .rasterizer import RenderContext, accumulate_subpixel_grads, render, render_backward
from .scene import SceneConfig, accumulate_attenuation, init_scene, reset_stats
from .supervision import (
    ConfidenceConfig,
    LossConfig,
    SRProvider,
    _sigmoid,
    confidence_map,
    downsample_area,
    loss_gt,
    loss_sr,
    sr_apply,
    ssim_map,
    ssim_mean,
    ssim_mean_grad,
    teaching_image,
    texture_richness,
    upsample_bicubic,
)

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
SR_MODES = ("off", "bicubic", "dir")
VARIANTS = ("full", "pseudo_only")


@dataclass
class LearningRates:
    mu: float = 1.6e-4
    log_scale: float = 5e-3
    rot: float = 1e-3
    hash: float = 1e-2
    mlp: float = 1e-3
    mu_final_ratio: float = 0.01
    # position steps are relative to the scene size (half-diagonal of the box)
    mu_scene_scaled: bool = True
    confidence: float = 1e-2


@dataclass
class TrainConfig:
    iters: int = 3000
    seed: int = 0
    lr: LearningRates = field(default_factory=LearningRates)
    adam: AdamConfig = field(default_factory=AdamConfig)
    adaptive: AdaptiveConfig = field(default_factory=AdaptiveConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    confidence: ConfidenceConfig = field(default_factory=ConfidenceConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    dnaf: FieldConfig = field(default_factory=FieldConfig)
    render: RenderContext = field(default_factory=RenderContext)
    densify_start: int = 300
    densify_stop: int | None = None  # default: 0.8 * iters
    adaptive_enabled: bool = True
    sr_mode: str = "off"
    sr_dir: str | None = None
    sr_amount: float = 0.5
    sr_sigma: float = 1.0
    variant: str = "full"
    checkpoint_every: int = 1000
    teach_refresh: int = 1000

    def __post_init__(self):
        if self.iters < 0:
            raise InvalidConfig("iters must be >= 0")
        if self.densify_stop is None:
            self.densify_stop = int(0.8 * self.iters)
        if self.densify_start < 0 or self.densify_stop > self.iters:
            raise InvalidConfig("need 0 <= densify_start and densify_stop <= iters")
        if self.sr_mode not in SR_MODES:
            raise InvalidConfig(f"sr_mode must be one of {SR_MODES}")
        if self.sr_mode == "dir" and not self.sr_dir:
            raise InvalidConfig("sr_mode 'dir' needs sr_dir")
        if self.variant not in VARIANTS:
            raise InvalidConfig(f"variant must be one of {VARIANTS}")
        if self.variant == "pseudo_only" and self.sr_mode == "off":
            raise InvalidConfig("the pseudo-label-only variant needs an SR provider")
        if self.checkpoint_every < 1:
            raise InvalidConfig("checkpoint_every must be >= 1")

    @property
    def uses_sr(self) -> bool:
        return self.sr_mode != "off"

    @property
    def mf_weight(self) -> float:
        """Effective HR-loss weight; zero when no pseudo-labels are used."""
        return self.loss.mf_weight if self.uses_sr else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scene"]["bbox"] = list(d["scene"]["bbox"])
        d["dnaf"]["hidden"] = list(d["dnaf"]["hidden"])
        return d


def schedule(iteration: int, n_views: int, n_frames: int) -> tuple[int, int]:
    """Round-robin (view, frame) pair for an iteration.

    Each block of ``n_views * n_frames`` iterations visits every pair once;
    consecutive iterations change view and, after each sweep of views, the
    frame offset shifts by one.
    """
    k = iteration % (n_views * n_frames)
    v = k % n_views
    return v, (k // n_views + v) % n_frames


def psnr(a, b, peak: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-12:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


class Supervisor:
    """Builds per-(view, frame) HR targets: pseudo-labels, confidence maps
    and teaching images, computed on first use and cached."""

    def __init__(self, dataset: Dataset, config: TrainConfig):
        self.ds = dataset
        self.cfg = config
        self.conf = ConfidenceConfig(**asdict(config.confidence))
        self.provider = None
        if config.sr_mode == "bicubic":
            self.provider = SRProvider("bicubic_sharpen", amount=config.sr_amount, sigma=config.sr_sigma,
                                       factor=dataset.factor)
        elif config.sr_mode == "dir":
            self.provider = SRProvider("file_ingest", config.sr_dir, factor=dataset.factor)
        self._teach: dict[tuple[int, int], np.ndarray] = {}
        self._up: dict[tuple[int, int], np.ndarray] = {}

    def lr_up(self, v: int, f: int) -> np.ndarray:
        key = (v, f)
        if key not in self._up:
            self._up[key] = upsample_bicubic(self.ds.lr(v, f), self.ds.factor).astype(np.float32)
        return self._up[key]

    def sr(self, v: int, f: int) -> np.ndarray:
        return sr_apply(self.provider, self.ds.lr(v, f), key=(self.ds.views[v].view_id, f))

    def teach(self, v: int, f: int) -> np.ndarray:
        """HR supervision target; the upsampled LR when no provider is set."""
        if self.provider is None:
            return self.lr_up(v, f)
        key = (v, f)
        if key not in self._teach:
            sr = self.sr(v, f)
            if self.cfg.variant == "pseudo_only":
                t = sr
            else:
                up = self.lr_up(v, f).astype(np.float64)
                t = teaching_image(sr, up, confidence_map(sr, up, self.conf))
            self._teach[key] = np.asarray(t, dtype=np.float32)
        return self._teach[key]

    def refresh(self) -> None:
        self._teach.clear()

    def confidence_grad(self, v: int, f: int, render_hr: np.ndarray) -> tuple[float, float]:
        """d L_sr / d (alpha_c, beta_c) with the render held fixed."""
        sr = self.sr(v, f)
        up = self.lr_up(v, f).astype(np.float64)
        S = ssim_map(sr, up, self.conf)
        T = texture_richness(sr, self.conf)
        C = _sigmoid(self.conf.alpha_c * S + self.conf.beta_c * T)
        teach = C * sr + (1.0 - C) * up
        lam = self.cfg.loss.lambda_ssim
        n = teach.size
        # L_sr = (1-lam) mean|I - teach| + lam (1 - ssim(I, teach)), differentiated in teach
        g = (1.0 - lam) * -np.sign(render_hr - teach) / n
        _, g_ssim = ssim_mean_grad(teach, render_hr, self.conf)
        g = g - lam * g_ssim
        dC = g * (sr - up) * C * (1.0 - C)
        return float(np.sum(dC * S)), float(np.sum(dC * T))


@dataclass
class TrainResult:
    scene: object
    field: AttenuationField
    checkpoint: Path | None
    final_loss: float
    iterations: int
    wall_time: float
    history: list = field(default_factory=list)


def _lrs(config: TrainConfig, scene, iteration: int) -> tuple[dict, dict]:
    lr = config.lr
    extent = 0.5 * float(np.linalg.norm(scene.bbox[1] - scene.bbox[0])) if lr.mu_scene_scaled else 1.0
    kern = {
        "mu": exp_decay(lr.mu * extent, iteration, config.iters, lr.mu_final_ratio),
        "log_scale": lr.log_scale,
        "rot": lr.rot,
    }
    return kern, {"hash": lr.hash, "mlp": lr.mlp}


def _field_lrs(params: dict, groups: dict) -> dict:
    return {k: groups["hash"] if k.startswith("tables") else groups["mlp"] for k in params}


def _field_grad_dict(fg) -> dict:
    g = {"tables3d": fg.tables3d, "tables4d": fg.tables4d}
    for i, (dW, db) in enumerate(zip(fg.weights, fg.biases)):
        g[f"W{i}"] = dW
        g[f"b{i}"] = db
    return g


def initial_state(dataset: Dataset, config: TrainConfig, init_points=None):
    scene = init_scene(config.scene, config.seed, points=init_points)
    field_ = AttenuationField.create(config.dnaf, bbox=scene.bbox, seed=config.seed + 1)
    return scene, field_


def train(dataset: Dataset, config: TrainConfig, out_dir, log_stream: TextIO | None = None,
          init_points=None, progress: Callable[[int, dict], None] | None = None) -> TrainResult:
    """Run the optimization and write checkpoints plus a JSON-lines log to ``out_dir``."""
    t_start = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene, field_ = initial_state(dataset, config, init_points)
    sup = Supervisor(dataset, config)
    adam = Adam(config.adam)
    conf_adam = Adam(config.adam)
    rng = np.random.default_rng([config.seed, 2])
    acfg = config.adaptive
    ctx = config.render
    beta = config.mf_weight
    pseudo_only = config.variant == "pseudo_only"
    V, F = dataset.n_views, dataset.n_frames
    grad_unit = float(np.prod(dataset.lr_dims)) if acfg.grad_reduction == "sum" else 1.0
    meta = {"config": config.to_dict(), "dataset": str(dataset.root)}

    own_log = log_stream is None
    fh = open(out / "train_log.jsonl", "w") if own_log else log_stream
    history = []
    last_loss = float("nan")
    try:
        for it in range(config.iters):
            v, f = schedule(it, V, F)
            view = dataset.views[v]
            t = dataset.frame_time(f)
            res = render(scene, field_, view, t, ctx=ctx)
            accumulate_attenuation(scene, res.rho)
            img = res.image.pixels

            if pseudo_only:
                L_gt, g = 0.0, np.zeros_like(img)
            else:
                L_gt, g = loss_gt(img, dataset.lr(v, f), config.loss, sup.conf, dataset.factor)
            L_sr = 0.0
            if config.uses_sr:
                L_sr, g_sr = loss_sr(img, sup.teach(v, f), config.loss, sup.conf)
                w = 1.0 if pseudo_only else beta
                g = g + w * g_sr
                loss = L_gt + w * L_sr
            else:
                loss = L_gt
            if not math.isfinite(loss):
                log.error("non-finite loss %r at iteration %d", loss, it)
                raise NonFiniteLoss(it, loss)

            kern_lr, field_groups = _lrs(config, scene, it)
            pruned = split = inserted = 0
            if len(scene):
                grads = render_backward(scene, field_, view, t, g, result=res, ctx=ctx)
                kg = grads.kernels
                accumulate_subpixel_grads(scene, kg.uv_grad_norm * grad_unit, kg.visible)
                adam.begin_step()
                adam.step_scene(scene, {"mu": kg.d_mu, "log_scale": kg.d_log_scale, "rot": kg.d_rot}, kern_lr)
                params = field_.parameters()
                adam.step_params(params, _field_grad_dict(grads.field), _field_lrs(params, field_groups))
                scene.sanitize()

            if config.confidence.learnable and config.uses_sr and not pseudo_only:
                ga, gb = sup.confidence_grad(v, f, img)
                cp = {"alpha_c": np.array([sup.conf.alpha_c]), "beta_c": np.array([sup.conf.beta_c])}
                conf_adam.begin_step()
                conf_adam.step_params(cp, {"alpha_c": ga, "beta_c": gb},
                                      {"alpha_c": config.lr.confidence, "beta_c": config.lr.confidence})
                sup.conf.alpha_c = float(cp["alpha_c"][0])
                sup.conf.beta_c = float(cp["beta_c"][0])
                if (it + 1) % config.teach_refresh == 0:
                    sup.refresh()

            n_done = it + 1
            if config.adaptive_enabled and n_done % acfg.window == 0:
                pruned = prune(scene, acfg)
                if config.densify_start <= n_done <= config.densify_stop and len(scene):
                    idx = select_densify(scene, acfg, n_done, config.iters)
                    split = densify(scene, idx, acfg, rng)
                    cur = render(scene, field_, view, t, ctx=ctx)
                    residual = np.abs(sup.teach(v, f).astype(np.float64) - cur.image.pixels)
                    inserted = residual_guided_insert(scene, residual, view, acfg, rng,
                                                      raster=cur.raster, ctx=ctx)
                reset_stats(scene, "gradients")

            rec = {"iter": it, "loss": loss, "loss_gt": L_gt, "loss_sr": L_sr, "n_kernels": len(scene),
                   "pruned": pruned, "split": split, "inserted": inserted, "lr_mu": kern_lr["mu"]}
            fh.write(json.dumps(rec) + "\n")
            history.append(rec)
            last_loss = loss
            if progress is not None:
                progress(it, rec)
            if n_done % config.checkpoint_every == 0 and n_done < config.iters:
                save_checkpoint(out / f"checkpoint_{n_done:06d}.dsgs", scene, field_,
                                dict(meta, iteration=n_done))
    finally:
        if own_log:
            fh.close()
        else:
            fh.flush()

    final = out / "checkpoint.dsgs"
    extra = {"alpha_c": sup.conf.alpha_c, "beta_c": sup.conf.beta_c} if config.confidence.learnable else {}
    save_checkpoint(final, scene, field_, dict(meta, iteration=config.iters, **extra))
    return TrainResult(scene, field_, final, last_loss, config.iters, time.perf_counter() - t_start, history)


@dataclass
class EvalReport:
    split: str
    items: list  # (view_id, frame)
    psnr: list
    ssim: list
    n_kernels: int
    wall_time: float
    lr_psnr: list = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    @property
    def mean_lr_psnr(self) -> float:
        return float(np.mean(self.lr_psnr)) if self.lr_psnr else float("nan")

    def to_dict(self, per_image: bool = True) -> dict:
        d = {"split": self.split, "mean_psnr": self.mean_psnr, "mean_ssim": self.mean_ssim,
             "n_kernels": self.n_kernels, "n_images": len(self.psnr), "wall_time": self.wall_time}
        if self.lr_psnr:
            d["mean_lr_psnr"] = self.mean_lr_psnr
        if per_image:
            d["per_image"] = [
                {"view": int(vid), "frame": int(fr), "psnr": p, "ssim": s,
                 **({"lr_psnr": self.lr_psnr[i]} if self.lr_psnr else {})}
                for i, ((vid, fr), p, s) in enumerate(zip(self.items, self.psnr, self.ssim))
            ]
        return d


def evaluate(checkpoint, dataset: Dataset, split: str = "train", frames=None,
             ctx: RenderContext | None = None, views=None) -> EvalReport:
    """HR PSNR/SSIM against ground truth on training or held-out views.

    ``checkpoint`` is a path or a ``(scene, field)`` pair.  For the training
    split the LR-consistency PSNR of the area-downsampled render against the
    LR observation is reported as well.
    """
    t0 = time.perf_counter()
    if split not in ("train", "heldout"):
        raise InvalidConfig(f"unknown split {split!r}")
    if isinstance(checkpoint, (str, Path)):
        scene, field_, _ = load_checkpoint(checkpoint)
    else:
        scene, field_ = checkpoint
    cams = dataset.views if split == "train" else dataset.heldout_views
    if split == "heldout" and not cams:
        raise InvalidConfig("dataset has no held-out views")
    view_idx = range(len(cams)) if views is None else views
    frame_idx = range(dataset.n_frames) if frames is None else frames
    items, ps, ss, lps = [], [], [], []
    for vi in view_idx:
        for fr in frame_idx:
            img = render(scene, field_, cams[vi], dataset.frame_time(fr), ctx=ctx).image.pixels
            gt = dataset.hr(vi, fr) if split == "train" else dataset.heldout_hr(vi, fr)
            items.append((cams[vi].view_id, fr))
            ps.append(psnr(img, gt))
            ss.append(ssim_mean(img, gt))
            if split == "train":
                lps.append(psnr(downsample_area(img, dataset.factor), dataset.lr(vi, fr)))
    return EvalReport(split, items, ps, ss, len(scene), time.perf_counter() - t0, lps)
