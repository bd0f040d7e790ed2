"""Adam with named parameter groups.

Kernel parameters change length whenever kernels are split, inserted or
pruned, so their moments live in ``Scene.opt_state`` and follow the scene's
structural edits.  Field parameters have fixed shapes and keep their moments
here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

KERNEL_GROUPS = ("mu", "log_scale", "rot")


@dataclass
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15


def exp_decay(lr0: float, step: int, total: int, final_ratio: float = 0.01) -> float:
    """Log-linear interpolation from ``lr0`` to ``lr0 * final_ratio`` over ``total`` steps."""
    if total <= 0:
        return lr0
    frac = min(max(step / total, 0.0), 1.0)
    return lr0 * math.exp(frac * math.log(final_ratio))


class Adam:
    def __init__(self, config: AdamConfig | None = None):
        self.config = config or AdamConfig()
        self.step_count = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def _update(self, param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, lr: float) -> None:
        c = self.config
        g = np.asarray(grad, dtype=np.float64).reshape(param.shape)
        m *= c.beta1
        m += (1.0 - c.beta1) * g
        v *= c.beta2
        v += (1.0 - c.beta2) * g * g
        bc1 = 1.0 - c.beta1 ** self.step_count
        bc2 = 1.0 - c.beta2 ** self.step_count
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
        param[...] = (param.astype(np.float64) - step).astype(param.dtype)

    def begin_step(self) -> None:
        self.step_count += 1

    def step_scene(self, scene, grads: dict[str, np.ndarray], lrs: dict[str, float]) -> None:
        for name in KERNEL_GROUPS:
            if name not in grads:
                continue
            param = getattr(scene, name)
            mk, vk = f"m_{name}", f"v_{name}"
            if mk not in scene.opt_state or scene.opt_state[mk].shape != param.shape:
                scene.opt_state[mk] = np.zeros(param.shape)
                scene.opt_state[vk] = np.zeros(param.shape)
            self._update(param, grads[name], scene.opt_state[mk], scene.opt_state[vk], lrs[name])

    def step_params(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                    lrs: dict[str, float]) -> None:
        """Update arrays in place; ``lrs`` is keyed by parameter name."""
        for name, param in params.items():
            if name not in grads:
                continue
            if name not in self._m:
                self._m[name] = np.zeros(param.shape)
                self._v[name] = np.zeros(param.shape)
            self._update(param, grads[name], self._m[name], self._v[name], lrs[name])
