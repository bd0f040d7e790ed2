"""Dynamic neural attenuation field.

A static 3D hash grid and a spatio-temporal 4D hash grid are sampled at a
kernel centre, their features concatenated and fed to a small ReLU MLP with a
softplus head.  Forward and backward passes are written out by hand; the
hash-grid parts run in numba.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .errors import check_time

PRIMES = np.array([1, 2654435761, 805459861, 3674653429], dtype=np.int64)


@dataclass
class HashGridEncoding:
    dims: int
    levels: int
    features_per_level: int
    table_size_log2: int
    base_resolution: int
    growth_factor: float
    tables: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.dims not in (3, 4):
            raise ValueError("hash grids support 3 or 4 dimensions")
        if self.growth_factor <= 1.0:
            raise ValueError("growth_factor must exceed 1")
        shape = (self.levels, 1 << self.table_size_log2, self.features_per_level)
        if self.tables is None:
            self.tables = np.zeros(shape, dtype=np.float32)
        self.tables = np.ascontiguousarray(self.tables, dtype=np.float32).reshape(shape)

    @property
    def table_size(self) -> int:
        return 1 << self.table_size_log2

    @property
    def resolutions(self) -> np.ndarray:
        return np.array([math.floor(self.base_resolution * self.growth_factor ** l)
                         for l in range(self.levels)], dtype=np.int64)

    @property
    def n_features(self) -> int:
        return self.levels * self.features_per_level


@nb.njit(cache=True, error_model="numpy")
def _corner_setup(x, res, base, frac):
    D = x.shape[0]
    for d in range(D):
        pos = x[d] * res
        i0 = int(math.floor(pos))
        if i0 > res - 1:
            i0 = res - 1
        if i0 < 0:
            i0 = 0
        base[d] = i0
        frac[d] = pos - i0


@nb.njit(cache=True, error_model="numpy")
def _corner_slot(base, c, mask, primes):
    h = np.int64(0)
    for d in range(base.shape[0]):
        h ^= (base[d] + ((c >> d) & 1)) * primes[d]
    return h & mask


@nb.njit(cache=True, error_model="numpy")
def _corner_weight(frac, c):
    w = 1.0
    for d in range(frac.shape[0]):
        w *= frac[d] if (c >> d) & 1 else 1.0 - frac[d]
    return w


@nb.njit(parallel=True, cache=True, error_model="numpy")
def _encode_batch(xs, tables, res, primes):
    N, D = xs.shape
    L, T, F = tables.shape
    mask = np.int64(T - 1)
    out = np.zeros((N, L * F))
    for n in nb.prange(N):
        base = np.empty(D, np.int64)
        frac = np.empty(D)
        for l in range(L):
            _corner_setup(xs[n], res[l], base, frac)
            for c in range(1 << D):
                w = _corner_weight(frac, c)
                slot = _corner_slot(base, c, mask, primes)
                for f in range(F):
                    out[n, l * F + f] += w * tables[l, slot, f]
    return out


@nb.njit(parallel=True, cache=True, error_model="numpy")
def _encode_backward_batch(xs, tables, res, primes, d_feat, d_tables):
    """Accumulates into ``d_tables``; returns d/dx per level (L, N, D).

    Each level is owned by one thread and visits points in index order, so
    the table accumulation is deterministic for any thread count.
    """
    N, D = xs.shape
    L, T, F = tables.shape
    mask = np.int64(T - 1)
    d_x = np.zeros((L, N, D))
    for l in nb.prange(L):
        r = res[l]
        base = np.empty(D, np.int64)
        frac = np.empty(D)
        for n in range(N):
            _corner_setup(xs[n], r, base, frac)
            for c in range(1 << D):
                w = _corner_weight(frac, c)
                slot = _corner_slot(base, c, mask, primes)
                dot = 0.0
                for f in range(F):
                    g = d_feat[n, l * F + f]
                    d_tables[l, slot, f] += w * g
                    dot += g * tables[l, slot, f]
                if dot == 0.0:
                    continue
                for d in range(D):
                    dw = 1.0
                    for e in range(D):
                        if e == d:
                            dw *= 1.0 if (c >> e) & 1 else -1.0
                        else:
                            dw *= frac[e] if (c >> e) & 1 else 1.0 - frac[e]
                    d_x[l, n, d] += dw * dot * r
    return d_x


@nb.njit(cache=True, error_model="numpy")
def _corner_slots_weights(x, res, mask, primes):
    L = res.shape[0]
    D = x.shape[0]
    slots = np.empty((L, 1 << D), np.int64)
    weights = np.empty((L, 1 << D))
    base = np.empty(D, np.int64)
    frac = np.empty(D)
    for l in range(L):
        _corner_setup(x, res[l], base, frac)
        for c in range(1 << D):
            slots[l, c] = _corner_slot(base, c, mask, primes)
            weights[l, c] = _corner_weight(frac, c)
    return slots, weights


def encode(enc: HashGridEncoding, x) -> np.ndarray:
    """Multiresolution hash features of points in ``[0, 1]^dims``.

    Accepts a single point (dims,) or a batch (N, dims); coordinates outside
    the unit cube are clamped.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xs = np.clip(np.atleast_2d(x), 0.0, 1.0)
    out = _encode_batch(np.ascontiguousarray(xs), enc.tables, enc.resolutions, PRIMES)
    return out[0] if single else out


def softplus(z):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def softplus_inv(y: float) -> float:
    return float(y + math.log(-math.expm1(-y)))


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@dataclass
class AttenuationMLP:
    """ReLU hidden layers, softplus scalar output. Weights are (out, in)."""

    weights: list
    biases: list

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @classmethod
    def init(cls, widths, rng, out_bias: float) -> "AttenuationMLP":
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            lim = math.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)).astype(np.float32))
            biases.append(np.zeros(fan_out, dtype=np.float32))
        biases[-1][:] = out_bias
        return cls(weights, biases)

    def forward(self, X):
        acts = [X]
        h = X
        n = len(self.weights)
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W.astype(np.float64).T + b.astype(np.float64)
            if i < n - 1:
                h = np.maximum(z, 0.0)
                acts.append(h)
            else:
                h = z
        return h[:, 0], acts

    def backward(self, acts, z_out, d_rho):
        """Gradients of sum(d_rho * softplus(z_out)); returns (dWs, dbs, d_input)."""
        g = (np.asarray(d_rho, dtype=np.float64) * sigmoid(z_out))[:, None]
        dWs = [None] * len(self.weights)
        dbs = [None] * len(self.weights)
        for i in range(len(self.weights) - 1, -1, -1):
            dWs[i] = g.T @ acts[i]
            dbs[i] = g.sum(axis=0)
            g = g @ self.weights[i].astype(np.float64)
            if i > 0:
                g = g * (acts[i] > 0.0)
        return dWs, dbs, g


@dataclass
class FieldConfig:
    levels_3d: int = 8
    features_3d: int = 2
    table_log2_3d: int = 15
    base_res_3d: int = 16
    growth_3d: float = 1.382
    levels_4d: int = 6
    features_4d: int = 2
    table_log2_4d: int = 15
    base_res_4d: int = 8
    growth_4d: float = 1.382
    hidden: tuple = (32, 32)
    hash_init: float = 1e-4
    init_attenuation: float = 0.01


@dataclass
class FieldGrads:
    tables3d: np.ndarray
    tables4d: np.ndarray
    weights: list
    biases: list


@dataclass
class FieldCache:
    x3: np.ndarray
    x4: np.ndarray
    inside: np.ndarray
    acts: list
    z: np.ndarray


class AttenuationField:
    """Maps (position mm, time in [0,1]) to a non-negative attenuation."""

    def __init__(self, enc3d: HashGridEncoding, enc4d: HashGridEncoding, mlp: AttenuationMLP, bbox):
        self.enc3d = enc3d
        self.enc4d = enc4d
        self.mlp = mlp
        self.bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
        if mlp.widths[0] != enc3d.n_features + enc4d.n_features or mlp.widths[-1] != 1:
            raise ValueError("MLP widths do not match the encodings")

    @classmethod
    def create(cls, config: FieldConfig | None = None, bbox=None, seed: int = 0) -> "AttenuationField":
        from .geometry import DEFAULT_BBOX

        c = config or FieldConfig()
        rng = np.random.default_rng(seed)
        enc3d = HashGridEncoding(3, c.levels_3d, c.features_3d, c.table_log2_3d, c.base_res_3d, c.growth_3d)
        enc4d = HashGridEncoding(4, c.levels_4d, c.features_4d, c.table_log2_4d, c.base_res_4d, c.growth_4d)
        for enc in (enc3d, enc4d):
            enc.tables[:] = rng.uniform(-c.hash_init, c.hash_init, size=enc.tables.shape)
        widths = [enc3d.n_features + enc4d.n_features, *c.hidden, 1]
        mlp = AttenuationMLP.init(widths, rng, softplus_inv(c.init_attenuation))
        return cls(enc3d, enc4d, mlp, DEFAULT_BBOX if bbox is None else bbox)

    def copy(self) -> "AttenuationField":
        e3, e4 = self.enc3d, self.enc4d
        return AttenuationField(
            HashGridEncoding(e3.dims, e3.levels, e3.features_per_level, e3.table_size_log2,
                             e3.base_resolution, e3.growth_factor, e3.tables.copy()),
            HashGridEncoding(e4.dims, e4.levels, e4.features_per_level, e4.table_size_log2,
                             e4.base_resolution, e4.growth_factor, e4.tables.copy()),
            AttenuationMLP([w.copy() for w in self.mlp.weights], [b.copy() for b in self.mlp.biases]),
            self.bbox.copy(),
        )

    def parameters(self) -> dict[str, np.ndarray]:
        """Live references to every trainable array, keyed by group name."""
        p = {"tables3d": self.enc3d.tables, "tables4d": self.enc4d.tables}
        for i, (W, b) in enumerate(zip(self.mlp.weights, self.mlp.biases)):
            p[f"W{i}"] = W
            p[f"b{i}"] = b
        return p

    def normalize(self, mu):
        span = self.bbox[1] - self.bbox[0]
        x = (np.asarray(mu, dtype=np.float64) - self.bbox[0]) / span
        inside = (x >= 0.0) & (x <= 1.0)
        return np.clip(x, 0.0, 1.0), inside

    def forward(self, mu, t: float):
        """Batched evaluation at (N, 3) centres; returns (rho, cache)."""
        t = check_time(t)
        mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
        x3, inside = self.normalize(mu)
        x3 = np.ascontiguousarray(x3)
        x4 = np.ascontiguousarray(np.hstack([x3, np.full((len(x3), 1), t)]))
        f3 = _encode_batch(x3, self.enc3d.tables, self.enc3d.resolutions, PRIMES)
        f4 = _encode_batch(x4, self.enc4d.tables, self.enc4d.resolutions, PRIMES)
        z, acts = self.mlp.forward(np.hstack([f3, f4]))
        return softplus(z), FieldCache(x3, x4, inside, acts, z)

    def __call__(self, mu, t: float) -> np.ndarray:
        return self.forward(mu, t)[0]

    def backward(self, cache: FieldCache, d_rho):
        """Dense parameter gradients and d/dmu for ``sum(d_rho * rho)``."""
        dWs, dbs, d_in = self.mlp.backward(cache.acts, cache.z, d_rho)
        n3 = self.enc3d.n_features
        d_feat3 = np.ascontiguousarray(d_in[:, :n3])
        d_feat4 = np.ascontiguousarray(d_in[:, n3:])
        g3 = np.zeros(self.enc3d.tables.shape)
        g4 = np.zeros(self.enc4d.tables.shape)
        dx3 = _encode_backward_batch(cache.x3, self.enc3d.tables, self.enc3d.resolutions, PRIMES, d_feat3, g3)
        dx4 = _encode_backward_batch(cache.x4, self.enc4d.tables, self.enc4d.resolutions, PRIMES, d_feat4, g4)
        dx = dx3.sum(axis=0) + dx4.sum(axis=0)[:, :3]
        d_mu = np.where(cache.inside, dx, 0.0) / (self.bbox[1] - self.bbox[0])
        return FieldGrads(g3, g4, dWs, dbs), d_mu


def attenuation(field: AttenuationField, mu, t: float) -> float:
    """Central attenuation of one kernel at time ``t``."""
    return float(field(np.asarray(mu, dtype=np.float64).reshape(1, 3), t)[0])


@dataclass
class SparseTableGrad:
    level: np.ndarray
    slot: np.ndarray
    value: np.ndarray  # (M, F)


def _sparse_table_grad(enc: HashGridEncoding, x, d_feat) -> SparseTableGrad:
    slots, weights = _corner_slots_weights(np.ascontiguousarray(x), enc.resolutions,
                                           np.int64(enc.table_size - 1), PRIMES)
    F = enc.features_per_level
    acc: dict[tuple[int, int], np.ndarray] = {}
    for l in range(enc.levels):
        g = d_feat[l * F:(l + 1) * F]
        for c in range(slots.shape[1]):
            key = (l, int(slots[l, c]))
            acc[key] = acc.get(key, 0.0) + weights[l, c] * g
    keys = sorted(acc)
    return SparseTableGrad(
        np.array([k[0] for k in keys], dtype=np.int64),
        np.array([k[1] for k in keys], dtype=np.int64),
        np.array([acc[k] for k in keys], dtype=np.float64).reshape(len(keys), F),
    )


def attenuation_backward(field: AttenuationField, mu, t: float, d_rho: float):
    """Exact gradients of ``d_rho * rho(mu, t)`` for a single point.

    Returns ``(d_mu, table_grads, mlp_grads)`` where ``table_grads`` maps
    ``"3d"``/``"4d"`` to :class:`SparseTableGrad` holding only touched slots
    and ``mlp_grads`` is ``(dWs, dbs)``.
    """
    mu = np.asarray(mu, dtype=np.float64).reshape(1, 3)
    _, cache = field.forward(mu, t)
    d = np.array([float(d_rho)])
    dWs, dbs, d_in = field.mlp.backward(cache.acts, cache.z, d)
    grads, d_mu = field.backward(cache, d)
    n3 = field.enc3d.n_features
    tables = {
        "3d": _sparse_table_grad(field.enc3d, cache.x3[0], d_in[0, :n3]),
        "4d": _sparse_table_grad(field.enc4d, cache.x4[0], d_in[0, n3:]),
    }
    return d_mu[0], tables, (grads.weights, grads.biases)
