"""Binary checkpoints holding the kernel set, the attenuation field and a
JSON metadata trailer.

Layout (little-endian throughout)::

    b"DSGS"  u32 version  u64 n_kernels
    n_kernels x f32[10]        mu(3) log_scale(3) rot(4), interleaved per kernel
    field blob                 see ``pack_field``
    u64 n_bytes  JSON trailer  training metadata, UTF-8
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .dnaf import AttenuationField, AttenuationMLP, HashGridEncoding
from .errors import FormatError
from .geometry import DEFAULT_BBOX
from .scene import KernelStats, Scene

MAGIC = b"DSGS"
VERSION = 1


def _pack_encoding(enc: HashGridEncoding) -> bytes:
    head = np.array([enc.dims, enc.levels, enc.features_per_level, enc.table_size_log2,
                     enc.base_resolution, enc.growth_factor], dtype="<f4")
    return head.tobytes() + np.ascontiguousarray(enc.tables, dtype="<f4").tobytes()


def pack_field(field: AttenuationField) -> bytes:
    """Two encodings (header of six f32 then raw tables), then the MLP as a
    u32 width count, u32 widths, all weight matrices row-major and all biases."""
    out = [_pack_encoding(field.enc3d), _pack_encoding(field.enc4d)]
    widths = field.mlp.widths
    out.append(struct.pack("<I", len(widths)))
    out.append(np.asarray(widths, dtype="<u4").tobytes())
    out.extend(np.ascontiguousarray(W, dtype="<f4").tobytes() for W in field.mlp.weights)
    out.extend(np.ascontiguousarray(b, dtype="<f4").tobytes() for b in field.mlp.biases)
    return b"".join(out)


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated checkpoint while reading {what}")
    return data


def _read_encoding(fh) -> tuple[np.ndarray, np.ndarray]:
    head = np.frombuffer(_read_exact(fh, 24, "encoding header"), dtype="<f4")
    dims, levels, F, log2, base = (int(round(float(v))) for v in head[:5])
    if not (1 <= dims <= 4 and 1 <= levels <= 32 and 1 <= F <= 16 and 1 <= log2 <= 30):
        raise FormatError("implausible hash encoding header")
    n = levels * (1 << log2) * F
    tables = np.frombuffer(_read_exact(fh, 4 * n, "hash tables"), dtype="<f4")
    return head, tables.reshape(levels, 1 << log2, F).astype(np.float32)


def _build_encoding(head, tables, growth: float | None) -> HashGridEncoding:
    dims, levels, F, log2, base = (int(round(float(v))) for v in head[:5])
    # the f32 header rounds the growth factor; the trailer keeps it exact
    g = float(head[5]) if growth is None else float(growth)
    if abs(g - float(head[5])) > 1e-6 * max(1.0, g):
        raise FormatError("growth factor in trailer disagrees with blob header")
    return HashGridEncoding(dims, levels, F, log2, base, g, tables)


def _read_field(fh) -> tuple:
    enc = [_read_encoding(fh), _read_encoding(fh)]
    (n_w,) = struct.unpack("<I", _read_exact(fh, 4, "MLP width count"))
    if not 2 <= n_w <= 64:
        raise FormatError("implausible MLP depth")
    widths = np.frombuffer(_read_exact(fh, 4 * n_w, "MLP widths"), dtype="<u4").astype(int).tolist()
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        W = np.frombuffer(_read_exact(fh, 4 * fan_in * fan_out, "MLP weights"), dtype="<f4")
        weights.append(W.reshape(fan_out, fan_in).astype(np.float32))
    for fan_out in widths[1:]:
        biases.append(np.frombuffer(_read_exact(fh, 4 * fan_out, "MLP biases"), dtype="<f4").astype(np.float32))
    return enc, weights, biases


def _build_field(raw, meta: dict) -> AttenuationField:
    enc, weights, biases = raw
    fmeta = meta.get("field", {})
    growth = fmeta.get("growth", [None, None])
    enc3d = _build_encoding(*enc[0], growth[0])
    enc4d = _build_encoding(*enc[1], growth[1])
    bbox = fmeta.get("bbox")
    try:
        field = AttenuationField(enc3d, enc4d, AttenuationMLP(weights, biases),
                                 np.asarray(bbox, dtype=np.float64) if bbox is not None else DEFAULT_BBOX)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
    return field


def _field_meta(field: AttenuationField) -> dict:
    return {"bbox": field.bbox.ravel().tolist(),
            "growth": [field.enc3d.growth_factor, field.enc4d.growth_factor]}


def save_checkpoint(path, scene: Scene, field: AttenuationField, metadata: dict | None = None) -> None:
    meta = dict(metadata or {})
    meta["scene_bbox"] = scene.bbox.ravel().tolist()
    meta["field"] = _field_meta(field)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", VERSION, len(scene)))
    packed = np.hstack([scene.mu, scene.log_scale, scene.rot]).astype("<f4")
    buf.write(packed.tobytes())
    buf.write(pack_field(field))
    trailer = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<Q", len(trailer)))
    buf.write(trailer)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[Scene, AttenuationField, dict]:
    """Returns ``(scene, field, metadata)``; statistics start at zero."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    fh = io.BytesIO(data)
    fh.seek(4)
    version, n = struct.unpack("<IQ", _read_exact(fh, 12, "header"))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if 40 * n > len(data):
        raise FormatError(f"{path}: kernel count {n} exceeds file size")
    kern = np.frombuffer(_read_exact(fh, 40 * n, "kernels"), dtype="<f4").reshape(n, 10)
    raw = _read_field(fh)
    (tlen,) = struct.unpack("<Q", _read_exact(fh, 8, "trailer length"))
    trailer = _read_exact(fh, tlen, "trailer")
    if fh.read(1):
        raise FormatError(f"{path}: trailing bytes after metadata")
    try:
        meta = json.loads(trailer.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable metadata trailer") from exc
    field = _build_field(raw, meta)
    bbox = meta.get("scene_bbox")
    scene = Scene(kern[:, 0:3].copy(), kern[:, 3:6].copy(), kern[:, 6:10].copy(), KernelStats.zeros(int(n)),
                  np.asarray(bbox, dtype=np.float64) if bbox is not None else DEFAULT_BBOX)
    return scene, field, meta
