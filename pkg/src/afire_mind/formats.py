"""On-disk formats: AFT feature/response matrices and model checkpoints.

AFT layout (little-endian)::

    b"AFT1" | version u32 | dtype u32 (4 = f32, 8 = f64) | n_rows u32 |
    n_cols u32 | rate_hz f64 | subject_id u32 | len u32 + UTF-8 episode_id |
    row-major payload

Checkpoint layout::

    b"MINDCKPT" | version u32 | manifest_len u64 | manifest (UTF-8 JSON) |
    float64 LE blobs in manifest order
"""

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

AFT_MAGIC = b"AFT1"
AFT_VERSION = 1
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}

CKPT_MAGIC = b"MINDCKPT"
CKPT_VERSION = 1


def write_aft(path, frames, rate_hz, subject_id, episode_id, dtype="f64"):
    frames = np.asarray(frames)
    if frames.ndim != 2:
        raise FormatError("AFT payload must be 2-D")
    code = {"f32": 4, "f64": 8}[dtype]
    ep = episode_id.encode("utf-8")
    head = AFT_MAGIC + struct.pack(
        "<IIIIdII", AFT_VERSION, code, frames.shape[0], frames.shape[1],
        float(rate_hz), int(subject_id), len(ep),
    )
    payload = np.ascontiguousarray(frames, dtype=_DTYPES[code]).tobytes()
    Path(path).write_bytes(head + ep + payload)


def read_aft(path, promote=True):
    """Return ``(frames, rate_hz, subject_id, episode_id)``.

    ``f32`` payloads are promoted to float64 unless ``promote`` is False.
    """
    buf = Path(path).read_bytes()
    fixed = struct.calcsize("<IIIIdII")
    if len(buf) < 4 + fixed or buf[:4] != AFT_MAGIC:
        raise FormatError(f"{path}: not an AFT1 file")
    version, code, n_rows, n_cols, rate, subj, n_ep = struct.unpack_from("<IIIIdII", buf, 4)
    if version != AFT_VERSION or code not in _DTYPES:
        raise FormatError(f"{path}: unsupported version {version} / dtype {code}")
    off = 4 + fixed
    episode = buf[off:off + n_ep].decode("utf-8")
    off += n_ep
    dt = _DTYPES[code]
    if len(buf) - off != n_rows * n_cols * dt.itemsize:
        raise FormatError(f"{path}: payload length does not match header")
    frames = np.frombuffer(buf, dtype=dt, offset=off).reshape(n_rows, n_cols)
    frames = frames.astype(np.float64) if promote else frames.copy()
    return frames, rate, subj, episode


def config_hash(config):
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, net, extra=None):
    cfg = net.config()
    manifest = {
        "format": CKPT_VERSION,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": net.seed,
        "params": [{"name": k, "shape": list(v.shape)} for k, v in net.store.params.items()],
        "extra": extra or {},
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<IQ", CKPT_VERSION, len(mbytes)), mbytes]
    parts += [np.ascontiguousarray(v, dtype="<f8").tobytes() for v in net.store.params.values()]
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    """Rebuild a ``MINDNetwork``; returns ``(net, manifest)``."""
    from .mind import MINDNetwork

    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    version, n = struct.unpack_from("<IQ", buf, 8)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    off = 8 + struct.calcsize("<IQ")
    manifest = json.loads(buf[off:off + n].decode("utf-8"))
    off += n
    net = MINDNetwork.from_config(manifest["config"])
    for entry in manifest["params"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in net.store or net.store[name].shape != shape:
            raise FormatError(f"{path}: parameter {name} {shape} does not fit the config")
        size = int(np.prod(shape)) * 8
        if off + size > len(buf):
            raise FormatError(f"{path}: truncated at parameter {name}")
        net.store[name][...] = np.frombuffer(buf, dtype="<f8", count=size // 8,
                                             offset=off).reshape(shape)
        off += size
    if off != len(buf):
        raise FormatError(f"{path}: trailing bytes after parameter blobs")
    return net, manifest
