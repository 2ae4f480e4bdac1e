"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"DCAL"  u16 version  32-byte sha256 of the network config
    u32 len + network config JSON
    u64 epoch  u64 iteration
    array block: generator params, generator buffers, discriminator params, discriminator buffers
    per optimizer (generator, then discriminator):
        f64 lr, beta1, beta2, epsilon  u64 step_count
        array block: first moments, then array block: second moments
    u32 len + RNG state JSON

An array block is ``u32 count`` followed by, per array, ``u16 name length``,
the UTF-8 name, ``u8 ndim``, ``u32`` dims and the float32 data. Arrays appear
in declaration order, so two checkpoints of the same state are byte-identical.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import AdamState, Tensor
from .errors import ConfigError, DataError
from .models import GanParams, LayerParams, NetworkConfig, init_params, named_buffers, named_parameters

MAGIC = b"DCAL"
VERSION = 1


@dataclass
class Checkpoint:
    config: NetworkConfig
    params: GanParams
    g_opt: AdamState
    d_opt: AdamState
    epoch: int
    iteration: int
    rng_state: dict

    @property
    def fingerprint(self) -> bytes:
        return self.config.fingerprint()


# -- writing -------------------------------------------------------------------


def _write_arrays(buf: io.BytesIO, arrays: list[tuple[str, np.ndarray]]) -> None:
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        if arr.dtype != np.float32:
            raise DataError(f"checkpoint arrays must be float32; {name} is {arr.dtype}")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _json_blob(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _state_arrays(params: GanParams) -> list[tuple[str, np.ndarray]]:
    arrays: list[tuple[str, np.ndarray]] = []
    for prefix, net in (("G.", params.generator), ("D.", params.discriminator)):
        arrays += [(k, t.data) for k, t in named_parameters(net, prefix).items()]
        arrays += list(named_buffers(net, prefix).items())
    return arrays


def dumps(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    buf.write(ckpt.config.fingerprint())
    cfg = ckpt.config.canonical_json().encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<QQ", ckpt.epoch, ckpt.iteration))
    _write_arrays(buf, _state_arrays(ckpt.params))
    for opt, net in ((ckpt.g_opt, ckpt.params.generator), (ckpt.d_opt, ckpt.params.discriminator)):
        buf.write(struct.pack("<4dQ", opt.lr, opt.beta1, opt.beta2, opt.epsilon, opt.step_count))
        names = list(named_parameters(net))
        _write_arrays(buf, [(k, opt.m[k]) for k in names])
        _write_arrays(buf, [(k, opt.v[k]) for k in names])
    rng = _json_blob(ckpt.rng_state)
    buf.write(struct.pack("<I", len(rng)))
    buf.write(rng)
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        tmp.write_bytes(dumps(ckpt))
        tmp.replace(path)
    except OSError as exc:
        raise DataError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


# -- reading -------------------------------------------------------------------


class _Reader:
    def __init__(self, blob: bytes, source: str):
        self.blob = blob
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise DataError(f"{self.source}: truncated checkpoint")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def arrays(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (n,) = self.unpack("<H")
            name = self.take(n).decode()
            (ndim,) = self.unpack("<B")
            shape = self.unpack(f"<{ndim}I")
            size = int(np.prod(shape, dtype=np.int64))
            out[name] = np.frombuffer(self.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        return out

    def blob_json(self):
        (n,) = self.unpack("<I")
        return json.loads(self.take(n))


def _assign(params: GanParams, arrays: dict[str, np.ndarray], source: str) -> None:
    expected = dict(_state_arrays(params))
    if set(arrays) != set(expected):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise ConfigError(f"{source}: parameter set mismatch (missing {missing[:3]}, unexpected {extra[:3]})")
    for prefix, net in (("G.", params.generator), ("D.", params.discriminator)):
        for layer, lp in net.items():
            for field_name in ("kernels", "bias", "bn_gamma", "bn_beta"):
                t = getattr(lp, field_name)
                if t is not None:
                    _set_tensor(t, arrays[f"{prefix}{layer}.{field_name}"], f"{prefix}{layer}.{field_name}")
            for field_name in ("bn_running_mean", "bn_running_var"):
                if getattr(lp, field_name) is not None:
                    setattr(lp, field_name, arrays[f"{prefix}{layer}.{field_name}"])


def _set_tensor(t: Tensor, arr: np.ndarray, name: str) -> None:
    if arr.shape != t.shape:
        raise ConfigError(f"checkpoint array {name} has shape {arr.shape}, expected {t.shape}")
    t.data = arr
    t.grad = None


def loads(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    r = _Reader(blob, source)
    if r.take(4) != MAGIC:
        raise DataError(f"{source}: not a checkpoint file (bad magic)")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise DataError(f"{source}: unsupported checkpoint version {version}")
    fingerprint = r.take(32)
    (n,) = r.unpack("<I")
    cfg_bytes = r.take(n)
    if hashlib.sha256(cfg_bytes).digest() != fingerprint:
        raise DataError(f"{source}: config fingerprint does not match the embedded config")
    config = NetworkConfig.from_dict(json.loads(cfg_bytes))
    epoch, iteration = r.unpack("<QQ")

    params = init_params(config, seed=0)
    _assign(params, r.arrays(), source)
    opts = []
    for net in (params.generator, params.discriminator):
        lr, b1, b2, eps, steps = r.unpack("<4dQ")
        m, v = r.arrays(), r.arrays()
        names = list(named_parameters(net))
        if list(m) != names or list(v) != names:
            raise ConfigError(f"{source}: optimizer state does not match the parameter list")
        opts.append(AdamState(lr=lr, beta1=b1, beta2=b2, epsilon=eps, step_count=steps, m=m, v=v))
    rng_state = r.blob_json()
    if r.pos != len(blob):
        raise DataError(f"{source}: trailing bytes after checkpoint")
    return Checkpoint(config, params, opts[0], opts[1], epoch, iteration, rng_state)


def load_checkpoint(path: str | Path, expect: NetworkConfig | None = None) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    ckpt = loads(blob, str(path))
    if expect is not None and expect.fingerprint() != ckpt.config.fingerprint():
        raise ConfigError(f"{path}: checkpoint config does not match the requested network config")
    return ckpt
