"""Named parameter storage, the ADAM update, and the binary checkpoint format."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import DTYPE, Tensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CKPT_MAGIC = b"SPSCKPT\x00"
CKPT_VERSION = 1


class MissingGradientError(KeyError):
    pass


def seeded_rng(seed: int, name: str) -> np.random.Generator:
    """Per-parameter generator so that a parameter's init does not depend on
    which other modules happen to exist in a given configuration."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


@dataclass
class ParameterStore:
    params: dict[str, Tensor] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=DTYPE), requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for n, t in self.params.items()}

    def num_values(self) -> int:
        return sum(t.size for t in self.params.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}


def adam_step(store: ParameterStore, grads: dict[str, np.ndarray], lr: float) -> ParameterStore:
    """One bias-corrected ADAM update applied in place; returns ``store``."""
    for name in store.params:
        if name not in grads:
            raise MissingGradientError(f"no gradient supplied for parameter {name!r}")
    store.step += 1
    t = store.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for name, p in store.params.items():
        g = np.asarray(grads[name], dtype=DTYPE)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        m, v = store.m[name], store.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        p.data = p.data - (lr / c1) * m / (np.sqrt(v / c2) + ADAM_EPS)
    return store


# ---------------------------------------------------------------------------
# checkpoint file
# ---------------------------------------------------------------------------
# layout (little-endian):
#   magic[8] version:u8 meta_len:u32 meta:utf8 n_records:u32
#   record: name_len:u16 name:utf8 ndim:u8 dims:u64*ndim values:f64*prod(dims)

def _write_array(buf: list, name: str, arr: np.ndarray) -> None:
    nb = name.encode()
    buf.append(struct.pack("<H", len(nb)))
    buf.append(nb)
    buf.append(struct.pack("<B", arr.ndim))
    buf.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_array(raw: memoryview, pos: int):
    (nlen,) = struct.unpack_from("<H", raw, pos)
    pos += 2
    name = bytes(raw[pos:pos + nlen]).decode()
    pos += nlen
    (ndim,) = struct.unpack_from("<B", raw, pos)
    pos += 1
    shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
    pos += 8 * ndim
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).astype(DTYPE).reshape(shape)
    pos += 8 * count
    return name, arr, pos


def encode_records(records: dict[str, np.ndarray], meta: str = "") -> bytes:
    buf = [CKPT_MAGIC, struct.pack("<B", CKPT_VERSION)]
    mb = meta.encode()
    buf.append(struct.pack("<I", len(mb)))
    buf.append(mb)
    buf.append(struct.pack("<I", len(records)))
    for name, arr in records.items():
        _write_array(buf, name, np.asarray(arr))
    return b"".join(buf)


def decode_records(data: bytes) -> tuple[dict[str, np.ndarray], str]:
    raw = memoryview(data)
    if bytes(raw[:8]) != CKPT_MAGIC:
        raise ValueError("not a parameter checkpoint (bad magic)")
    if raw[8] != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {raw[8]}")
    pos = 9
    (mlen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    meta = bytes(raw[pos:pos + mlen]).decode()
    pos += mlen
    (n,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    records = {}
    for _ in range(n):
        name, arr, pos = _read_array(raw, pos)
        records[name] = arr
    if pos != len(raw):
        raise ValueError("trailing bytes in checkpoint")
    return records, meta


def store_records(store: ParameterStore, prefix: str = "") -> dict[str, np.ndarray]:
    """Parameters plus ADAM state, flattened into one name -> array map."""
    out = {}
    for name, t in store.params.items():
        out[f"{prefix}param/{name}"] = t.data
        out[f"{prefix}adam_m/{name}"] = store.m[name]
        out[f"{prefix}adam_v/{name}"] = store.v[name]
    out[f"{prefix}adam_step"] = np.array(float(store.step))
    return out


def load_store_records(store: ParameterStore, records: dict[str, np.ndarray], prefix: str = "") -> None:
    for name, t in store.params.items():
        arr = records[f"{prefix}param/{name}"]
        if arr.shape != t.shape:
            raise ValueError(f"checkpoint shape {arr.shape} for {name!r}, expected {t.shape}")
        t.data = arr.copy()
        store.m[name] = records[f"{prefix}adam_m/{name}"].copy()
        store.v[name] = records[f"{prefix}adam_v/{name}"].copy()
    store.step = int(records[f"{prefix}adam_step"])


def save_store(store: ParameterStore, path: str | Path, meta: str = "") -> None:
    Path(path).write_bytes(encode_records(store_records(store), meta))


def load_store(store: ParameterStore, path: str | Path) -> str:
    records, meta = decode_records(Path(path).read_bytes())
    load_store_records(store, records)
    return meta
