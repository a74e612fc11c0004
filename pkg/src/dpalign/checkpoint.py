"""Binary checkpoint format.

Layout (all integers little-endian):

    magic     4 bytes   b"DPAN"
    version   u16       currently 1
    count     u32       number of entries
    entry     repeated:
        name_len  u16
        name      UTF-8 bytes
        rank      u8
        dims      u32 per axis
        data      float32 little-endian, C order

Entries are written in parameter-store order; loading validates the name
list and every shape against the store built from the current NetConfig, so
a checkpoint cannot silently load into a different architecture.
"""

import struct

import numpy as np

MAGIC = b"DPAN"
VERSION = 1


def save_params(path, store):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(store)))
        for name, tensor in store.items():
            raw = name.encode("utf-8")
            vals = np.ascontiguousarray(tensor.values, dtype="<f4")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", vals.ndim))
            fh.write(struct.pack(f"<{vals.ndim}I", *vals.shape))
            fh.write(vals.tobytes())


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError(f"truncated checkpoint: expected {n} bytes for {what}, got {len(buf)}")
    return buf


def read_entries(path):
    """All (name, float32 array) entries, in file order."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise ValueError(f"not a checkpoint file (bad magic): {path}")
        version, count = struct.unpack("<HI", _read_exact(fh, 6, "header"))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version} (expected {VERSION})")
        entries = []
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, f"rank of {name!r}"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, f"dims of {name!r}"))
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            data = np.frombuffer(_read_exact(fh, 4 * size, f"data of {name!r}"), dtype="<f4")
            entries.append((name, data.reshape(dims).copy()))
        if fh.read(1):
            raise ValueError(f"trailing bytes after {count} checkpoint entries: {path}")
    return entries


def load_params(path, store):
    """Load a checkpoint into an existing store (shapes and names must match)."""
    entries = dict(read_entries(path))
    expected = set(store.names())
    got = set(entries)
    if expected - got:
        missing = sorted(expected - got)[0]
        raise ValueError(f"checkpoint is missing parameter {missing!r}")
    if got - expected:
        extra = sorted(got - expected)[0]
        raise ValueError(f"checkpoint has unexpected parameter {extra!r}")
    for name, tensor in store.items():
        data = entries[name]
        if data.shape != tensor.values.shape:
            raise ValueError(
                f"checkpoint shape mismatch for {name!r}: file {data.shape}, "
                f"config expects {tensor.values.shape}"
            )
        tensor.values = data.astype(tensor.values.dtype, copy=False)
    return store
