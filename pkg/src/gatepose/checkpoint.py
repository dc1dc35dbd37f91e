"""Binary weight files.

Layout (all integers little-endian):

    magic   b"GAPW"
    u32     format version (currently 1)
    u64     config JSON byte length, then the UTF-8 JSON itself
    u64     training step counter
    u64     number of tensor records, then the records
    u8      optimizer-state flag; if 1: u64 record count, then records

A tensor record is u32 name length, UTF-8 name, u32 rank, rank u64 dims,
then the raw IEEE-754 binary64 payload in row-major order. Optimizer
records reuse the same encoding under "m:", "v:" and "t:" name prefixes
(first/second moment and per-parameter step count).

The parser reads the whole file before touching any model, so a truncated
or corrupt file never produces a partially loaded network.
"""

import struct

import numpy as np

from .errors import FormatError
from .model import Model, ModelConfig

MAGIC = b"GAPW"
VERSION = 1


def _tensor_records(model):
    for name, p in model.named_parameters():
        yield name, p.data
    for name, b in model.named_buffers():
        yield name, b


def _write_record(out, name, arr):
    nb = name.encode("utf-8")
    out.append(struct.pack("<I", len(nb)))
    out.append(nb)
    out.append(struct.pack("<I", arr.ndim))
    out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def save(model, path, step=0, optimizer=None):
    """Write parameters, buffers and (optionally) Adam state to path."""
    records = list(_tensor_records(model))
    out = [MAGIC, struct.pack("<I", VERSION)]
    cfg = model.config.to_json().encode("utf-8")
    out.append(struct.pack("<Q", len(cfg)))
    out.append(cfg)
    out.append(struct.pack("<Q", step))
    out.append(struct.pack("<Q", len(records)))
    for name, arr in records:
        _write_record(out, name, arr)
    opt_state = optimizer.state_dict() if optimizer is not None else None
    if opt_state is None:
        out.append(struct.pack("<B", 0))
    else:
        out.append(struct.pack("<B", 1))
        out.append(struct.pack("<Q", 3 * len(opt_state)))
        for name, st in opt_state.items():
            _write_record(out, "m:" + name, st["m"])
            _write_record(out, "v:" + name, st["v"])
            _write_record(out, "t:" + name,
                          np.array(float(st["step"])))
    with open(path, "wb") as f:
        f.write(b"".join(out))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError(
                f"truncated checkpoint: wanted {n} bytes at offset "
                f"{self.pos}, file has {len(self.data)}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals[0] if len(vals) == 1 else vals

    def record(self):
        name_len = self.unpack("<I")
        name = self.take(name_len).decode("utf-8")
        rank = self.unpack("<I")
        dims = [self.unpack("<Q") for _ in range(rank)]
        count = 1
        for d in dims:
            count *= d
        payload = self.take(8 * count)
        arr = np.frombuffer(payload, dtype="<f8").astype(np.float64)
        return name, arr.reshape(dims)


def _parse(data):
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise FormatError("bad magic: not a GAPW checkpoint")
    version = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    cfg_len = r.unpack("<Q")
    config = ModelConfig.from_json(r.take(cfg_len).decode("utf-8"))
    step = r.unpack("<Q")
    n = r.unpack("<Q")
    tensors = {}
    for _ in range(n):
        name, arr = r.record()
        if name in tensors:
            raise FormatError(f"duplicate tensor record: {name}")
        tensors[name] = arr
    opt_state = None
    if r.unpack("<B"):
        n_opt = r.unpack("<Q")
        raw = {}
        for _ in range(n_opt):
            name, arr = r.record()
            raw[name] = arr
        opt_state = {}
        for key, arr in raw.items():
            if not key.startswith("m:"):
                continue
            pname = key[2:]
            try:
                opt_state[pname] = {
                    "m": arr,
                    "v": raw["v:" + pname],
                    "step": int(raw["t:" + pname]),
                }
            except KeyError as e:
                raise FormatError(
                    f"optimizer state incomplete for {pname}: missing "
                    f"{e.args[0]}") from None
    if r.pos != len(data):
        raise FormatError(
            f"{len(data) - r.pos} trailing bytes after checkpoint payload")
    return config, step, tensors, opt_state


def load(path, config=None):
    """Reconstruct a model from a checkpoint file.

    With config=None the embedded config is used. Passing a config
    validates every stored tensor against the freshly built model and
    rejects the file (naming the offending tensor) on any mismatch.
    Returns (model, step, optimizer_state) where optimizer_state is either
    None or a dict consumable by Adam.load_state_dict.
    """
    with open(path, "rb") as f:
        data = f.read()
    stored_config, step, tensors, opt_state = _parse(data)
    model = Model(config if config is not None else stored_config)
    expected = dict(_tensor_records(model))
    for name in expected:
        if name not in tensors:
            raise FormatError(f"checkpoint is missing tensor {name}")
    for name in tensors:
        if name not in expected:
            raise FormatError(f"checkpoint has unexpected tensor {name}")
        if tensors[name].shape != expected[name].shape:
            raise FormatError(
                f"shape mismatch for tensor {name}: checkpoint has "
                f"{tensors[name].shape}, model needs "
                f"{expected[name].shape}")
    for name, arr in expected.items():
        arr[...] = tensors[name]
    return model, step, opt_state
