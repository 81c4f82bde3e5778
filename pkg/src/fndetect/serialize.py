"""T4F1 tensor records and checkpoints.

A T4F1 record is the magic ``b"T4F1"``, four little-endian uint32 dims,
then ``n*c*h*w`` little-endian float32 values in row-major order.

A checkpoint is a text header followed by concatenated T4F1 records::

    FNCK1
    <n_config_lines>
    key=value ...          (GraphConfig)
    <n_tensors>
    name d0,d1,...         (original shape; records are padded to rank 4)
    <blank line>
    T4F1 ... T4F1 ...
"""

import struct

import numpy as np

from .errors import ParseError

MAGIC = b"T4F1"
_HEAD = struct.Struct("<4sIIII")


def _as4(shape):
    shape = tuple(int(s) for s in shape)
    if len(shape) > 4:
        raise ValueError(f"rank {len(shape)} does not fit a T4F1 record")
    return (1,) * (4 - len(shape)) + shape


def encode_tensor(array):
    arr = np.asarray(array)
    dims = _as4(arr.shape)
    body = np.ascontiguousarray(arr, dtype="<f4").reshape(-1).tobytes()
    return _HEAD.pack(MAGIC, *dims) + body


def decode_tensor(buf, offset=0):
    """Returns ``(array (n, c, h, w) float32, next_offset)``."""
    if len(buf) - offset < _HEAD.size:
        raise ParseError("truncated T4F1 header")
    magic, n, c, h, w = _HEAD.unpack_from(buf, offset)
    if magic != MAGIC:
        raise ParseError(f"bad magic {magic!r}")
    count = n * c * h * w
    start = offset + _HEAD.size
    end = start + 4 * count
    if end > len(buf):
        raise ParseError("truncated T4F1 payload")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=start).reshape(n, c, h, w)
    return arr.astype(np.float32), end


def save_tensor(path, array):
    with open(path, "wb") as fh:
        fh.write(encode_tensor(array))


def load_tensor(path):
    with open(path, "rb") as fh:
        arr, _ = decode_tensor(fh.read())
    return arr


def save_checkpoint(path, model):
    entries = [(name, p.data) for name, p in model.named_parameters()]
    for name, bn, attr in model.named_buffers():
        entries.append((name, getattr(bn, attr)))
    cfg_lines = model.cfg.to_text().splitlines()
    header = ["FNCK1", str(len(cfg_lines)), *cfg_lines, str(len(entries))]
    header += [f"{name} {','.join(str(d) for d in np.shape(arr))}" for name, arr in entries]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n\n").encode("utf-8"))
        for _, arr in entries:
            fh.write(encode_tensor(arr))


def read_checkpoint(path):
    """Returns ``(config_text, {name: array})``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    split_at = buf.find(b"\n\n")
    if split_at < 0 or not buf.startswith(b"FNCK1\n"):
        raise ParseError("not a checkpoint file", path)
    lines = buf[:split_at].decode("utf-8").split("\n")
    n_cfg = int(lines[1])
    cfg_text = "\n".join(lines[2 : 2 + n_cfg]) + "\n"
    n_tensors = int(lines[2 + n_cfg])
    index = lines[3 + n_cfg : 3 + n_cfg + n_tensors]
    offset = split_at + 2
    tensors = {}
    for entry in index:
        name, dims = entry.rsplit(" ", 1)
        shape = tuple(int(d) for d in dims.split(",") if d)
        arr, offset = decode_tensor(buf, offset)
        tensors[name] = arr.reshape(shape)
    return cfg_text, tensors


def load_checkpoint(path, seed=0):
    """Rebuild the model recorded in a checkpoint."""
    from .model import Detector, GraphConfig

    cfg_text, tensors = read_checkpoint(path)
    model = Detector(GraphConfig.from_text(cfg_text, path), seed=seed)
    load_state(model, tensors)
    return model


def load_state(model, tensors):
    for name, p in model.named_parameters():
        if name not in tensors:
            raise ParseError(f"checkpoint lacks parameter {name}")
        p.data[...] = tensors[name].reshape(p.shape)
    for name, bn, attr in model.named_buffers():
        if name in tensors:
            setattr(bn, attr, tensors[name].reshape(-1).astype(np.float64))
    return model
