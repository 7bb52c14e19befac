"""NNQ1 binary checkpoints.

Layout (little-endian):
  b"NNQ1" | u32 version | u32 n | n bytes JSON descriptor
  | u32 tensor count | per tensor: u16 name length, name, u8 ndim, u32 dims..., f64 data
"""

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataFormatError
from .nn.model import Model
from .quantize import SAWBCoefficients, WeightQuantizer

MAGIC = b"NNQ1"
VERSION = 1


def _descriptor(model):
    desc = model.descriptor()
    wq = {}
    for layer, q in sorted(model.weight_quant.items()):
        coeffs = None if q.coeffs is None else {"c1": q.coeffs.c1, "c2": q.coeffs.c2,
                                                "provenance": q.coeffs.provenance}
        wq[str(layer)] = {"bits": [int(b) for b in q.bits], "coeffs": coeffs}
    desc["weight_quant"] = wq
    desc["act_bits"] = {str(l): [int(b) for b in bits] for l, bits in sorted(model.act_bits.items())}
    return desc


def dumps(model, extra=None):
    desc = _descriptor(model)
    if extra:
        desc["extra"] = extra
    blob = json.dumps(desc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob]
    layout = model.param_layout()
    out.append(struct.pack("<I", len(layout)))
    for layer, name, shape, _ in layout:
        key = f"{layer}.{name}".encode("utf-8")
        out.append(struct.pack("<H", len(key)) + key)
        out.append(struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape))
        out.append(np.ascontiguousarray(model.params[layer][name], dtype="<f8").tobytes())
    return b"".join(out)


def loads(raw):
    """Parse checkpoint bytes. Returns (model, extra dict)."""
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(raw):
            raise DataFormatError(f"truncated checkpoint while reading {what}", offset=pos)
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise DataFormatError("not an NNQ1 checkpoint", offset=0)
    version, n = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}", offset=4)
    desc = json.loads(take(n, "descriptor").decode("utf-8"))
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    params = {}
    for _ in range(count):
        (klen,) = struct.unpack("<H", take(2, "name length"))
        layer, name = take(klen, "name").decode("utf-8").split(".", 1)
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        size = int(np.prod(shape))
        data = np.frombuffer(take(8 * size, "tensor data"), dtype="<f8").astype(np.float64)
        params.setdefault(int(layer), {})[name] = data.reshape(shape)
    if pos != len(raw):
        raise DataFormatError("trailing bytes after checkpoint", offset=pos)
    model = Model.from_descriptor(desc, params)
    for layer, q in desc.get("weight_quant", {}).items():
        c = q["coeffs"]
        coeffs = None if c is None else SAWBCoefficients(c["c1"], c["c2"], c.get("provenance", {}))
        model.weight_quant[int(layer)] = WeightQuantizer(np.array(q["bits"], dtype=np.int64), coeffs)
    for layer, bits in desc.get("act_bits", {}).items():
        model.act_bits[int(layer)] = np.array(bits, dtype=np.int64)
    model.touch()
    return model, desc.get("extra", {})


def save(model, path, extra=None):
    Path(path).write_bytes(dumps(model, extra))


def load(path):
    return loads(Path(path).read_bytes())
