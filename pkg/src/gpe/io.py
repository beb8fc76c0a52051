"""Binary model container ``3DGPE1``.

Layout (little-endian)::

    magic  b"3DGPE1\\0\\0"
    i32 N_G, i32 K, i32 tnet_flag          (N_G == -1 marks a PointNet teacher)
    f64 means[N_G*3], chol[N_G*6], alpha[N_G*K], bias[K]
    [tnet_flag] Gaussian block (same header with tnet_flag 0) + MLP stack
    i32 head_flag, [head_flag] MLP stack

An MLP stack is ``i32 tag=STACK_MLP, i32 n_layers`` then per layer
``i32 out, i32 in, i32 activation`` followed by the weight (row-major) and
bias. A teacher file holds ``i32 n_stacks`` and that many MLP stacks.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .encoder import GPEClassifier, GaussianEncoder, TNet
from .errors import FormatError
from .mlp import MLP, Layer
from .pointnet import PointNetModel

MAGIC = b"3DGPE1\x00\x00"
TEACHER_KIND = -1
STACK_GAUSSIAN = 1
STACK_MLP = 2
_ACT_CODES = {"relu": 0, "none": 1}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


class _Reader:
    def __init__(self, data):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file: wanted {n} bytes at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def i32(self):
        return struct.unpack("<i", self.take(4))[0]

    def f64(self, *shape):
        n = int(np.prod(shape))
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(float).reshape(shape)


def _w_i32(buf, *vals):
    buf.write(struct.pack(f"<{len(vals)}i", *vals))


def _w_f64(buf, arr):
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _write_gaussians(buf, enc: GaussianEncoder, tnet_flag):
    _w_i32(buf, enc.n_gaussians, enc.n_volumes, tnet_flag)
    for a in (enc.means, enc.chol, enc.alpha, enc.bias):
        _w_f64(buf, a)


def _read_gaussians(r: _Reader, n_g, k):
    if n_g < 1 or k < 1:
        raise FormatError(f"invalid Gaussian block sizes N_G={n_g}, K={k}")
    means, chol, alpha, bias = r.f64(n_g, 3), r.f64(n_g, 6), r.f64(n_g, k), r.f64(k)
    return GaussianEncoder(means, chol, alpha, bias)


def _write_mlp(buf, mlp: MLP):
    _w_i32(buf, STACK_MLP, len(mlp.layers))
    for layer in mlp.layers:
        out, inp = layer.weight.shape
        _w_i32(buf, out, inp, _ACT_CODES[layer.activation])
        _w_f64(buf, layer.weight)
        _w_f64(buf, layer.bias)


def _read_mlp(r: _Reader):
    tag = r.i32()
    if tag != STACK_MLP:
        raise FormatError(f"expected MLP stack tag {STACK_MLP}, found {tag}")
    n = r.i32()
    if n < 1:
        raise FormatError("MLP stack without layers")
    layers = []
    for _ in range(n):
        out, inp, act = r.i32(), r.i32(), r.i32()
        if out < 1 or inp < 1 or act not in _ACT_NAMES:
            raise FormatError(f"invalid layer header ({out}, {inp}, {act})")
        layers.append(Layer(r.f64(out, inp), r.f64(out), _ACT_NAMES[act]))
    return MLP(layers)


def dumps(model) -> bytes:
    """Serialize a GaussianEncoder, GPEClassifier or PointNetModel."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    if isinstance(model, PointNetModel):
        _w_i32(buf, TEACHER_KIND, len(model.stacks()))
        for s in model.stacks():
            _write_mlp(buf, s)
        return buf.getvalue()
    if isinstance(model, GaussianEncoder):
        model = GPEClassifier(model, None, None)
    if not isinstance(model, GPEClassifier):
        raise TypeError(f"cannot serialize {type(model).__name__}")
    _write_gaussians(buf, model.encoder, int(model.tnet is not None))
    if model.tnet is not None:
        _write_gaussians(buf, model.tnet.encoder, 0)
        _write_mlp(buf, model.tnet.regressor)
    _w_i32(buf, int(model.head is not None))
    if model.head is not None:
        _write_mlp(buf, model.head)
    return buf.getvalue()


def loads(data: bytes):
    """Inverse of :func:`dumps`; a bare encoder comes back as GaussianEncoder."""
    r = _Reader(data)
    if bytes(r.take(len(MAGIC))) != MAGIC:
        raise FormatError("not a 3DGPE1 file (bad magic)")
    first = r.i32()
    if first == TEACHER_KIND:
        n = r.i32()
        if n != 4:
            raise FormatError(f"teacher file must hold 4 stacks, found {n}")
        model = PointNetModel(*(_read_mlp(r) for _ in range(n)))
    else:
        k, tnet_flag = r.i32(), r.i32()
        if tnet_flag not in (0, 1):
            raise FormatError(f"invalid tnet_flag {tnet_flag}")
        enc = _read_gaussians(r, first, k)
        tnet = None
        if tnet_flag:
            tn_g, tk, nested = r.i32(), r.i32(), r.i32()
            if nested != 0:
                raise FormatError("nested T-Net blocks are not supported")
            tnet = TNet(_read_gaussians(r, tn_g, tk), _read_mlp(r))
        head_flag = r.i32()
        if head_flag not in (0, 1):
            raise FormatError(f"invalid head flag {head_flag}")
        head = _read_mlp(r) if head_flag else None
        model = enc if tnet is None and head is None else GPEClassifier(enc, tnet, head)
    if r.pos != len(r.data):
        raise FormatError(f"{len(r.data) - r.pos} trailing bytes")
    return model


def save_model(model, path):
    with open(path, "wb") as f:
        f.write(dumps(model))


def load_model(path):
    with open(path, "rb") as f:
        return loads(f.read())
