"""Declarative network specs, parameter sets, forward/backward and checkpoints."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import array as A
from . import layers as L
from .array import Array


class ShapeError(ValueError):
    """Input or layer shapes are incompatible."""

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message if layer is None else f"layer {layer}: {message}")
        self.layer = layer


class GradError(RuntimeError):
    pass


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(i) for i in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 values, got {v!r}")
    return t


@dataclass
class NetworkSpec:
    """Ordered layer descriptors plus the per-sample input shape.

    Layer descriptors are plain dicts with a ``type`` key; see ``LAYER_TYPES``.
    """

    input_shape: tuple[int, ...]
    layers: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {"input_shape": list(self.input_shape), "layers": self.layers},
            sort_keys=True,
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, text: str) -> NetworkSpec:
        d = json.loads(text)
        return cls(tuple(d["input_shape"]), d["layers"])

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-sample output shape of every layer (shape inference only)."""
        shape = tuple(self.input_shape)
        out = []
        for i, layer in enumerate(self.layers):
            shape = _infer(layer, shape, i)
            out.append(shape)
        return out

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes()[-1] if self.layers else tuple(self.input_shape)


LAYER_TYPES = (
    "conv", "bn", "relu", "sigmoid", "linear", "flatten", "gap", "upsample",
    "residual", "dense_block", "transition",
)


def _conv_extent(shape, kernel, stride, pad, i):
    ext = tuple((n + 2 * p - k) // s + 1 for n, k, s, p in zip(shape, kernel, stride, pad))
    if min(ext) < 1:
        raise ShapeError(f"convolution collapses extent {shape}", i)
    return ext


def _transition_stride(shape, stride):
    # never halve an axis that has already shrunk to one voxel
    return tuple(s if n >= s else 1 for n, s in zip(shape, _triple(stride)))


def _infer(layer: dict, shape: tuple[int, ...], i: int) -> tuple[int, ...]:
    kind = layer["type"]
    if kind not in LAYER_TYPES:
        raise ShapeError(f"unknown layer type {kind!r}", i)
    spatial = len(shape) == 4
    if kind in ("conv", "residual", "dense_block", "transition", "upsample", "gap") and not spatial:
        raise ShapeError(f"{kind} needs a (C, X, Y, Z) input, got {shape}", i)
    if kind == "conv":
        k, s, p = _triple(layer["kernel"]), _triple(layer.get("stride", 1)), _triple(layer.get("pad", 0))
        return (layer["out"],) + _conv_extent(shape[1:], k, s, p, i)
    if kind in ("bn", "relu", "sigmoid", "residual"):
        return shape
    if kind == "linear":
        if len(shape) != 1:
            raise ShapeError(f"linear needs a flat input, got {shape}", i)
        return (layer["out"],)
    if kind == "flatten":
        return (int(np.prod(shape)),)
    if kind == "gap":
        return (shape[0],)
    if kind == "upsample":
        return (shape[0],) + tuple(n * f for n, f in zip(shape[1:], _triple(layer["factor"])))
    if kind == "dense_block":
        return (shape[0] + layer["layers"] * layer["growth"],) + shape[1:]
    if kind == "transition":
        s = _transition_stride(shape[1:], layer.get("stride", 2))
        return (max(1, int(shape[0] * layer["compression"])),) + tuple(n // t for n, t in zip(shape[1:], s))
    raise ShapeError(f"unhandled layer {kind!r}", i)


# -- parameters -------------------------------------------------------------------


class ParameterSet:
    """Named trainable arrays plus non-trainable buffers (normalisation statistics)."""

    def __init__(self, params: Mapping[str, Array] | None = None, buffers: Mapping[str, np.ndarray] | None = None,
                 training: bool = True):
        self.params: dict[str, Array] = dict(params or {})
        self.buffers: dict[str, np.ndarray] = dict(buffers or {})
        self.training = training

    def __getitem__(self, name: str) -> Array:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def arrays(self) -> list[Array]:
        return list(self.params.values())

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        self.params[name] = Array(value, requires_grad=True, name=name)

    def add_buffer(self, name: str, value: np.ndarray) -> None:
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        self.buffers[name] = value

    def copy(self) -> ParameterSet:
        return ParameterSet(
            {k: Array(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            self.training,
        )

    def with_params(self, params: Mapping[str, Array]) -> ParameterSet:
        """Same buffers, substituted (possibly non-leaf) parameter arrays."""
        out = ParameterSet(params, None, self.training)
        out.buffers = self.buffers
        return out

    def astype(self, dtype) -> ParameterSet:
        return ParameterSet(
            {k: Array(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
            self.training,
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([v.data.ravel() for v in self.params.values()]) if self.params else np.zeros(0)

    def equals(self, other: ParameterSet) -> bool:
        if self.names() != other.names() or set(self.buffers) != set(other.buffers):
            return False
        return all(np.array_equal(self.params[k].data, other.params[k].data) for k in self.params) and all(
            np.array_equal(self.buffers[k], other.buffers[k]) for k in self.buffers
        )


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_params(spec: NetworkSpec, seed: int | np.random.Generator = 0, dtype=np.float32) -> ParameterSet:
    """Fan-in scaled uniform weights, zero biases, unit/zero normalisation affine."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ps = ParameterSet()
    shape = tuple(spec.input_shape)

    def conv_params(prefix, cin, cout, kernel, bias):
        fan_in = cin * int(np.prod(kernel))
        ps.add(f"{prefix}.weight", _uniform(rng, (cout, cin) + tuple(kernel), fan_in, dtype))
        if bias:
            ps.add(f"{prefix}.bias", np.zeros(cout, dtype))

    def bn_params(prefix, c):
        ps.add(f"{prefix}.gamma", np.ones(c, dtype))
        ps.add(f"{prefix}.beta", np.zeros(c, dtype))
        ps.add_buffer(f"{prefix}.running_mean", np.zeros(c, dtype))
        ps.add_buffer(f"{prefix}.running_var", np.ones(c, dtype))

    for i, layer in enumerate(spec.layers):
        kind = layer["type"]
        p = f"{i}.{kind}"
        if kind == "conv":
            conv_params(p, shape[0], layer["out"], _triple(layer["kernel"]), layer.get("bias", True))
        elif kind == "bn":
            bn_params(p, shape[0])
        elif kind == "linear":
            ps.add(f"{p}.weight", _uniform(rng, (layer["out"], shape[0]), shape[0], dtype))
            if layer.get("bias", True):
                ps.add(f"{p}.bias", np.zeros(layer["out"], dtype))
        elif kind == "residual":
            c = shape[0]
            for j in (1, 2):
                conv_params(f"{p}.conv{j}", c, c, (3, 3, 3), False)
                bn_params(f"{p}.bn{j}", c)
        elif kind == "dense_block":
            c = shape[0]
            for j in range(layer["layers"]):
                bn_params(f"{p}.{j}.bn", c)
                conv_params(f"{p}.{j}.conv", c, layer["growth"], (3, 3, 3), False)
                c += layer["growth"]
        elif kind == "transition":
            s = _transition_stride(shape[1:], layer.get("stride", 2))
            bn_params(f"{p}.bn", shape[0])
            conv_params(f"{p}.conv", shape[0], max(1, int(shape[0] * layer["compression"])), s, False)
        shape = _infer(layer, shape, i)
    return ps


# -- forward ----------------------------------------------------------------------


def _bn(ps: ParameterSet, prefix: str, x: Array, training: bool, update_stats: bool) -> Array:
    return L.batch_norm(
        x, ps[f"{prefix}.gamma"], ps[f"{prefix}.beta"],
        ps.buffers[f"{prefix}.running_mean"], ps.buffers[f"{prefix}.running_var"],
        training, update_stats,
    )


def _apply(layer: dict, i: int, ps: ParameterSet, x: Array, shape, training: bool, update_stats: bool) -> Array:
    kind = layer["type"]
    p = f"{i}.{kind}"
    if kind == "conv":
        return L.conv(x, ps[f"{p}.weight"], ps.params.get(f"{p}.bias"), _triple(layer.get("stride", 1)),
                      _triple(layer.get("pad", 0)))
    if kind == "bn":
        return _bn(ps, p, x, training, update_stats)
    if kind == "relu":
        return A.relu(x)
    if kind == "sigmoid":
        return A.sigmoid(x)
    if kind == "linear":
        return L.linear(x, ps[f"{p}.weight"], ps.params.get(f"{p}.bias"))
    if kind == "flatten":
        return A.reshape(x, (x.shape[0], -1))
    if kind == "gap":
        return L.global_avg_pool(x)
    if kind == "upsample":
        return L.upsample(x, _triple(layer["factor"]))
    if kind == "residual":
        h = A.relu(_bn(ps, f"{p}.bn1", A.conv3d(x, ps[f"{p}.conv1.weight"], (1, 1, 1), (1, 1, 1)),
                       training, update_stats))
        h = _bn(ps, f"{p}.bn2", A.conv3d(h, ps[f"{p}.conv2.weight"], (1, 1, 1), (1, 1, 1)), training, update_stats)
        return A.relu(h + x)
    if kind == "dense_block":
        for j in range(layer["layers"]):
            h = A.relu(_bn(ps, f"{p}.{j}.bn", x, training, update_stats))
            h = A.conv3d(h, ps[f"{p}.{j}.conv.weight"], (1, 1, 1), (1, 1, 1))
            x = A.concat([x, h], axis=1)
        return x
    if kind == "transition":
        s = _transition_stride(shape[1:], layer.get("stride", 2))
        h = A.relu(_bn(ps, f"{p}.bn", x, training, update_stats))
        return A.conv3d(h, ps[f"{p}.conv.weight"], s, (0, 0, 0))
    raise ShapeError(f"unknown layer type {kind!r}", i)


def forward(
    spec: NetworkSpec,
    params: ParameterSet,
    x,
    training: bool | None = None,
    update_stats: bool = True,
    features: bool = False,
):
    """Run ``x`` (batch-first) through the network.

    ``training`` defaults to ``params.training``. With ``features=True`` the
    per-layer outputs are returned alongside the final output.
    """
    x = A.as_array(x)
    if tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise ShapeError(f"input shape {x.shape[1:]} != declared {tuple(spec.input_shape)}", 0)
    training = params.training if training is None else training
    shape = tuple(spec.input_shape)
    outs = []
    for i, layer in enumerate(spec.layers):
        try:
            x = _apply(layer, i, params, x, shape, training, update_stats)
        except ShapeError:
            raise
        except (ValueError, KeyError) as exc:
            raise ShapeError(str(exc), i) from exc
        shape = tuple(x.shape[1:])
        outs.append(x)
    return (x, outs) if features else x


def backward(loss: Array, params: ParameterSet, create_graph: bool = False) -> dict[str, Array]:
    """Gradient of a scalar ``loss`` with respect to every parameter."""
    if not loss.requires_grad:
        raise GradError("backward called without a recorded forward pass")
    names = params.names()
    grads = A.grad(loss, [params[n] for n in names], create_graph=create_graph)
    return dict(zip(names, grads))


# -- checkpoints --------------------------------------------------------------------

MAGIC = b"BVCKPT\x00\x01"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, spec: NetworkSpec | dict | None, params: ParameterSet) -> None:
    """Little-endian float32 blobs, JSON spec header and trailing CRC32."""
    if isinstance(spec, NetworkSpec):
        spec_text = spec.to_json()
    else:
        spec_text = json.dumps(spec, sort_keys=True, separators=(",", ":"))
    body = bytearray()
    body += MAGIC
    body += struct.pack("<I", FORMAT_VERSION)
    enc = spec_text.encode()
    body += struct.pack("<I", len(enc)) + enc
    body += struct.pack("<B", 1 if params.training else 0)
    entries = [(0, k, v.data) for k, v in params.params.items()] + [(1, k, v) for k, v in params.buffers.items()]
    body += struct.pack("<I", len(entries))
    for kind, name, value in entries:
        nb = name.encode()
        body += struct.pack("<BH", kind, len(nb)) + nb
        body += struct.pack("<B", value.ndim) + struct.pack(f"<{value.ndim}I", *value.shape)
        body += np.ascontiguousarray(value, dtype="<f4").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(body))


def load_checkpoint(path) -> tuple[NetworkSpec | dict | None, ParameterSet]:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (n,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    spec_obj = json.loads(raw[pos: pos + n].decode())
    pos += n
    (training,) = struct.unpack_from("<B", raw, pos)
    pos += 1
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    ps = ParameterSet(training=bool(training))
    for _ in range(count):
        kind, nlen = struct.unpack_from("<BH", raw, pos)
        pos += 3
        name = raw[pos: pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        value = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).astype(np.float32).reshape(shape)
        pos += 4 * size
        if kind == 0:
            ps.add(name, value)
        else:
            ps.add_buffer(name, value)
    spec: NetworkSpec | dict | None
    if isinstance(spec_obj, dict) and "input_shape" in spec_obj and "layers" in spec_obj:
        spec = NetworkSpec(tuple(spec_obj["input_shape"]), spec_obj["layers"])
    else:
        spec = spec_obj
    return spec, ps
