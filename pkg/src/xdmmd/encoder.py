"""Small frozen CNN encoder with hand-written forward and reverse passes.

Tensors are channel-first ``(C, h, w)`` and one sample is processed at a
time, so per-sample results never depend on batch composition or on how
samples are spread across threads.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from xdmmd import netpbm
from xdmmd._parallel import pmap
from xdmmd.embedding import EmbeddingSet
from xdmmd.errors import ArchError, CacheError, FormatError, IoError, LayerError, ShapeError, XdmmdError
from xdmmd.rng import stream

MAGIC = b"DMEX"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class Conv2D:
    """3x3 convolution, stride 1, zero padding 1, with bias."""

    in_channels: int
    out_channels: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool2:
    pass


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


Layer = Union[Conv2D, ReLU, MaxPool2, GlobalAvgPool, Dense]

DEFAULT_ARCH: tuple[Layer, ...] = (
    Conv2D(1, 8), ReLU(), MaxPool2(),
    Conv2D(8, 16), ReLU(), MaxPool2(),
    Conv2D(16, 32), ReLU(),
    GlobalAvgPool(),
    Dense(32, 10),
)  # fmt: skip
DEFAULT_INPUT = (1, 64, 64)


def trace_shapes(layers: Sequence[Layer], input_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    """Output shape of every layer; raises ArchError where shapes do not compose."""
    shape = tuple(input_shape)
    out = []
    for i, layer in enumerate(layers):
        if isinstance(layer, Conv2D):
            if len(shape) != 3 or shape[0] != layer.in_channels:
                raise ArchError(f"layer {i}: Conv2D expects {layer.in_channels} channels, got shape {shape}")
            shape = (layer.out_channels, shape[1], shape[2])
        elif isinstance(layer, ReLU):
            pass
        elif isinstance(layer, MaxPool2):
            if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                raise ArchError(f"layer {i}: MaxPool2 needs even spatial dims, got shape {shape}")
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif isinstance(layer, GlobalAvgPool):
            if len(shape) != 3:
                raise ArchError(f"layer {i}: GlobalAvgPool needs a (C, h, w) input, got {shape}")
            shape = (shape[0],)
        elif isinstance(layer, Dense):
            if shape != (layer.in_features,):
                raise ArchError(f"layer {i}: Dense expects ({layer.in_features},), got {shape}")
            shape = (layer.out_features,)
        else:
            raise ArchError(f"layer {i}: unknown layer type {type(layer).__name__}")
        out.append(shape)
    if shape is None or len(shape) != 1:
        raise ArchError(f"architecture must end in a vector, ends in shape {shape}")
    return out


@dataclass(frozen=True, eq=False)
class EncoderModel:
    layers: tuple[Layer, ...]
    params: tuple[tuple[np.ndarray, ...], ...]
    input_shape: tuple[int, int, int] = DEFAULT_INPUT
    seed: int = 0
    version: int = FORMAT_VERSION
    shapes: tuple[tuple[int, ...], ...] = field(init=False)
    fingerprint: str = field(init=False)

    def __post_init__(self) -> None:
        shapes = trace_shapes(self.layers, self.input_shape)
        if len(self.params) != len(self.layers):
            raise ArchError("one parameter tuple per layer required")
        digest = hashlib.sha256(repr((self.layers, self.input_shape)).encode())
        frozen = []
        for i, (layer, ps) in enumerate(zip(self.layers, self.params)):
            expected = _param_shapes(layer)
            got = tuple(np.shape(p) for p in ps)
            if got != expected:
                raise ArchError(f"layer {i}: parameter shapes {got}, expected {expected}")
            arrs = tuple(np.array(p, dtype=np.float64) for p in ps)
            for a in arrs:
                a.setflags(write=False)
                digest.update(a.tobytes())
            frozen.append(arrs)
        object.__setattr__(self, "params", tuple(frozen))
        object.__setattr__(self, "shapes", tuple(shapes))
        object.__setattr__(self, "fingerprint", digest.hexdigest())

    @property
    def embed_dim(self) -> int:
        return self.shapes[-1][0]

    @property
    def conv_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, Conv2D)]


def _param_shapes(layer: Layer) -> tuple[tuple[int, ...], ...]:
    if isinstance(layer, Conv2D):
        return ((layer.out_channels, layer.in_channels, 3, 3), (layer.out_channels,))
    if isinstance(layer, Dense):
        return ((layer.out_features, layer.in_features), (layer.out_features,))
    return ()


def build_random(seed: int, arch: Sequence[Layer] = DEFAULT_ARCH, input_shape=DEFAULT_INPUT) -> EncoderModel:
    """Weights ~ U(-sqrt(6/fan_in), sqrt(6/fan_in)) from ``stream(seed, layer)``; zero biases."""
    trace_shapes(arch, input_shape)
    params = []
    for i, layer in enumerate(arch):
        shapes = _param_shapes(layer)
        if not shapes:
            params.append(())
            continue
        w_shape, b_shape = shapes
        fan_in = int(np.prod(w_shape[1:]))
        bound = math.sqrt(6.0 / fan_in)
        w = stream(seed, i).uniform(-bound, bound, size=w_shape)
        params.append((w, np.zeros(b_shape)))
    return EncoderModel(tuple(arch), tuple(params), tuple(input_shape), seed)


def zero_model(arch: Sequence[Layer] = DEFAULT_ARCH, input_shape=DEFAULT_INPUT) -> EncoderModel:
    params = [tuple(np.zeros(s) for s in _param_shapes(layer)) for layer in arch]
    return EncoderModel(tuple(arch), tuple(params), tuple(input_shape))


# --- layer kernels ----------------------------------------------------------


def _im2col(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    cols = np.stack([xp[:, di : di + h, dj : dj + w] for di in range(3) for dj in range(3)], axis=1)
    return cols.reshape(c * 9, h * w)


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    c, h, wd = x.shape
    out = w.reshape(w.shape[0], -1) @ _im2col(x) + b[:, None]
    return out.reshape(w.shape[0], h, wd)


def _conv_backward_input(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    o, c = w.shape[:2]
    _, h, wd = g.shape
    dcols = (w.reshape(o, c * 9).T @ g.reshape(o, h * wd)).reshape(c, 9, h, wd)
    dxp = np.zeros((c, h + 2, wd + 2))
    for k in range(9):
        di, dj = divmod(k, 3)
        dxp[:, di : di + h, dj : dj + wd] += dcols[:, k]
    return dxp[:, 1:-1, 1:-1]


def _pool_windows(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    # (C, h/2, w/2, 4) with window entries in row-major scan order
    return x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)


def _pool_backward(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    win = np.argmax(_pool_windows(x), axis=-1)  # first maximum wins ties
    dwin = np.zeros((c, h // 2, w // 2, 4))
    np.put_along_axis(dwin, win[..., None], g[..., None], axis=-1)
    return dwin.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w)


def _apply(layer: Layer, params: tuple[np.ndarray, ...], x: np.ndarray) -> np.ndarray:
    if isinstance(layer, Conv2D):
        return _conv_forward(x, *params)
    if isinstance(layer, ReLU):
        return np.maximum(x, 0.0)
    if isinstance(layer, MaxPool2):
        return _pool_windows(x).max(axis=-1)
    if isinstance(layer, GlobalAvgPool):
        return x.mean(axis=(1, 2))
    if isinstance(layer, Dense):
        w, b = params
        return w @ x + b
    raise ArchError(f"unknown layer type {type(layer).__name__}")


def _backprop(layer: Layer, params: tuple[np.ndarray, ...], x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the layer input ``x`` given gradient ``g`` w.r.t. its output."""
    if isinstance(layer, Conv2D):
        return _conv_backward_input(g, params[0])
    if isinstance(layer, ReLU):
        return np.where(x > 0.0, g, 0.0)
    if isinstance(layer, MaxPool2):
        return _pool_backward(g, x)
    if isinstance(layer, GlobalAvgPool):
        c, h, w = x.shape
        return np.broadcast_to((g / (h * w))[:, None, None], x.shape).copy()
    if isinstance(layer, Dense):
        return params[0].T @ g
    raise ArchError(f"unknown layer type {type(layer).__name__}")


# --- forward / backward -----------------------------------------------------


@dataclass(frozen=True, eq=False)
class ActivationCache:
    """Input plus every layer output from one forward pass of one sample."""

    fingerprint: str
    input: np.ndarray
    outputs: tuple[np.ndarray, ...]


def _as_input(model: EncoderModel, image) -> np.ndarray:
    pixels = getattr(image, "pixels", image)
    x = np.asarray(pixels, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.shape != model.input_shape:
        raise ShapeError(f"input shape {x.shape} does not match encoder input {model.input_shape}")
    return x


def forward(model: EncoderModel, image, keep_cache: bool = False):
    """Embed one image; returns ``(embedding, cache_or_None)``."""
    x = _as_input(model, image)
    outputs = []
    h = x
    for layer, ps in zip(model.layers, model.params):
        h = _apply(layer, ps, h)
        outputs.append(h)
    cache = ActivationCache(model.fingerprint, x, tuple(outputs)) if keep_cache else None
    return outputs[-1].copy(), cache


def forward_from(model: EncoderModel, position: int, activation: np.ndarray) -> np.ndarray:
    """Run the layers after ``position`` starting from that layer's output."""
    h = np.asarray(activation, dtype=np.float64)
    if h.shape != model.shapes[position]:
        raise ShapeError(f"activation shape {h.shape} does not match layer {position} output {model.shapes[position]}")
    for layer, ps in zip(model.layers[position + 1 :], model.params[position + 1 :]):
        h = _apply(layer, ps, h)
    return h


def activation_position(model: EncoderModel, layer_index: int) -> int:
    """Index of the layer whose output is conv ``layer_index``'s post-activation map."""
    if not 0 <= layer_index < len(model.layers) or not isinstance(model.layers[layer_index], Conv2D):
        raise LayerError(f"layer {layer_index} is not a convolutional layer (conv layers: {model.conv_indices})")
    nxt = layer_index + 1
    if nxt < len(model.layers) and isinstance(model.layers[nxt], ReLU):
        return nxt
    return layer_index


def resolve_layer(model: EncoderModel, selector: str | int) -> int:
    """Map ``"final"``, ``"penultimate"`` or an integer to a conv layer index."""
    convs = model.conv_indices
    if selector == "final":
        return convs[-1]
    if selector == "penultimate":
        if len(convs) < 2:
            raise LayerError("model has a single convolutional layer; no penultimate layer")
        return convs[-2]
    try:
        idx = int(selector)
    except (TypeError, ValueError):
        raise LayerError(f"unknown layer selector {selector!r}") from None
    activation_position(model, idx)
    return idx


def backward_to_layer(model: EncoderModel, cache: ActivationCache, grad_embedding, layer_index: int) -> np.ndarray:
    """Gradient of ``grad_embedding . embedding`` w.r.t. the post-activation
    maps of conv layer ``layer_index``, shape ``(C, h, w)``."""
    target = activation_position(model, layer_index)
    if cache.fingerprint != model.fingerprint:
        raise CacheError("activation cache was produced by a different model")
    if len(cache.outputs) != len(model.layers) or any(
        o.shape != s for o, s in zip(cache.outputs, model.shapes)
    ):
        raise CacheError("activation cache shapes do not match the model")
    g = np.asarray(grad_embedding, dtype=np.float64)
    if g.shape != (model.embed_dim,):
        raise ShapeError(f"grad_embedding shape {g.shape}, expected ({model.embed_dim},)")
    for i in range(len(model.layers) - 1, target, -1):
        g = _backprop(model.layers[i], model.params[i], cache.outputs[i - 1], g)
    return g


# --- datasets ---------------------------------------------------------------


def embed_images(
    model: EncoderModel,
    images: Sequence,
    ids: Sequence[str],
    groups: Sequence[str],
    subgroups: Sequence[str],
    threads: int = 1,
) -> EmbeddingSet:
    vecs = pmap(lambda im: forward(model, im)[0], images, threads)
    return EmbeddingSet(
        ids=tuple(ids),
        groups=tuple(groups),
        subgroups=tuple(subgroups),
        vectors=np.array(vecs).reshape(len(vecs), model.embed_dim),
        dim=model.embed_dim,
    )


def load_image(path: str | Path, sample_id: str = "") -> np.ndarray:
    try:
        return netpbm.read_pgm(path).astype(np.float64) / 255.0
    except XdmmdError as exc:
        raise IoError(f"cannot load image for id {sample_id!r}: {exc}") from exc


def embed_dataset(model: EncoderModel, manifest, base_dir: str | Path = ".", threads: int = 1) -> EmbeddingSet:
    """One embedding row per manifest entry, in manifest order."""
    base = Path(base_dir)
    entries = list(manifest.entries)
    images = [load_image(base / e.path, e.id) for e in entries]
    return embed_images(
        model,
        images,
        [e.id for e in entries],
        [e.group for e in entries],
        [e.subgroup for e in entries],
        threads,
    )


# --- model files ------------------------------------------------------------

_CODES = {Conv2D: 1, ReLU: 2, MaxPool2: 3, GlobalAvgPool: 4, Dense: 5}


def _layer_args(layer: Layer) -> tuple[int, int]:
    if isinstance(layer, Conv2D):
        return layer.in_channels, layer.out_channels
    if isinstance(layer, Dense):
        return layer.in_features, layer.out_features
    return 0, 0


def save_model(model: EncoderModel, path: str | Path) -> None:
    """``DMEX`` | u32 version | u32 C,H,W | i64 seed | u32 #layers |
    per layer (u8 code, u32 a, u32 b) | f64 weights then bias per
    parametrized layer, all little-endian."""
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", model.version)
    buf += struct.pack("<3I", *model.input_shape)
    buf += struct.pack("<q", model.seed)
    buf += struct.pack("<I", len(model.layers))
    for layer in model.layers:
        buf += struct.pack("<BII", _CODES[type(layer)], *_layer_args(layer))
    for ps in model.params:
        for p in ps:
            buf += np.ascontiguousarray(p, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated model file: needed {n} bytes at offset {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_model(path: str | Path) -> EncoderModel:
    try:
        r = _Reader(Path(path).read_bytes())
    except OSError as exc:
        raise IoError(f"cannot read model {path}: {exc}") from exc
    magic = r.take(4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported model format version {version} (this build reads version {FORMAT_VERSION})")
    input_shape = r.unpack("<3I")
    (seed,) = r.unpack("<q")
    (count,) = r.unpack("<I")
    by_code = {v: k for k, v in _CODES.items()}
    layers: list[Layer] = []
    for _ in range(count):
        code, a, b = r.unpack("<BII")
        cls = by_code.get(code)
        if cls is None:
            raise FormatError(f"unknown layer code {code}")
        layers.append(cls(a, b) if cls in (Conv2D, Dense) else cls())
    try:
        trace_shapes(layers, input_shape)
    except ArchError as exc:
        raise FormatError(f"invalid architecture block: {exc}") from exc
    params = []
    for layer in layers:
        ps = []
        for shape in _param_shapes(layer):
            size = int(np.prod(shape))
            ps.append(np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape))
        params.append(tuple(ps))
    if r.pos != len(r.data):
        raise FormatError(f"{len(r.data) - r.pos} trailing bytes after weights")
    return EncoderModel(tuple(layers), tuple(params), tuple(input_shape), seed, version)
