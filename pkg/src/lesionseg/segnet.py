"""Cascaded U-shaped encoder-decoder producing a foreground probability map.

One stage is ``depth`` encoder blocks (conv3x3+relu, conv3x3+relu,
maxpool2x2), a conv3x3 bottleneck, and ``depth`` decoder blocks that
nearest-upsample, concatenate the matching encoder output and fuse with a
conv3x3+relu.  A 1x1 head and a sigmoid give the probability map.  With
``cascade`` on, a second stage sees the image concatenated with the first
stage's map and its output is the model output.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import DimensionError, FormatError
from .tensor import DiffTensor

MAGIC = b"SEGN"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 8
    depth: int = 3
    cascade: bool = True
    in_channels: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.base_channels < 1 or self.depth < 1 or self.in_channels < 1:
            raise ValueError(f"invalid model config: {self}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")

    def widths(self) -> list[int]:
        """Channel count at each encoder level.

        Every level keeps ``base_channels``: at desk scale the full-resolution
        convolutions dominate the cost, and doubling widths with depth bought
        no accuracy on the synthetic task while nearly doubling step time.
        """
        return [self.base_channels] * self.depth


def _stage_layers(prefix: str, in_ch: int, widths: list[int]) -> list[tuple[str, tuple[int, int, int, int]]]:
    """(name, weight shape) for every conv in one U-shaped stage, in init order."""
    layers = []
    prev = in_ch
    for d, c in enumerate(widths):
        layers.append((f"{prefix}.enc{d}.conv1", (c, prev, 3, 3)))
        layers.append((f"{prefix}.enc{d}.conv2", (c, c, 3, 3)))
        prev = c
    layers.append((f"{prefix}.bottleneck", (prev, prev, 3, 3)))
    for d in reversed(range(len(widths))):
        c = widths[d]
        layers.append((f"{prefix}.dec{d}.fuse", (c, prev + c, 3, 3)))
        prev = c
    layers.append((f"{prefix}.head", (1, prev, 1, 1)))
    return layers


def layer_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, int, int, int]]]:
    widths = config.widths()
    shapes = _stage_layers("stage1", config.in_channels, widths)
    if config.cascade:
        shapes += _stage_layers("stage2", config.in_channels + 1, widths)
    return shapes


class Model:
    """Parameters plus the forward pass.  Parameter order is fixed by the config."""

    def __init__(self, config: ModelConfig, params: "OrderedDict[str, DiffTensor]"):
        self.config = config
        self.params = params

    @property
    def parameters(self) -> list[DiffTensor]:
        return list(self.params.values())

    def param_count(self) -> int:
        return int(np.sum([p.data.size for p in self.params.values()]))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def _conv(self, x: DiffTensor, name: str, relu: bool = True) -> DiffTensor:
        w = self.params[name + ".weight"]
        pad = w.shape[-1] // 2
        y = T.conv2d(x, w, self.params[name + ".bias"], stride=1, padding=pad)
        return T.relu(y) if relu else y

    def _stage(self, prefix: str, x: DiffTensor) -> DiffTensor:
        skips = []
        for d in range(self.config.depth):
            x = self._conv(x, f"{prefix}.enc{d}.conv1")
            x = self._conv(x, f"{prefix}.enc{d}.conv2")
            skips.append(x)
            x = T.maxpool2x2(x)
        x = self._conv(x, f"{prefix}.bottleneck")
        for d in reversed(range(self.config.depth)):
            x = self._conv(T.concat([T.upsample_nearest_x2(x), skips[d]]), f"{prefix}.dec{d}.fuse")
        return T.sigmoid(self._conv(x, f"{prefix}.head", relu=False))

    def forward(self, image: DiffTensor) -> DiffTensor:
        image = image if isinstance(image, DiffTensor) else DiffTensor(image)
        _, c, h, w = image.shape
        if c != self.config.in_channels:
            raise DimensionError(f"model expects {self.config.in_channels} input channels (axis C), got {c}")
        step = 2**self.config.depth
        if h % step or w % step:
            raise DimensionError(f"image H={h}, W={w} must be divisible by 2**depth={step}")
        prob = self._stage("stage1", image)
        if self.config.cascade:
            prob = self._stage("stage2", T.concat([image, prob]))
        return prob

    __call__ = forward

    def predict(self, images: np.ndarray) -> np.ndarray:
        """Probability maps for an ``(N, C, H, W)`` array, without gradient tracking."""
        frozen = Model(self.config, OrderedDict((k, v.detach()) for k, v in self.params.items()))
        return frozen.forward(DiffTensor(images)).data

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())


def init_model(config: ModelConfig) -> Model:
    """He-normal weights (fan-in scaling) and zero biases, drawn from ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    params: OrderedDict[str, DiffTensor] = OrderedDict()
    for name, shape in layer_shapes(config):
        fan_in = shape[1] * shape[2] * shape[3]
        w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        params[name + ".weight"] = DiffTensor.param(w)
        params[name + ".bias"] = DiffTensor.param(np.zeros((1, shape[0], 1, 1)))
    return Model(config, params)


# ---------------------------------------------------------------------------
# Checkpoint I/O
#
# Little-endian layout:
#   b"SEGN" | u32 version
#   config: u32 base_channels | u32 depth | u8 cascade | u32 in_channels | u64 seed
#   u32 n_records, then per record:
#     u32 name_len | name (utf-8) | u32 ndim | u32 dims[ndim] | f64 values[prod(dims)]

_CONFIG = struct.Struct("<IIBIQ")


def save_model(model: Model, path) -> None:
    cfg = model.config
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    chunks.append(_CONFIG.pack(cfg.base_channels, cfg.depth, int(cfg.cascade), cfg.in_channels, cfg.seed))
    chunks.append(struct.pack("<I", len(model.params)))
    for name, p in model.params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{p.data.ndim}I", p.data.ndim, *p.data.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"checkpoint truncated: needed {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_model(path) -> Model:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise FormatError("not a checkpoint: bad magic")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise FormatError(f"checkpoint version {version} unsupported (expected {FORMAT_VERSION})")
    base, depth, cascade, in_ch, seed = r.unpack(_CONFIG.format)
    if cascade not in (0, 1):
        raise FormatError("corrupt checkpoint: cascade flag is not 0/1")
    try:
        config = ModelConfig(base_channels=base, depth=depth, cascade=bool(cascade), in_channels=in_ch, seed=seed)
    except ValueError as exc:
        raise FormatError(f"corrupt checkpoint config: {exc}") from exc
    expected = OrderedDict(
        (name + suffix, shape if suffix == ".weight" else (1, shape[0], 1, 1))
        for name, shape in layer_shapes(config)
        for suffix in (".weight", ".bias")
    )
    (count,) = r.unpack("<I")
    if count != len(expected):
        raise FormatError(f"corrupt checkpoint: {count} records, config implies {len(expected)}")
    params: OrderedDict[str, DiffTensor] = OrderedDict()
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        try:
            name = r.take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("corrupt checkpoint: parameter name is not utf-8") from exc
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}I")
        if expected.get(name) != tuple(shape):
            raise FormatError(f"corrupt checkpoint: unexpected record {name!r} with shape {shape}")
        n = int(np.prod(shape))
        values = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        params[name] = DiffTensor.param(values)
    if r.pos != len(r.buf):
        raise FormatError(f"corrupt checkpoint: {len(r.buf) - r.pos} trailing bytes")
    return Model(config, params)


def config_dict(config: ModelConfig) -> dict:
    return asdict(config)
