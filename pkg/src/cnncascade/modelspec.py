"""Network architecture descriptions, geometry, reference configs and model files.

A network is an ordered stack of ``ConvSpec`` (convolution followed by the
scaled rational-tanh activation) and ``PoolSpec`` (2x2, stride 2) layers with
no fully-connected head, so every network maps an image to a response map.

Model file layout (little-endian)::

    magic  b"CCNC"          4 bytes
    version                 uint32
    pool mode               uint8   (0 = max, 1 = mean)
    for each of the 3 networks:
        layer count         uint32
        per layer:          uint8 kind (0 = conv, 1 = pool)
                            conv only: uint32 in_maps, out_maps, kernel_w, kernel_h
        per conv layer:     float32 kernels (out, in, kh, kw order), then float32 biases
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

MAGIC = b"CCNC"
FORMAT_VERSION = 1
POOL_MODES = ("max", "mean")

STAGE1_WINDOW = (27, 31)
PATCH_SIZE = (51, 55)
SELECTIVE_MAP = (5, 5)
STAGE1_STRIDE = 4

# parameter budgets of the three reference networks
PARAM_BUDGETS = (797, 1819, 2923)
FEATURE_MAP_BUDGET = 355


class ModelError(Exception):
    """Base class for model description and model file problems."""


class ModelFormatError(ModelError):
    """Bad magic, unknown version or malformed descriptor."""


class ModelTruncatedError(ModelError):
    """The payload ended before all declared weights were read."""


class ModelGeometryError(ModelError):
    """A network violates the cascade's geometric contract."""


@dataclass(frozen=True)
class ConvSpec:
    in_maps: int
    out_maps: int
    kernel_w: int
    kernel_h: int

    @property
    def param_count(self) -> int:
        return self.out_maps * (self.in_maps * self.kernel_w * self.kernel_h + 1)


@dataclass(frozen=True)
class PoolSpec:
    """2x2 pooling with stride 2; trailing odd rows/columns are dropped."""


LayerSpec = ConvSpec | PoolSpec


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    pool_mode: str = "max"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.pool_mode not in POOL_MODES:
            raise ModelError(f"unknown pool mode {self.pool_mode!r}")

    @property
    def conv_layers(self) -> list[ConvSpec]:
        return [l for l in self.layers if isinstance(l, ConvSpec)]

    def validate(self) -> None:
        convs = self.conv_layers
        if not convs or not isinstance(self.layers[-1], ConvSpec):
            raise ModelError("last layer must be a convolution")
        if convs[-1].out_maps != 1:
            raise ModelError("last convolution must emit a single response map")
        maps = 1
        for layer in self.layers:
            if isinstance(layer, ConvSpec):
                if layer.in_maps != maps:
                    raise ModelError(
                        f"conv expects {layer.in_maps} input maps, previous layer gives {maps}"
                    )
                if min(layer.in_maps, layer.out_maps, layer.kernel_w, layer.kernel_h) < 1:
                    raise ModelError("conv dimensions must be positive")
                maps = layer.out_maps


@dataclass(frozen=True)
class ConvLayerWeights:
    """Kernels shaped (out_maps, in_maps, kernel_h, kernel_w) and one bias per output map."""

    kernels: np.ndarray
    biases: np.ndarray

    @property
    def param_count(self) -> int:
        return int(self.kernels.size + self.biases.size)


NetworkWeights = list  # list[ConvLayerWeights], one entry per conv layer


@dataclass
class Network:
    spec: NetworkSpec
    weights: list[ConvLayerWeights]

    def __post_init__(self):
        check_weights(self.spec, self.weights)

    @property
    def receptive_field(self) -> tuple[int, int]:
        return receptive_field(self.spec)

    @property
    def stride(self) -> int:
        return output_stride(self.spec)

    def astype(self, dtype) -> "Network":
        return Network(
            self.spec,
            [ConvLayerWeights(w.kernels.astype(dtype), w.biases.astype(dtype)) for w in self.weights],
        )


def check_weights(spec: NetworkSpec, weights: Sequence[ConvLayerWeights]) -> None:
    convs = spec.conv_layers
    if len(convs) != len(weights):
        raise ModelError(f"{len(convs)} conv layers but {len(weights)} weight sets")
    for layer, w in zip(convs, weights):
        want = (layer.out_maps, layer.in_maps, layer.kernel_h, layer.kernel_w)
        if w.kernels.shape != want or w.biases.shape != (layer.out_maps,):
            raise ModelError(
                f"weights {w.kernels.shape}/{w.biases.shape} do not match layer {layer}"
            )


# ---------------------------------------------------------------- geometry


def output_shape(spec: NetworkSpec, width: int, height: int) -> tuple[int, int]:
    """Final map size (w, h) for an input of ``width`` x ``height``; may be <= 0."""
    w, h = width, height
    for layer in spec.layers:
        if isinstance(layer, ConvSpec):
            w, h = w - layer.kernel_w + 1, h - layer.kernel_h + 1
        else:
            w, h = w // 2, h // 2
        if w <= 0 or h <= 0:
            return (min(w, 0), min(h, 0))
    return w, h


def receptive_field(spec: NetworkSpec) -> tuple[int, int]:
    """Smallest input (w, h) that yields a 1x1 final map."""
    w, h = 1, 1
    for layer in reversed(spec.layers):
        if isinstance(layer, ConvSpec):
            w, h = w + layer.kernel_w - 1, h + layer.kernel_h - 1
        else:
            w, h = 2 * w, 2 * h
    return w, h


def output_stride(spec: NetworkSpec) -> int:
    stride = 1
    for layer in spec.layers:
        if isinstance(layer, PoolSpec):
            stride *= 2
    return stride


def param_count(spec: NetworkSpec) -> int:
    return sum(l.param_count for l in spec.conv_layers)


def feature_map_tally(spec: NetworkSpec) -> dict[str, int]:
    """Counts of feature maps: conv outputs, pooled outputs and the input plane."""
    conv_maps = sum(l.out_maps for l in spec.conv_layers)
    pooled = 0
    maps = 1
    for layer in spec.layers:
        if isinstance(layer, ConvSpec):
            maps = layer.out_maps
        else:
            pooled += maps
    return {"conv": conv_maps, "pooled": pooled, "input": 1}


# ------------------------------------------------------------ references


def conv(in_maps, out_maps, kw, kh=None) -> ConvSpec:
    return ConvSpec(in_maps, out_maps, kw, kw if kh is None else kh)


POOL = PoolSpec()


def reference_specs(pool_mode: str = "max") -> tuple[NetworkSpec, NetworkSpec, NetworkSpec]:
    """The shipped CNN1/CNN2/CNN3 stacks.

    Each hits its published parameter budget exactly: 797, 1819 and 2923.
    CNN1 has a 27x31 receptive field with stride 4; CNN2 and CNN3 have a
    35x39 receptive field, so a 51x55 patch gives a 5x5 map.
    """
    cnn1 = NetworkSpec(
        (conv(1, 6, 4), POOL, conv(6, 6, 3), POOL, conv(6, 2, 5, 6), conv(2, 1, 1)),
        pool_mode,
    )
    cnn2 = NetworkSpec(
        (conv(1, 16, 4), POOL, conv(16, 6, 3), POOL, conv(6, 2, 7, 8), conv(2, 1, 1)),
        pool_mode,
    )
    cnn3 = NetworkSpec(
        (conv(1, 6, 4), POOL, conv(6, 4, 3), POOL, conv(4, 20, 5, 6), conv(20, 1, 3)),
        pool_mode,
    )
    return cnn1, cnn2, cnn3


def init_weights(spec: NetworkSpec, rng: np.random.Generator, dtype=np.float64) -> list[ConvLayerWeights]:
    """Uniform fan-in scaled initialisation, zero biases."""
    out = []
    for layer in spec.conv_layers:
        fan_in = layer.in_maps * layer.kernel_w * layer.kernel_h
        bound = np.sqrt(3.0 / fan_in)
        k = rng.uniform(-bound, bound, (layer.out_maps, layer.in_maps, layer.kernel_h, layer.kernel_w))
        out.append(ConvLayerWeights(k.astype(dtype), np.zeros(layer.out_maps, dtype)))
    return out


# --------------------------------------------------------------- cascade


@dataclass
class CascadeModel:
    """Three trained networks plus the geometry the detector relies on."""

    cnn1: Network
    cnn2: Network
    cnn3: Network
    patch_size: tuple[int, int] = PATCH_SIZE
    selective_map: tuple[int, int] = SELECTIVE_MAP
    meta: dict = field(default_factory=dict)

    @property
    def networks(self) -> tuple[Network, Network, Network]:
        return self.cnn1, self.cnn2, self.cnn3

    @property
    def window(self) -> tuple[int, int]:
        return receptive_field(self.cnn1.spec)

    @property
    def pool_mode(self) -> str:
        return self.cnn1.spec.pool_mode

    def validate(self, window: tuple[int, int] | None = STAGE1_WINDOW) -> None:
        """Raise ``ModelGeometryError`` unless every cascade invariant holds.

        ``window=None`` accepts any stage-1 receptive field (small test models).
        """
        for i, net in enumerate(self.networks, 1):
            try:
                net.spec.validate()
                check_weights(net.spec, net.weights)
            except ModelGeometryError:
                raise
            except ModelError as exc:
                raise ModelGeometryError(f"CNN{i}: {exc}") from exc
        modes = {net.spec.pool_mode for net in self.networks}
        if len(modes) != 1:
            raise ModelGeometryError(f"networks disagree on pool mode: {sorted(modes)}")
        if output_stride(self.cnn1.spec) != STAGE1_STRIDE:
            raise ModelGeometryError(
                f"CNN1 output stride is {output_stride(self.cnn1.spec)}, expected {STAGE1_STRIDE}"
            )
        if window is not None and self.window != tuple(window):
            raise ModelGeometryError(f"CNN1 receptive field {self.window} != {tuple(window)}")
        for i, net in ((2, self.cnn2), (3, self.cnn3)):
            got = output_shape(net.spec, *self.patch_size)
            if got != tuple(self.selective_map):
                raise ModelGeometryError(
                    f"CNN{i} maps a {self.patch_size} patch to {got}, expected {self.selective_map}"
                )

    def astype(self, dtype) -> "CascadeModel":
        return CascadeModel(
            self.cnn1.astype(dtype), self.cnn2.astype(dtype), self.cnn3.astype(dtype),
            self.patch_size, self.selective_map, dict(self.meta),
        )


def random_cascade(seed: int = 0, pool_mode: str = "max") -> CascadeModel:
    rng = np.random.default_rng(seed)
    nets = [Network(s, init_weights(s, rng, np.float32)) for s in reference_specs(pool_mode)]
    return CascadeModel(*nets)


# ------------------------------------------------------------ serialization

_HEADER = struct.Struct("<4sIB")
_U32 = struct.Struct("<I")
_CONV = struct.Struct("<IIII")


def dump_model(model: CascadeModel, fh: BinaryIO) -> None:
    modes = {net.spec.pool_mode for net in model.networks}
    if len(modes) != 1:
        raise ModelGeometryError("all networks must share one pool mode")
    fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, POOL_MODES.index(model.pool_mode)))
    for net in model.networks:
        fh.write(_U32.pack(len(net.spec.layers)))
        for layer in net.spec.layers:
            if isinstance(layer, ConvSpec):
                fh.write(b"\x00" + _CONV.pack(layer.in_maps, layer.out_maps, layer.kernel_w, layer.kernel_h))
            else:
                fh.write(b"\x01")
        for w in net.weights:
            fh.write(np.ascontiguousarray(w.kernels, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(w.biases, dtype="<f4").tobytes())


def save_model(model: CascadeModel, path) -> None:
    buf = io.BytesIO()
    dump_model(model, buf)
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelTruncatedError(
                f"need {n} bytes at offset {self.pos}, file has {len(self.data)}"
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk


def parse_model(data: bytes, window: tuple[int, int] | None = STAGE1_WINDOW) -> CascadeModel:
    r = _Reader(data)
    if len(data) < _HEADER.size:
        if not MAGIC.startswith(data[:4]):
            raise ModelFormatError("bad magic")
        raise ModelTruncatedError("file shorter than header")
    magic, version, mode_byte = _HEADER.unpack(r.take(_HEADER.size))
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format version {version}")
    if mode_byte >= len(POOL_MODES):
        raise ModelFormatError(f"unknown pool mode byte {mode_byte}")
    pool_mode = POOL_MODES[mode_byte]

    nets = []
    for _ in range(3):
        (n_layers,) = _U32.unpack(r.take(4))
        if n_layers > 64:
            raise ModelFormatError(f"implausible layer count {n_layers}")
        layers = []
        for _ in range(n_layers):
            kind = r.take(1)[0]
            if kind == 0:
                layers.append(ConvSpec(*_CONV.unpack(r.take(_CONV.size))))
            elif kind == 1:
                layers.append(POOL)
            else:
                raise ModelFormatError(f"unknown layer kind {kind}")
        spec = NetworkSpec(tuple(layers), pool_mode)
        weights = []
        for layer in spec.conv_layers:
            shape = (layer.out_maps, layer.in_maps, layer.kernel_h, layer.kernel_w)
            n = int(np.prod(shape))
            k = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
            b = np.frombuffer(r.take(4 * layer.out_maps), dtype="<f4").astype(np.float32)
            weights.append(ConvLayerWeights(k, b))
        try:
            nets.append(Network(spec, weights))
        except ModelError as exc:
            raise ModelGeometryError(str(exc)) from exc
    if r.pos != len(data):
        raise ModelFormatError(f"{len(data) - r.pos} trailing bytes after payload")
    model = CascadeModel(*nets)
    model.validate(window)
    return model


def load_model(path, window: tuple[int, int] | None = STAGE1_WINDOW) -> CascadeModel:
    return parse_model(Path(path).read_bytes(), window)


def manifest(model: CascadeModel) -> str:
    """Human-readable summary of per-network parameter counts and map tallies."""
    lines = ["network  params  target  delta  conv_maps  pooled_maps  receptive_field  stride"]
    totals = {"conv": 0, "pooled": 0, "input": 0}
    for i, (net, target) in enumerate(zip(model.networks, PARAM_BUDGETS), 1):
        p = param_count(net.spec)
        tally = feature_map_tally(net.spec)
        for k in totals:
            totals[k] += tally[k]
        rw, rh = receptive_field(net.spec)
        lines.append(
            f"CNN{i}     {p:6d}  {target:6d}  {p - target:+5d}  {tally['conv']:9d}  "
            f"{tally['pooled']:11d}  {rw}x{rh:<13d}  {output_stride(net.spec)}"
        )
    hidden = totals["conv"] + totals["pooled"]
    lines += [
        f"pool mode: {model.pool_mode}",
        f"stage-1 window: {model.window[0]}x{model.window[1]}",
        f"selective patch: {model.patch_size[0]}x{model.patch_size[1]} -> "
        f"{model.selective_map[0]}x{model.selective_map[1]}",
        f"feature maps, conv outputs only: {totals['conv']} (target {FEATURE_MAP_BUDGET})",
        f"feature maps, conv + pooled: {hidden}",
        f"feature maps, conv + pooled + input planes: {hidden + totals['input']}",
    ]
    return "\n".join(lines) + "\n"
