"""Network description, prunable-unit registry, masking and checkpoints.

A *unit* is a convolutional kernel or a dense hidden unit. Units of the
logits layer are never prunable and are not part of the state vector.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import InputError, ParseError, StructuralError

CONV = "conv"
DENSE = "dense"


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_size: int
    in_size: int
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    padding: int = 0
    pool: bool = False
    is_logits: bool = False

    @classmethod
    def conv(cls, out_kernels, in_channels, k=3, stride=1, padding=1, pool=False):
        k1, k2 = (k, k) if isinstance(k, int) else tuple(k)
        return cls(CONV, out_kernels, in_channels, (k1, k2), stride, padding, pool)

    @classmethod
    def dense(cls, out_units, in_units, is_logits=False):
        return cls(DENSE, out_units, in_units, is_logits=is_logits)

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == CONV:
            return (self.out_size, self.in_size, *self.kernel)
        return (self.out_size, self.in_size)

    @property
    def param_count(self) -> int:
        return int(np.prod(self.weight_shape)) + self.out_size


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        self.validate()

    def validate(self) -> None:
        if not self.layers:
            raise InputError("network has no layers")
        logits = [i for i, ly in enumerate(self.layers) if ly.is_logits]
        if logits != [len(self.layers) - 1]:
            raise StructuralError("exactly one logits layer is required and it must be the last layer")
        c, h, w = self.input_shape
        seen_dense = False
        for i, ly in enumerate(self.layers):
            if ly.out_size < 1:
                raise StructuralError(f"layer {i} has no units")
            if ly.kind == CONV:
                if seen_dense:
                    raise StructuralError(f"conv layer {i} follows a dense layer")
                if ly.in_size != c:
                    raise StructuralError(f"layer {i} expects {ly.in_size} input channels, gets {c}")
                k1, k2 = ly.kernel
                h = (h + 2 * ly.padding - k1) // ly.stride + 1
                w = (w + 2 * ly.padding - k2) // ly.stride + 1
                if ly.pool:
                    h, w = h // 2, w // 2
                if h < 1 or w < 1:
                    raise StructuralError(f"layer {i} produces an empty feature map")
                c = ly.out_size
            elif ly.kind == DENSE:
                n = c * h * w if not seen_dense else c
                if ly.in_size != n:
                    raise StructuralError(f"dense layer {i} expects {ly.in_size} inputs, gets {n}")
                seen_dense = True
                c, h, w = ly.out_size, 1, 1
            else:
                raise StructuralError(f"unknown layer kind {ly.kind!r}")

    def conv_output_hw(self) -> tuple[int, int]:
        """Spatial size of the tensor flattened into the first dense layer."""
        _, h, w = self.input_shape
        for ly in self.layers:
            if ly.kind != CONV:
                break
            h = (h + 2 * ly.padding - ly.kernel[0]) // ly.stride + 1
            w = (w + 2 * ly.padding - ly.kernel[1]) // ly.stride + 1
            if ly.pool:
                h, w = h // 2, w // 2
        return h, w

    @property
    def param_count(self) -> int:
        return sum(ly.param_count for ly in self.layers)


def toy_spec(input_shape=(1, 16, 16), classes=4, conv=(8, 16), hidden=(32,)) -> NetworkSpec:
    """conv(3x3, pad 1) + 2x2 max-pool blocks, then ReLU dense layers, then logits."""
    c, h, w = input_shape
    layers = []
    for n in conv:
        layers.append(LayerSpec.conv(n, c, 3, 1, 1, pool=True))
        c, h, w = n, h // 2, w // 2
    n_in = c * h * w
    for n in hidden:
        layers.append(LayerSpec.dense(n, n_in))
        n_in = n
    layers.append(LayerSpec.dense(classes, n_in, is_logits=True))
    return NetworkSpec(tuple(input_shape), tuple(layers))


class Unit(NamedTuple):
    layer: int
    index: int
    kind: str


@dataclass
class UnitRegistry:
    entries: list[Unit]
    layer_slices: dict[int, slice] = field(default_factory=dict)

    @property
    def D(self) -> int:
        return len(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def layer_of(self, d: int) -> int:
        return self.entries[d].layer


def enumerate_units(spec: NetworkSpec) -> UnitRegistry:
    """Index every non-logits unit: layers in forward order, units in index order."""
    if not spec.layers:
        raise InputError("network has no layers")
    entries, slices = [], {}
    for l, ly in enumerate(spec.layers):
        if ly.is_logits:
            continue
        start = len(entries)
        entries.extend(Unit(l, i, ly.kind) for i in range(ly.out_size))
        slices[l] = slice(start, len(entries))
    return UnitRegistry(entries, slices)


def _check_state(state, D) -> np.ndarray:
    s = np.asarray(state)
    if s.shape != (D,):
        raise InputError(f"mask length {s.size} does not match D = {D}")
    if s.size and not np.isin(s, (0, 1)).all():
        raise InputError("mask must be binary")
    return s.astype(bool)


class Network:
    """Parameters of a :class:`NetworkSpec` plus a (maskable) forward pass."""

    def __init__(self, spec: NetworkSpec, params: list[T.Tensor] | None = None, rng=None):
        self.spec = spec
        self.registry = enumerate_units(spec)
        if params is None:
            rng = np.random.default_rng(rng)
            params = []
            for ly in spec.layers:
                fan_in = int(np.prod(ly.weight_shape[1:]))
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=ly.weight_shape)
                params += [T.Tensor(w, requires_grad=True), T.Tensor(np.zeros(ly.out_size), requires_grad=True)]
        if len(params) != 2 * len(spec.layers):
            raise StructuralError("expected one (weights, bias) pair per layer")
        for k, ly in enumerate(spec.layers):
            if params[2 * k].shape != ly.weight_shape or params[2 * k + 1].shape != (ly.out_size,):
                raise StructuralError(f"parameter shapes of layer {k} do not match its spec")
        self.params = params

    @property
    def D(self) -> int:
        return self.registry.D

    def num_params(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "Network":
        return Network(self.spec, [T.Tensor(p.data.copy(), requires_grad=True) for p in self.params])

    def unit_masks(self, state) -> list[np.ndarray | None]:
        """Per-layer float masks from a state vector (None = layer fully active)."""
        if state is None:
            return [None] * len(self.spec.layers)
        s = _check_state(state, self.D)
        out = []
        for l in range(len(self.spec.layers)):
            sl = self.registry.layer_slices.get(l)
            out.append(None if sl is None else s[sl].astype(np.float64))
        return out

    def forward(self, x, state=None, collect: bool = False):
        """Logits for a batch ``x`` of shape (B, C, H, W).

        Units with ``state[d] == 0`` have their post-activation output zeroed.
        With ``collect=True`` also returns the unmasked post-ReLU output of every
        non-logits layer (feature maps for conv, activations for dense).
        """
        h = T.as_tensor(x)
        masks = self.unit_masks(state)
        acts = []
        flat = False
        for k, ly in enumerate(self.spec.layers):
            w, b = self.params[2 * k], self.params[2 * k + 1]
            if ly.kind == CONV:
                h = T.conv2d(h, w, ly.stride, ly.padding)
                h = T.add(h, T.reshape(b, (1, -1, 1, 1)))
                h = T.relu(h)
                if collect:
                    acts.append(h.data)
                if masks[k] is not None:
                    h = T.mul(h, masks[k].reshape(1, -1, 1, 1))
                if ly.pool:
                    h = T.max_pool2d(h)
            else:
                if not flat:
                    h = T.reshape(h, (h.shape[0], -1))
                    flat = True
                h = T.dense(h, w, b)
                if not ly.is_logits:
                    h = T.relu(h)
                    if collect:
                        acts.append(h.data)
                    if masks[k] is not None:
                        h = T.mul(h, masks[k].reshape(1, -1))
        return (h, acts) if collect else h

    __call__ = forward


class MaskedNetwork:
    """Non-destructive view of a network with some units dropped."""

    def __init__(self, network: Network, state):
        self.network = network
        self.state = _check_state(state, network.D).astype(np.uint8)

    @property
    def params(self):
        return self.network.params

    @property
    def spec(self):
        return self.network.spec

    def forward(self, x, collect=False):
        return self.network.forward(x, self.state, collect=collect)

    __call__ = forward

    def active_params(self):
        return param_activity(self.network.spec, self.state)


def apply_mask(network, mask) -> MaskedNetwork:
    """Drop units whose state bit is 0. Masking an already-masked view intersects the masks."""
    if isinstance(network, MaskedNetwork):
        s = _check_state(mask, network.network.D)
        return MaskedNetwork(network.network, network.state.astype(bool) & s)
    return MaskedNetwork(network, mask)


def param_activity(spec: NetworkSpec, state) -> list[np.ndarray]:
    """Boolean array per parameter: True where the scalar survives pruning.

    A dropped unit loses its own weights and bias plus the matching input
    slice of the next layer (next conv's input channel or the first dense
    layer's columns for that channel).
    """
    registry = enumerate_units(spec)
    s = _check_state(state, registry.D)
    c0 = spec.input_shape[0]
    in_keep = np.ones(c0, dtype=bool)
    hw = spec.conv_output_hw()
    out = []
    prev_conv = True
    for l, ly in enumerate(spec.layers):
        sl = registry.layer_slices.get(l)
        keep = np.ones(ly.out_size, dtype=bool) if sl is None else s[sl]
        if ly.kind == CONV:
            w = keep[:, None, None, None] & in_keep[None, :, None, None]
            out.append(np.broadcast_to(w, ly.weight_shape).copy())
        else:
            if prev_conv:
                in_keep = np.repeat(in_keep, hw[0] * hw[1])
                prev_conv = False
            out.append(keep[:, None] & in_keep[None, :])
        out.append(keep.copy())
        in_keep = keep
    return out


def masked_param_count(network, mask) -> tuple[int, int]:
    """(kept, total) trainable scalars under the pruning rule of :func:`param_activity`."""
    spec = network.spec
    act = param_activity(spec, mask)
    return int(sum(a.sum() for a in act)), spec.param_count


def kept_rate(network, mask) -> float:
    kept, total = masked_param_count(network, mask)
    return kept / total


def materialize_pruned(network, mask) -> Network:
    """Build a compact network with the dropped units physically removed."""
    if isinstance(network, MaskedNetwork):
        mask = network.state.astype(bool) & _check_state(mask, network.network.D)
        network = network.network
    spec = network.spec
    s = _check_state(mask, network.D)
    reg = network.registry
    hw = spec.conv_output_hw()
    in_idx = np.arange(spec.input_shape[0])
    layers, params = [], []
    prev_conv = True
    for l, ly in enumerate(spec.layers):
        w, b = network.params[2 * l].data, network.params[2 * l + 1].data
        sl = reg.layer_slices.get(l)
        keep = np.arange(ly.out_size) if sl is None else np.flatnonzero(s[sl])
        if keep.size == 0:
            raise StructuralError(f"layer {l} ({ly.kind}) has no surviving units")
        if ly.kind == DENSE and prev_conv:
            per = hw[0] * hw[1]
            in_idx = (in_idx[:, None] * per + np.arange(per)[None, :]).reshape(-1)
            prev_conv = False
        neww = w[np.ix_(keep, in_idx)] if ly.kind == DENSE else w[keep][:, in_idx]
        layers.append(replace(ly, out_size=int(keep.size), in_size=int(in_idx.size)))
        params += [T.Tensor(neww.copy(), requires_grad=True), T.Tensor(b[keep].copy(), requires_grad=True)]
        in_idx = keep
    return Network(NetworkSpec(spec.input_shape, tuple(layers)), params)


# -- checkpoint I/O -------------------------------------------------------

MAGIC = b"IPRN"
VERSION = 1
_HEAD = struct.Struct("<4sIIIII")  # magic, version, C, H, W, layer count
_LAYER = struct.Struct("<BBIIIIII")  # kind, flags, out, in, k1, k2, stride, padding


def save_checkpoint(path, network: Network, state=None) -> None:
    """Write weights and mask to the ``.iprn`` binary format (little-endian)."""
    spec = network.spec
    state = np.ones(network.D, dtype=np.uint8) if state is None else _check_state(state, network.D).astype(np.uint8)
    buf = bytearray(_HEAD.pack(MAGIC, VERSION, *spec.input_shape, len(spec.layers)))
    for ly in spec.layers:
        flags = (1 if ly.pool else 0) | (2 if ly.is_logits else 0)
        buf += _LAYER.pack(0 if ly.kind == CONV else 1, flags, ly.out_size, ly.in_size,
                           ly.kernel[0], ly.kernel[1], ly.stride, ly.padding)
    for p in network.params:
        buf += p.data.astype("<f8").tobytes()
    buf += struct.pack("<I", state.size)
    buf += np.packbits(state, bitorder="little").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> tuple[Network, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size:
        raise ParseError("truncated checkpoint header", 0)
    magic, version, c, h, w, n_layers = _HEAD.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ParseError(f"bad checkpoint magic {magic!r}", 0)
    if version != VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", 4)
    off = _HEAD.size
    layers = []
    for _ in range(n_layers):
        if off + _LAYER.size > len(raw):
            raise ParseError("truncated layer header", off)
        kind, flags, o, i, k1, k2, stride, pad = _LAYER.unpack_from(raw, off)
        if kind not in (0, 1):
            raise ParseError(f"unknown layer kind {kind}", off)
        off += _LAYER.size
        layers.append(LayerSpec(CONV if kind == 0 else DENSE, o, i, (k1, k2), stride, pad,
                                bool(flags & 1), bool(flags & 2)))
    try:
        spec = NetworkSpec((c, h, w), tuple(layers))
    except StructuralError as exc:
        raise ParseError(f"invalid architecture in checkpoint: {exc}", _HEAD.size) from exc
    params = []
    for ly in spec.layers:
        for shape in (ly.weight_shape, (ly.out_size,)):
            n = int(np.prod(shape))
            if off + 8 * n > len(raw):
                raise ParseError("truncated weight array", off)
            params.append(T.Tensor(np.frombuffer(raw, "<f8", n, off).reshape(shape).astype(np.float64), requires_grad=True))
            off += 8 * n
    if off + 4 > len(raw):
        raise ParseError("missing mask length", off)
    (D,) = struct.unpack_from("<I", raw, off)
    off += 4
    nbytes = (D + 7) // 8
    if off + nbytes != len(raw):
        raise ParseError(f"mask section has {len(raw) - off} bytes, expected {nbytes}", off)
    state = np.unpackbits(np.frombuffer(raw, np.uint8, nbytes, off), count=D, bitorder="little")
    net = Network(spec, params)
    if D != net.D:
        raise ParseError(f"mask length {D} does not match network D = {net.D}", off - 4)
    return net, state

