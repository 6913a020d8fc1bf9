"""Network descriptions, the dense reference pipeline and change-based networks.

A :class:`NetworkSpec` is an ordered list of layers; each layer reads from the
previous one unless ``inputs`` names other layers (the network input is
called ``"input"``), which allows branching and re-convergent graphs through
``add``/``concat`` join layers.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import change_engine as ce
from .cb_layers import (DETECT, POLICIES, PROPAGATE, REUSE_1X1, CBConvLayer, CBJoin, CBPointwise,
                        CBPoolLayer, LayerFrameStats)
from .errors import ConfigError, ShapeError
from .metrics import MSE, loss as metric_loss
from .tensor_core import (DTYPE, ConvSpec, PoolSpec, as_tensor3, conv2d_dense, conv2d_gemm, maxpool_dense,
                          output_size, relu)

INPUT = "input"
CONV, RELU, MAXPOOL, BATCHNORM, ADD, CONCAT = "conv", "relu", "maxpool", "batchnorm", "add", "concat"
KINDS = (CONV, RELU, MAXPOOL, BATCHNORM, ADD, CONCAT)


@dataclass(frozen=True)
class LayerSpec:
    """One layer. ``kernel`` is the pooling size for ``maxpool`` layers.

    ``out_hw`` optionally declares the output resolution; accounting uses the
    declared value, execution requires it to match the derived one.
    """

    name: str
    kind: str
    out_channels: int | None = None
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    padding: int = 0
    relu: bool = False
    ceil_mode: bool = False
    inputs: tuple[str, ...] = ()
    out_hw: tuple[int, int] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"layer {self.name!r}: unknown kind {self.kind!r}")
        k = self.kernel
        object.__setattr__(self, "kernel", (int(k), int(k)) if np.isscalar(k) else tuple(int(v) for v in k))
        object.__setattr__(self, "inputs", tuple(self.inputs))
        if self.out_hw is not None:
            object.__setattr__(self, "out_hw", tuple(int(v) for v in self.out_hw))


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    name: str = "network"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names) or INPUT in names:
            raise ConfigError(f"layer names must be unique and not {INPUT!r}: {names}")

    def inputs_of(self, index: int) -> tuple[str, ...]:
        layer = self.layers[index]
        if layer.inputs:
            return layer.inputs
        return (self.layers[index - 1].name,) if index else (INPUT,)

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    @property
    def conv_layers(self) -> list[LayerSpec]:
        return [layer for layer in self.layers if layer.kind == CONV]

    def shapes(self, strict: bool = False) -> dict[str, tuple[int, int, int]]:
        """Output shape ``(C, H, W)`` of every layer (plus ``"input"``).

        Declared ``out_hw`` values are used when present; with ``strict`` they
        must agree with the sizes derived from kernel, stride and padding.
        """
        shapes = {INPUT: self.input_shape}
        for i, layer in enumerate(self.layers):
            where = f"layer {i} ({layer.name})"
            try:
                ins = [shapes[n] for n in self.inputs_of(i)]
            except KeyError as exc:
                raise ShapeError(f"{where}: unknown or later input {exc.args[0]!r}") from None
            c, h, w = ins[0]
            if layer.kind in (CONV, RELU, MAXPOOL, BATCHNORM) and len(ins) != 1:
                raise ShapeError(f"{where}: {layer.kind} takes exactly one input")
            if layer.kind == CONV:
                if not layer.out_channels or layer.out_channels < 1:
                    raise ShapeError(f"{where}: out_channels must be positive")
                kh, kw = layer.kernel
                derived = (output_size(h, kh, layer.stride, layer.padding),
                           output_size(w, kw, layer.stride, layer.padding))
                c_out = layer.out_channels
            elif layer.kind == MAXPOOL:
                derived = PoolSpec(layer.kernel[0], layer.stride, layer.ceil_mode).output_hw(h, w)
                c_out = c
            elif layer.kind in (RELU, BATCHNORM):
                derived, c_out = (h, w), c
            else:
                if any(s[1:] != (h, w) for s in ins):
                    raise ShapeError(f"{where}: joined branches differ spatially: {ins}")
                if layer.kind == ADD and any(s[0] != c for s in ins):
                    raise ShapeError(f"{where}: add needs equal channel counts: {ins}")
                derived = (h, w)
                c_out = c if layer.kind == ADD else sum(s[0] for s in ins)
            hw = layer.out_hw or derived
            if strict and layer.out_hw is not None and layer.out_hw != derived:
                raise ShapeError(f"{where}: declared output {layer.out_hw} but input {h}x{w} gives {derived}")
            if hw[0] < 1 or hw[1] < 1:
                raise ShapeError(f"{where}: output size {hw} from input {h}x{w} is empty")
            shapes[layer.name] = (c_out, *hw)
        return shapes

    def in_shape(self, name: str) -> tuple[int, int, int]:
        i = [layer.name for layer in self.layers].index(name)
        shapes = self.shapes()
        return shapes[self.inputs_of(i)[0]]


def segmentation_spec(input_hw: tuple[int, int] | None = None, channel_div: int = 1,
                      kernel: int = 7) -> NetworkSpec:
    """Seven-layer segmentation topology (conv 7x7 / pool / conv 7x7 / pool / conv 7x7 / 1x1 / 1x1).

    Without ``input_hw`` the layer resolutions are fixed explicitly
    (776x1040 input, 541x871 after the first convolution); that variant is
    for accounting only because the first layer's size is not reachable with
    a plain convolution. With ``input_hw`` a runnable "same"-padded variant is
    returned. ``channel_div`` shrinks every hidden width and ``kernel`` replaces
    the 7x7 spatial kernels (runnable variant only) for desk-scale runs.
    """
    d = channel_div
    if kernel < 1 or kernel % 2 == 0:
        raise ConfigError(f"kernel must be odd and positive, got {kernel}")
    if input_hw is None and kernel != 7:
        raise ConfigError("the declared-resolution variant uses 7x7 kernels")
    k, p = kernel, kernel // 2
    declared = input_hw is None
    hw = (lambda h, w: (h, w)) if declared else (lambda h, w: None)
    layers = [
        LayerSpec("L1", CONV, 16 // d, k, padding=p, relu=True, out_hw=hw(541, 871)),
        LayerSpec("L2", MAXPOOL, kernel=2, stride=2, ceil_mode=True, out_hw=hw(271, 436)),
        LayerSpec("L3", CONV, 64 // d, k, padding=p, relu=True, out_hw=hw(271, 436)),
        LayerSpec("L4", MAXPOOL, kernel=2, stride=2, ceil_mode=True, out_hw=hw(136, 218)),
        LayerSpec("L5", CONV, 256 // d, k, padding=p, relu=True, out_hw=hw(136, 218)),
        LayerSpec("L6", CONV, 64 // d, 1, relu=True, out_hw=hw(136, 218)),
        LayerSpec("L7", CONV, 8, 1, out_hw=hw(136, 218)),
    ]
    shape = (3, 776, 1040) if declared else (3, *input_hw)
    return NetworkSpec(shape, tuple(layers), name="seg7")


def random_weights(spec: NetworkSpec, seed: int = 0) -> dict[str, dict[str, np.ndarray]]:
    """He-scaled random filters, small random biases and batch-norm statistics."""
    rng = np.random.default_rng(seed)
    shapes = spec.shapes()
    params = {}
    for i, layer in enumerate(spec.layers):
        c_in = shapes[spec.inputs_of(i)[0]][0]
        if layer.kind == CONV:
            kh, kw = layer.kernel
            std = np.sqrt(2.0 / (c_in * kh * kw))
            params[layer.name] = {
                "weight": (rng.standard_normal((layer.out_channels, c_in, kh, kw)) * std).astype(DTYPE),
                "bias": (rng.standard_normal(layer.out_channels) * 0.1).astype(DTYPE),
            }
        elif layer.kind == BATCHNORM:
            params[layer.name] = {
                "gamma": rng.uniform(0.5, 1.5, c_in).astype(DTYPE),
                "beta": (rng.standard_normal(c_in) * 0.1).astype(DTYPE),
                "mean": (rng.standard_normal(c_in) * 0.1).astype(DTYPE),
                "var": rng.uniform(0.5, 2.0, c_in).astype(DTYPE),
                "eps": np.asarray([1e-5], DTYPE),
            }
    return params


def bn_affine(bn: Mapping[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel ``(scale, shift)`` with ``bn(x) = scale * x + shift``."""
    gamma = np.asarray(bn["gamma"], np.float64)
    var = np.asarray(bn["var"], np.float64)
    eps = float(np.asarray(bn.get("eps", 1e-5)).reshape(-1)[0])
    scale = gamma / np.sqrt(var + eps)
    shift = np.asarray(bn["beta"], np.float64) - np.asarray(bn["mean"], np.float64) * scale
    return scale.astype(DTYPE), shift.astype(DTYPE)


def _bn_fn(bn):
    scale, shift = bn_affine(bn)

    def apply(v):
        # v: (C, ...) values
        extra = (None,) * (v.ndim - 1)
        return v * scale[(slice(None),) + extra] + shift[(slice(None),) + extra]

    return apply


def fold_batchnorm(conv: ConvSpec, bn: Mapping[str, np.ndarray]) -> ConvSpec:
    """Absorb a following batch norm: w' = w*g/sqrt(v+eps), b' = (b-mean)*g/sqrt(v+eps) + beta."""
    gamma = np.asarray(bn["gamma"], np.float64).reshape(-1)
    if gamma.shape[0] != conv.out_channels:
        raise ShapeError(f"batch norm has {gamma.shape[0]} channels, conv produces {conv.out_channels}")
    eps = float(np.asarray(bn.get("eps", 1e-5)).reshape(-1)[0])
    k = gamma / np.sqrt(np.asarray(bn["var"], np.float64) + eps)
    w = conv.weights.astype(np.float64) * k[:, None, None, None]
    b = (conv.bias.astype(np.float64) - np.asarray(bn["mean"], np.float64)) * k + np.asarray(bn["beta"], np.float64)
    return ConvSpec(w.astype(DTYPE), b.astype(DTYPE), conv.stride, conv.padding)


class DenseNetwork:
    """Frame-by-frame reference pipeline."""

    def __init__(self, spec: NetworkSpec, params: Mapping[str, Mapping[str, np.ndarray]]):
        self.spec = spec
        self.shapes = spec.shapes(strict=True)
        self.params = params
        self.convs: dict[str, ConvSpec] = {}
        for i, layer in enumerate(spec.layers):
            where = f"layer {i} ({layer.name})"
            if layer.kind == CONV:
                if layer.name not in params:
                    raise ShapeError(f"{where}: missing weights")
                c_in = self.shapes[spec.inputs_of(i)[0]][0]
                expected = (layer.out_channels, c_in, *layer.kernel)
                w = np.asarray(params[layer.name]["weight"])
                b = np.asarray(params[layer.name]["bias"]).reshape(-1)
                if w.shape != expected or b.shape != (layer.out_channels,):
                    raise ShapeError(f"{where}: weights {w.shape}/bias {b.shape}, expected {expected}")
                self.convs[layer.name] = ConvSpec(w, b, layer.stride, layer.padding)
            elif layer.kind == BATCHNORM:
                c = self.shapes[layer.name][0]
                bn = params.get(layer.name)
                if bn is None or np.asarray(bn["gamma"]).reshape(-1).shape[0] != c:
                    raise ShapeError(f"{where}: batch norm parameters missing or not {c} channels")

    def forward(self, x, return_all: bool = False, method: str = "direct"):
        """Run one frame. ``method="gemm"`` uses im2col + gemm instead of the
        direct convolution (same result, faster)."""
        x = as_tensor3(x)
        if x.shape != self.spec.input_shape:
            raise ShapeError(f"frame shape {x.shape} != network input {self.spec.input_shape}")
        conv = conv2d_dense if method == "direct" else conv2d_gemm
        outs = {INPUT: x}
        for i, layer in enumerate(self.spec.layers):
            ins = [outs[n] for n in self.spec.inputs_of(i)]
            if layer.kind == CONV:
                y = conv(ins[0], self.convs[layer.name])
                if layer.relu:
                    y = relu(y)
            elif layer.kind == RELU:
                y = relu(ins[0])
            elif layer.kind == MAXPOOL:
                y = maxpool_dense(ins[0], layer.kernel[0], layer.stride, layer.ceil_mode)
            elif layer.kind == BATCHNORM:
                y = _bn_fn(self.params[layer.name])(ins[0])
            elif layer.kind == ADD:
                y = ins[0].copy()
                for other in ins[1:]:
                    y += other
            else:
                y = np.concatenate(ins, axis=0)
            outs[layer.name] = y
        return outs if return_all else outs[self.spec.layers[-1].name]

    __call__ = forward


def build_network(spec: NetworkSpec, weights) -> DenseNetwork:
    return DenseNetwork(spec, weights)


@dataclass
class RunStats:
    """Per-frame, per-layer records of one ``forward_sequence`` run."""

    records: list[LayerFrameStats] = field(default_factory=list)
    frame_loss: list[float | None] = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return len(self.frame_loss)

    def layer_names(self) -> list[str]:
        seen = []
        for r in self.records:
            if r.layer not in seen:
                seen.append(r.layer)
        return seen

    def for_layer(self, name: str) -> list[LayerFrameStats]:
        return [r for r in self.records if r.layer == name]

    def for_frame(self, frame: int) -> list[LayerFrameStats]:
        return [r for r in self.records if r.frame == frame]

    def total_eff_ops(self, first_frame: int = 0) -> int:
        return sum(r.eff_ops for r in self.records if r.frame >= first_frame)

    def total_dense_ops(self, first_frame: int = 0) -> int:
        return sum(r.dense_ops for r in self.records if r.frame >= first_frame)

    def total_wall_ns(self, first_frame: int = 0) -> int:
        return sum(r.wall_ns for r in self.records if r.frame >= first_frame)


class CBNetwork:
    """Change-based counterpart of a :class:`DenseNetwork`, owning per-stream state."""

    def __init__(self, dense: DenseNetwork, nodes, aliases, mode):
        self.dense = dense
        self.spec = dense.spec
        self.nodes = nodes              # list of (name, layer, input names)
        self.aliases = aliases          # absorbed layer name -> node name
        self.mode = mode
        self.prev_frame: np.ndarray | None = None

    @property
    def conv_layers(self) -> list[CBConvLayer]:
        return [layer for _, layer, _ in self.nodes if isinstance(layer, CBConvLayer)]

    @property
    def pool_layers(self) -> list[CBPoolLayer]:
        return [layer for _, layer, _ in self.nodes if isinstance(layer, CBPoolLayer)]

    def layer(self, name: str):
        name = self.aliases.get(name, name)
        for n, layer, _ in self.nodes:
            if n == name:
                return layer
        raise KeyError(name)

    def inputs_of(self, name: str) -> tuple[str, ...]:
        for n, _, ins in self.nodes:
            if n == name:
                return ins
        raise KeyError(name)

    @property
    def thresholds(self) -> list[float]:
        return [layer.tau for layer in self.conv_layers]

    def set_thresholds(self, taus):
        taus = _threshold_list(taus, [c.name for c in self.conv_layers])
        for layer, tau in zip(self.conv_layers, taus):
            layer.tau = tau

    def reset_state(self):
        self.prev_frame = None
        for _, layer, _ in self.nodes:
            layer.reset()

    def clone(self) -> "CBNetwork":
        """Independent copy of state; weights are shared."""
        other = copy.copy(self)
        other.nodes = []
        for name, layer, ins in self.nodes:
            twin = copy.copy(layer)
            twin.prev_output = None if layer.prev_output is None else layer.prev_output.copy()
            if isinstance(layer, CBConvLayer):
                twin.state = None if layer.state is None else layer.state.copy()
            other.nodes.append((name, twin, ins))
        other.prev_frame = None if self.prev_frame is None else self.prev_frame.copy()
        return other

    def forward_frame(self, x, gather_fg: bool = False):
        """Process one frame.

        Returns ``(output, stats, maps)`` where ``output`` is the live output
        buffer of the last layer and ``maps`` maps node names to their
        ``(change_map, indexes)``.
        """
        x = as_tensor3(x)
        if x.shape != self.spec.input_shape:
            raise ShapeError(f"frame shape {x.shape} != network input {self.spec.input_shape}")
        if self.prev_frame is None:
            m = np.ones(x.shape[1:], dtype=bool)
            self.prev_frame = x.copy()
        else:
            m = (x != self.prev_frame).any(axis=0)
            self.prev_frame[...] = x
        outs = {INPUT: x}
        maps = {INPUT: (m, ce.extract_indexes(m))}
        stats = []
        out = x
        for name, layer, ins in self.nodes:
            if isinstance(layer, CBJoin):
                out, m_out, idx, st = layer.forward([outs[n] for n in ins], [maps[n] for n in ins], gather_fg)
            else:
                out, m_out, idx, st = layer.forward(outs[ins[0]], maps[ins[0]], gather_fg)
            outs[name] = out
            maps[name] = (m_out, idx)
            stats.append(st)
        return out, stats, maps


def _threshold_list(thresholds, conv_names) -> list[float]:
    if thresholds is None:
        taus = [0.0] * len(conv_names)
    elif isinstance(thresholds, Mapping):
        unknown = set(thresholds) - set(conv_names)
        if unknown:
            raise ConfigError(f"thresholds given for unknown conv layers {sorted(unknown)}")
        taus = [float(thresholds.get(n, 0.0)) for n in conv_names]
    else:
        taus = [float(t) for t in thresholds]
        if len(taus) != len(conv_names):
            raise ConfigError(f"{len(taus)} thresholds given for {len(conv_names)} conv layers")
    for name, tau in zip(conv_names, taus):
        if not tau >= 0:
            raise ConfigError(f"{name}: threshold must be >= 0, got {tau}")
    return taus


def convert_to_cb(net: DenseNetwork, thresholds=None, policies: Mapping[str, str] | None = None,
                  mode: str = ce.CLOSED_LOOP) -> CBNetwork:
    """Replace every layer by its change-based executor.

    Batch norms directly after a convolution are folded into it and a ReLU
    directly after a convolution is fused into its output update.
    ``thresholds`` is one value per conv layer (sequence or name mapping).
    """
    spec = net.spec
    layers = spec.layers
    consumers: dict[str, list[int]] = {}
    for i in range(len(layers)):
        for n in spec.inputs_of(i):
            consumers.setdefault(n, []).append(i)

    def sole_consumer(i, kind):
        users = consumers.get(layers[i].name, [])
        if len(users) == 1 and layers[users[0]].kind == kind and len(spec.inputs_of(users[0])) == 1:
            return users[0]
        return None

    plan = []          # (name, kind, conv ConvSpec | None, fuse, layer index)
    aliases = {}
    absorbed = set()
    for i, layer in enumerate(layers):
        if i in absorbed:
            continue
        if layer.kind == CONV:
            conv = net.convs[layer.name]
            fuse = layer.relu
            tail = i
            j = sole_consumer(tail, BATCHNORM)
            if j is not None and not fuse:
                conv = fold_batchnorm(conv, net.params[layers[j].name])
                absorbed.add(j)
                aliases[layers[j].name] = layer.name
                tail = j
            j = sole_consumer(tail, RELU)
            if j is not None and not fuse:
                fuse = True
                absorbed.add(j)
                aliases[layers[j].name] = layer.name
            plan.append((layer.name, i, conv, fuse))
        else:
            plan.append((layer.name, i, None, False))

    conv_names = [name for name, i, conv, _ in plan if conv is not None]
    taus = dict(zip(conv_names, _threshold_list(thresholds, conv_names)))
    policies = dict(policies or {})
    for key in policies:
        if aliases.get(key, key) not in conv_names:
            raise ConfigError(f"detection policy given for {key!r}, which is not a conv layer")
    policies = {aliases.get(k, k): v for k, v in policies.items()}

    nodes = []
    for name, i, conv, fuse in plan:
        layer = layers[i]
        ins = tuple(aliases.get(n, n) for n in spec.inputs_of(i))
        if layer.kind == CONV:
            policy = policies.get(name, DETECT)
            if policy not in POLICIES:
                raise ConfigError(f"{name}: unknown detection policy {policy!r}")
            if policy in (PROPAGATE, REUSE_1X1) and ins[0] == INPUT:
                raise ConfigError(f"{name}: policy {policy} needs an upstream change-based layer")
            cb = CBConvLayer(name, conv, taus[name], policy, fuse, mode)
        elif layer.kind == MAXPOOL:
            cb = CBPoolLayer(name, PoolSpec(layer.kernel[0], layer.stride, layer.ceil_mode))
        elif layer.kind == RELU:
            cb = CBPointwise(name, relu, RELU)
        elif layer.kind == BATCHNORM:
            cb = CBPointwise(name, _bn_fn(net.params[name]), BATCHNORM)
        else:
            cb = CBJoin(name, layer.kind)
        nodes.append((name, cb, ins))
    return CBNetwork(net, nodes, aliases, mode)


def forward_sequence(cbnet: CBNetwork, frames: Sequence[np.ndarray], reference=None, metric: str = MSE,
                     gather_fg: bool = False, on_frame=None):
    """Run ``frames`` in order, carrying state; returns ``(outputs, RunStats)``.

    ``reference`` holds one reference output per frame; when given, the
    per-frame loss under ``metric`` is recorded. ``on_frame(t, cbnet, stats,
    maps)`` is called after each frame (for inspection in tests).
    """
    if reference is not None and len(reference) != len(frames):
        raise ShapeError(f"{len(reference)} reference outputs for {len(frames)} frames")
    run = RunStats()
    outputs = []
    for t, frame in enumerate(frames):
        frame = np.asarray(frame)
        if frame.shape != cbnet.spec.input_shape:
            raise ShapeError(f"frame {t}: shape {frame.shape} != network input {cbnet.spec.input_shape}")
        out, stats, maps = cbnet.forward_frame(frame, gather_fg)
        for s in stats:
            s.frame = t
        run.records.extend(stats)
        outputs.append(out.copy())
        run.frame_loss.append(None if reference is None else metric_loss(out, reference[t], metric))
        if on_frame is not None:
            on_frame(t, cbnet, stats, maps)
    return outputs, run


def reset_state(cbnet: CBNetwork) -> None:
    cbnet.reset_state()


def dense_outputs(net: DenseNetwork, frames, method: str = "gemm") -> list[np.ndarray]:
    return [net.forward(f, method=method) for f in frames]
