"""Minimal Deep-ReLU inference engine with pre-activation instrumentation.

Supports the layer kinds needed by the MLP fixtures and the shortened
MobileNetv1: dense, conv2d (grouped / depthwise through ``groups``),
batchnorm, relu, global average pooling and flatten.

Inputs are batched: ``x`` has shape ``(N, D)`` with ``D`` the flattened
input size (a single vector of shape ``(D,)`` is also accepted).  All
arithmetic runs in the model precision.  Dense and conv layers accumulate
their products sequentially in a fixed order (input channel, kernel row,
kernel column), then add the bias, so the result does not depend on a BLAS
summation strategy.  Flattening is row-major (channel, row, column).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

BN_EPS = 1e-5

PRECISIONS = {"binary32": np.float32, "binary64": np.float64}
LINEAR_KINDS = ("dense", "conv2d", "batchnorm", "avgpool", "flatten")
WEIGHTED_KINDS = ("dense", "conv2d")


class ModelError(ValueError):
    """Raised on malformed models, bad shapes or unsupported structure."""


def dtype_of(precision: str):
    try:
        return PRECISIONS[precision]
    except KeyError:
        raise ModelError(f"unknown precision {precision!r}") from None


@dataclass(frozen=True, eq=False)
class Layer:
    """One node of the layered graph.

    ``weight``/``bias`` hold dense ``(out, in)`` or conv
    ``(out, in/groups, kh, kw)`` parameters; batchnorm layers use
    ``gamma``/``beta``/``mean``/``var``.
    """

    kind: str
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0
    groups: int = 1
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    mean: np.ndarray | None = None
    var: np.ndarray | None = None

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    def bn_scale(self) -> np.ndarray:
        """Per-channel batchnorm scale gamma / sqrt(var + eps), in binary64."""
        return np.asarray(self.gamma, np.float64) / np.sqrt(np.asarray(self.var, np.float64) + BN_EPS)

    def bn_shift(self) -> np.ndarray:
        return np.asarray(self.beta, np.float64) - np.asarray(self.mean, np.float64) * self.bn_scale()

    def arrays(self) -> dict[str, np.ndarray]:
        names = ("weight", "bias", "gamma", "beta", "mean", "var")
        return {n: getattr(self, n) for n in names if getattr(self, n) is not None}

    def n_params(self) -> int:
        if self.kind in WEIGHTED_KINDS:
            return self.weight.size + (0 if self.bias is None else self.bias.size)
        if self.kind == "batchnorm":
            # running statistics are buffers, not parameters
            return self.gamma.size + self.beta.size
        return 0

    def astype(self, dtype) -> "Layer":
        return dataclasses.replace(
            self, **{k: np.asarray(v, dtype=dtype) for k, v in self.arrays().items()}
        )


@dataclass(frozen=True)
class NeuronRef:
    """One scalar pre-activation: relu layer index, unit (or channel), position."""

    layer_index: int
    unit: int
    position: tuple[int, int] | None = None

    def __str__(self) -> str:
        if self.position is None:
            return f"L{self.layer_index}:{self.unit}"
        return f"L{self.layer_index}:{self.unit}@{self.position[0]},{self.position[1]}"


@dataclass
class ForwardRecord:
    output: np.ndarray
    preactivations: dict[int, np.ndarray] = field(default_factory=dict)
    activations: list[np.ndarray] = field(default_factory=list)

    def preactivation(self, neuron: NeuronRef) -> np.ndarray:
        """Values V(neuron; x) over the batch."""
        v = self.preactivations[neuron.layer_index]
        if neuron.position is None:
            return v[:, neuron.unit]
        r, c = neuron.position
        return v[:, neuron.unit, r, c]


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def layer_output_shape(layer: Layer, shape: tuple[int, ...]) -> tuple[int, ...]:
    kind = layer.kind
    if kind == "dense":
        if len(shape) != 1 or layer.weight.shape[1] != shape[0]:
            raise ModelError(f"dense weight {layer.weight.shape} does not accept input {shape}")
        return (layer.weight.shape[0],)
    if kind == "conv2d":
        if len(shape) != 3:
            raise ModelError(f"conv2d needs (C, H, W) input, got {shape}")
        c, h, w = shape
        cout, cin_g, kh, kw = layer.weight.shape
        if layer.groups < 1 or c % layer.groups or cout % layer.groups or cin_g * layer.groups != c:
            raise ModelError(f"conv2d groups={layer.groups} inconsistent with {layer.weight.shape} on {shape}")
        ho, wo = _conv_out(h, kh, layer.stride, layer.padding), _conv_out(w, kw, layer.stride, layer.padding)
        if ho < 1 or wo < 1:
            raise ModelError("conv2d output is empty")
        return (cout, ho, wo)
    if kind == "batchnorm":
        for name in ("gamma", "beta", "mean", "var"):
            if getattr(layer, name) is None or getattr(layer, name).shape != (shape[0],):
                raise ModelError(f"batchnorm {name} must have shape ({shape[0]},)")
        if np.any(np.asarray(layer.var) <= 0):
            raise ModelError("batchnorm variance must be > 0")
        return shape
    if kind == "relu":
        return shape
    if kind == "avgpool":
        if len(shape) != 3:
            raise ModelError("avgpool needs (C, H, W) input")
        return (shape[0], 1, 1)
    if kind == "flatten":
        return (int(np.prod(shape)),)
    raise ModelError(f"unknown layer kind {kind!r}")


class ModelGraph:
    """Ordered list of layers with a fixed input shape and precision.

    Treated as immutable once built; ``forward`` is a pure function.
    """

    def __init__(self, layers: Sequence[Layer], input_shape: Sequence[int], precision: str = "binary64"):
        self.precision = precision
        self.dtype = dtype_of(precision)
        self.input_shape = tuple(int(d) for d in input_shape)
        if not self.input_shape or any(d < 1 for d in self.input_shape):
            raise ModelError(f"bad input shape {self.input_shape}")
        self.layers = tuple(l.astype(self.dtype) for l in layers)
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(layer_output_shape(layer, shapes[-1]))
        self.shapes = tuple(shapes)
        self.relu_indices = tuple(i for i, l in enumerate(self.layers) if l.kind == "relu")
        if self.layers and self.layers[-1].kind == "relu":
            raise ModelError("final layer must not be a relu")
        prev = -1
        for r in self.relu_indices:
            seg = self.layers[prev + 1:r]
            if not any(l.kind in WEIGHTED_KINDS for l in seg):
                raise ModelError(f"relu at {r} is not preceded by a linear segment")
            prev = r

    # -- structure -------------------------------------------------------

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def output_size(self) -> int:
        return int(np.prod(self.shapes[-1]))

    def n_params(self) -> int:
        return sum(l.n_params() for l in self.layers)

    def output_shape(self, index: int) -> tuple[int, ...]:
        """Shape produced by layer ``index``."""
        return self.shapes[index + 1]

    def segment(self, relu_index: int) -> list[int]:
        """Layer indices of the linear segment feeding ``relu_index``.

        ``relu_index == len(layers)`` addresses the output head.
        """
        if relu_index != len(self.layers) and relu_index not in self.relu_indices:
            raise ModelError(f"layer {relu_index} is not a relu")
        prev = max([r for r in self.relu_indices if r < relu_index], default=-1)
        return list(range(prev + 1, relu_index))

    def segment_input_shape(self, relu_index: int) -> tuple[int, ...]:
        seg = self.segment(relu_index)
        return self.shapes[seg[0]] if seg else self.shapes[relu_index]

    def previous_relu(self, relu_index: int) -> int | None:
        prev = [r for r in self.relu_indices if r < relu_index]
        return prev[-1] if prev else None

    def next_relu(self, relu_index: int) -> int | None:
        nxt = [r for r in self.relu_indices if r > relu_index]
        return nxt[0] if nxt else None

    def neurons(self, relu_index: int, position: str = "center") -> list[NeuronRef]:
        """Targeted neurons of a relu layer: every unit, or one position per conv channel."""
        shape = self.output_shape(relu_index)
        if len(shape) == 1:
            return [NeuronRef(relu_index, u) for u in range(shape[0])]
        c, h, w = shape
        pos = (h // 2, w // 2) if position == "center" else tuple(position)
        return [NeuronRef(relu_index, u, pos) for u in range(c)]

    def flat_index(self, neuron: NeuronRef) -> int:
        shape = self.output_shape(neuron.layer_index)
        if neuron.position is None:
            if len(shape) != 1 or not 0 <= neuron.unit < shape[0]:
                raise ModelError(f"neuron {neuron} out of range for shape {shape}")
            return neuron.unit
        if len(shape) != 3:
            raise ModelError(f"neuron {neuron} has a position but layer is flat")
        c, h, w = shape
        r, s = neuron.position
        if not (0 <= neuron.unit < c and 0 <= r < h and 0 <= s < w):
            raise ModelError(f"neuron {neuron} out of range for shape {shape}")
        return (neuron.unit * h + r) * w + s

    def check_neuron(self, neuron: NeuronRef) -> None:
        if neuron.layer_index not in self.relu_indices:
            raise ModelError(f"{neuron}: layer {neuron.layer_index} is not a relu")
        self.flat_index(neuron)

    def astype(self, precision: str) -> "ModelGraph":
        return ModelGraph(self.layers, self.input_shape, precision)

    def replace_layers(self, layers: Sequence[Layer]) -> "ModelGraph":
        return ModelGraph(layers, self.input_shape, self.precision)

    # -- inference -------------------------------------------------------

    def _prepare(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_size:
            raise ModelError(f"input of shape {x.shape} does not match input size {self.input_size}")
        return x.astype(self.dtype, copy=False).reshape((x.shape[0],) + self.input_shape), single

    def run(self, x, stop: int | None = None, start: int = 0) -> np.ndarray:
        """Apply layers ``start..stop-1`` to a batch already shaped for ``start``."""
        stop = len(self.layers) if stop is None else stop
        h = np.asarray(x, self.dtype)
        for layer in self.layers[start:stop]:
            h = apply_layer(layer, h)
        return h

    def forward(self, x, record: bool = True) -> ForwardRecord:
        """Full forward pass; records every relu pre-activation and layer output."""
        h, single = self._prepare(x)
        rec = ForwardRecord(output=None)
        for i, layer in enumerate(self.layers):
            if record and layer.kind == "relu":
                rec.preactivations[i] = h
            h = apply_layer(layer, h)
            if record:
                rec.activations.append(h)
        out = h.reshape(h.shape[0], -1)
        rec.output = out[0] if single else out
        return rec

    def output(self, x) -> np.ndarray:
        h, single = self._prepare(x)
        out = self.run(h).reshape(h.shape[0], -1)
        return out[0] if single else out

    def preactivation(self, x, neuron: NeuronRef) -> np.ndarray:
        """V(neuron; x) for a batch, stopping the pass at the neuron's layer."""
        self.check_neuron(neuron)
        h, single = self._prepare(x)
        v = self.run(h, stop=neuron.layer_index)
        v = v[:, neuron.unit] if neuron.position is None else v[:, neuron.unit, neuron.position[0], neuron.position[1]]
        return v[0] if single else v

    def preactivation_rows(self, x, neurons: Sequence[NeuronRef]) -> np.ndarray:
        """V(neurons[i]; x[i]) for one neuron per row, all in the same relu layer."""
        h, _ = self._prepare(x)
        if len(neurons) != len(h):
            raise ModelError("need one neuron per input row")
        layer = {n.layer_index for n in neurons}
        if len(layer) != 1:
            raise ModelError("row neurons must share a relu layer")
        flat = {}
        for n in set(neurons):
            self.check_neuron(n)
            flat[n] = self.flat_index(n)
        v = self.run(h, stop=layer.pop()).reshape(len(h), -1)
        idx = np.fromiter((flat[n] for n in neurons), np.int64, len(neurons))
        return v[np.arange(len(h)), idx]

    def layer_input(self, x, relu_index: int) -> np.ndarray:
        """Flattened input of the segment feeding ``relu_index`` (previous relu output)."""
        h, _ = self._prepare(x)
        seg = self.segment(relu_index)
        stop = seg[0] if seg else relu_index
        return self.run(h, stop=stop).reshape(h.shape[0], -1)


def hard_label(output: np.ndarray) -> np.ndarray | int:
    """Argmax class, ties to the lowest index (numpy's argmax already does this)."""
    output = np.asarray(output)
    if output.shape[-1] < 2:
        raise ModelError("hard label needs a classification head with >= 2 outputs")
    lab = np.argmax(output, axis=-1)
    return int(lab) if lab.ndim == 0 else lab


def relu(v: np.ndarray) -> np.ndarray:
    # sign-bit semantics: -0.0 maps to +0.0, like the masked implementation
    return np.where(np.signbit(v), np.zeros((), v.dtype), v)


def _accumulate(cols: Iterable[tuple[np.ndarray, np.ndarray]], shape, dtype) -> np.ndarray:
    acc = np.zeros(shape, dtype)
    for w, x in cols:
        acc += w * x
    return acc


def _dense(layer: Layer, h: np.ndarray) -> np.ndarray:
    w = layer.weight
    acc = _accumulate(((w[:, k], h[:, k:k + 1]) for k in range(w.shape[1])), (h.shape[0], w.shape[0]), h.dtype)
    if layer.bias is not None:
        acc += layer.bias
    return acc


def _pad(h: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return h
    return np.pad(h, ((0, 0), (0, 0), (p, p), (p, p)))


def _conv(layer: Layer, h: np.ndarray) -> np.ndarray:
    n, c, hh, ww = h.shape
    cout, cin_g, kh, kw = layer.weight.shape
    s, p, g = layer.stride, layer.padding, layer.groups
    ho, wo = _conv_out(hh, kh, s, p), _conv_out(ww, kw, s, p)
    xp = _pad(h, p)
    cout_g = cout // g
    w = layer.weight
    out = np.empty((n, cout, ho, wo), h.dtype)
    if cin_g == 1 and cout_g == 1:
        # depthwise: every output channel reads its own input channel
        def taps():
            for i in range(kh):
                for j in range(kw):
                    patch = xp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
                    yield w[:, 0, i, j][None, :, None, None], patch
        out[:] = _accumulate(taps(), out.shape, h.dtype)
    else:
        for grp in range(g):
            wg = w[grp * cout_g:(grp + 1) * cout_g]

            def taps(grp=grp, wg=wg):
                for ci in range(cin_g):
                    src = xp[:, grp * cin_g + ci:grp * cin_g + ci + 1]
                    for i in range(kh):
                        for j in range(kw):
                            patch = src[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
                            yield wg[:, ci, i, j][None, :, None, None], patch
            out[:, grp * cout_g:(grp + 1) * cout_g] = _accumulate(taps(), (n, cout_g, ho, wo), h.dtype)
    if layer.bias is not None:
        out += layer.bias[None, :, None, None]
    return out


def apply_layer(layer: Layer, h: np.ndarray) -> np.ndarray:
    kind = layer.kind
    if kind == "dense":
        return _dense(layer, h.reshape(h.shape[0], -1))
    if kind == "conv2d":
        return _conv(layer, h)
    if kind == "batchnorm":
        scale = layer.bn_scale().astype(h.dtype)
        shift = layer.bn_shift().astype(h.dtype)
        bshape = (1, -1) + (1,) * (h.ndim - 2)
        return h * scale.reshape(bshape) + shift.reshape(bshape)
    if kind == "relu":
        return relu(h)
    if kind == "avgpool":
        return h.mean(axis=(2, 3), keepdims=True, dtype=h.dtype)
    if kind == "flatten":
        return h.reshape(h.shape[0], -1)
    raise ModelError(f"unknown layer kind {kind!r}")


# -- transposed (vector-Jacobian) application of linear layers ----------------


def _vjp(layer: Layer, g: np.ndarray, in_shape: tuple[int, ...]) -> np.ndarray:
    """Pull row vectors ``g`` (K, *out_shape) back through a linear layer (binary64)."""
    kind = layer.kind
    k = g.shape[0]
    if kind == "dense":
        return g.reshape(k, -1) @ np.asarray(layer.weight, np.float64)
    if kind == "flatten":
        return g.reshape((k,) + in_shape)
    if kind == "batchnorm":
        return g * layer.bn_scale().reshape((1, -1) + (1,) * (g.ndim - 2))
    if kind == "avgpool":
        _, h, w = in_shape
        return np.broadcast_to(g / (h * w), (k,) + in_shape).copy()
    if kind == "conv2d":
        c, hh, ww = in_shape
        cout, cin_g, kh, kw = layer.weight.shape
        s, p, grp = layer.stride, layer.padding, layer.groups
        ho, wo = g.shape[2], g.shape[3]
        w = np.asarray(layer.weight, np.float64)
        gx = np.zeros((k, c, hh + 2 * p, ww + 2 * p))
        cout_g = cout // grp
        for gi in range(grp):
            go = g[:, gi * cout_g:(gi + 1) * cout_g]
            for ci in range(cin_g):
                for i in range(kh):
                    for j in range(kw):
                        contrib = np.einsum("kohw,o->khw", go, w[gi * cout_g:(gi + 1) * cout_g, ci, i, j])
                        gx[:, gi * cin_g + ci, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += contrib
        return gx[:, :, p:p + hh, p:p + ww]
    raise ModelError(f"layer kind {kind!r} is not linear")


def _segment_layers(model: ModelGraph, relu_index: int) -> list[int]:
    seg = model.segment(relu_index)
    for i in seg:
        if model.layers[i].kind not in LINEAR_KINDS:
            raise ModelError(f"segment of layer {relu_index} contains non-linear op {model.layers[i].kind}")
    return seg


def fuse_affine_prefix(model: ModelGraph, relu_index: int, units: Sequence[int] | None = None):
    """Fused affine map of the linear segment feeding ``relu_index``.

    Returns ``(W, b)`` with ``W`` of shape (K, D_in) over the flattened
    segment input and ``b`` of shape (K,), for the flat output ``units``
    (all by default).  Computed in binary64; batchnorm is folded as
    scale = gamma / sqrt(var + eps) with the shift folded into the bias.
    """
    seg = _segment_layers(model, relu_index)
    out_shape = model.shapes[relu_index] if relu_index < len(model.layers) else model.shapes[-1]
    n_out = int(np.prod(out_shape))
    units = np.arange(n_out) if units is None else np.asarray(units)
    g = np.zeros((len(units), n_out))
    g[np.arange(len(units)), units] = 1.0
    g = g.reshape((len(units),) + tuple(out_shape))
    for i in reversed(seg):
        g = _vjp(model.layers[i], g, model.shapes[i])
    w = g.reshape(len(units), -1)
    in_shape = model.segment_input_shape(relu_index)
    h = np.zeros((1,) + in_shape)
    for i in seg:
        h = apply_layer(model.layers[i].astype(np.float64), h)
    b = h.reshape(-1)[units]
    return w, b


def fused_row(model: ModelGraph, neuron: NeuronRef) -> tuple[np.ndarray, float]:
    """Fused weight row (over the whole flattened layer input) and bias of one neuron."""
    model.check_neuron(neuron)
    w, b = fuse_affine_prefix(model, neuron.layer_index, [model.flat_index(neuron)])
    return w[0], float(b[0])


# -- structural helpers --------------------------------------------------------


@dataclass(frozen=True)
class SegmentStructure:
    """A relu (or head) segment reduced to: parameter-free ops, one weighted op, optional batchnorm."""

    pre: tuple[int, ...]
    weighted: int
    batchnorm: int | None


def segment_structure(model: ModelGraph, relu_index: int) -> SegmentStructure:
    seg = _segment_layers(model, relu_index)
    kinds = [model.layers[i].kind for i in seg]
    wpos = [j for j, k in enumerate(kinds) if k in WEIGHTED_KINDS]
    if len(wpos) != 1:
        raise ModelError(f"segment of layer {relu_index} must contain exactly one dense/conv op")
    j = wpos[0]
    tail = seg[j + 1:]
    if any(model.layers[i].kind != "batchnorm" for i in tail) or len(tail) > 1:
        raise ModelError(f"segment of layer {relu_index}: only one batchnorm may follow the weighted op")
    if any(model.layers[i].kind not in ("flatten", "avgpool") for i in seg[:j]):
        raise ModelError(f"segment of layer {relu_index}: unsupported op before the weighted op")
    return SegmentStructure(tuple(seg[:j]), seg[j], tail[0] if tail else None)


def fused_layer(model: ModelGraph, relu_index: int) -> tuple[np.ndarray, np.ndarray]:
    """Weighted op of a segment with its batchnorm folded in: (weight, bias) in binary64."""
    st = segment_structure(model, relu_index)
    layer = model.layers[st.weighted]
    w = np.asarray(layer.weight, np.float64)
    b = np.zeros(w.shape[0]) if layer.bias is None else np.asarray(layer.bias, np.float64)
    if st.batchnorm is not None:
        bn = model.layers[st.batchnorm]
        scale = bn.bn_scale()
        w = w * scale.reshape((-1,) + (1,) * (w.ndim - 1))
        b = b * scale + bn.bn_shift()
    return w, b


def receptive_field(model: ModelGraph, neuron: NeuronRef) -> tuple[np.ndarray, list[tuple[int, ...]]]:
    """Layer-input coordinates feeding a neuron and the matching weight indices.

    Returns flat indices into the segment input and, for each, the index of
    the corresponding entry in the weighted op's weight tensor (the row of
    the neuron's unit).  Determined from the architecture only.
    """
    model.check_neuron(neuron)
    return _receptive(model, neuron.layer_index, model.flat_index(neuron), neuron.unit)


def _receptive(model: ModelGraph, relu_index: int, flat_unit: int, unit: int):
    st = segment_structure(model, relu_index)
    layer = model.layers[st.weighted]
    if any(model.layers[i].kind == "avgpool" for i in st.pre):
        raise ModelError("receptive fields through pooling are not supported")
    w = layer.weight
    labels = np.zeros(w.shape)
    labels[unit] = np.arange(1, w[unit].size + 1).reshape(w[unit].shape)
    probe = dataclasses.replace(layer, weight=labels, bias=None)
    layers = list(model.layers)
    layers[st.weighted] = probe
    if st.batchnorm is not None:
        c = model.shapes[st.batchnorm][0]
        layers[st.batchnorm] = Layer("batchnorm", gamma=np.ones(c), beta=np.zeros(c), mean=np.zeros(c),
                                     var=np.full(c, 1.0 - BN_EPS))
    probe_model = ModelGraph(layers, model.input_shape, "binary64")
    row, _ = fuse_affine_prefix(probe_model, relu_index, [flat_unit])
    row = np.rint(row[0]).astype(np.int64)
    idx = np.flatnonzero(row)
    windex = [(unit,) + np.unravel_index(v - 1, w[unit].shape) for v in row[idx]]
    return idx, windex


def head_receptive(model: ModelGraph, unit: int):
    """Receptive field of one output-head unit (used for the last-layer fit)."""
    return _receptive(model, len(model.layers), unit, unit)
