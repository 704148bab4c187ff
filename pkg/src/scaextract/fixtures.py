"""Architecture descriptions and random-weight victim generators."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .model import Layer, ModelError, ModelGraph, apply_layer, relu


def load_architecture(name_or_path) -> dict:
    """Read an architecture spec by bundled name (``mobilenet_short``) or file path."""
    p = Path(name_or_path)
    if p.suffix in (".yaml", ".yml", ".json") and p.exists():
        return yaml.safe_load(p.read_text())
    res = resources.files(__package__) / "architectures" / f"{name_or_path}.yaml"
    if not res.is_file():
        raise ModelError(f"unknown architecture {name_or_path!r}")
    return yaml.safe_load(res.read_text())


def bundled_architectures() -> list[str]:
    root = resources.files(__package__) / "architectures"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def expand_layers(arch: dict) -> tuple[tuple[int, ...], list[dict]]:
    """Turn the shorthand forms (``mlp: [...]``, ``dwsep``) into primitive layer specs."""
    if "mlp" in arch:
        sizes = list(arch["mlp"])
        specs = []
        for i, out in enumerate(sizes[1:]):
            specs.append({"kind": "dense", "out": out})
            if i < len(sizes) - 2:
                specs.append({"kind": "relu"})
        return (sizes[0],), specs
    specs = []
    for spec in arch["layers"]:
        if spec["kind"] == "dwsep":
            stride = spec.get("stride", 1)
            specs += [
                {"kind": "conv2d", "depthwise": True, "kernel": 3, "stride": stride, "padding": 1, "bias": False},
                {"kind": "batchnorm"},
                {"kind": "relu"},
                {"kind": "conv2d", "out": spec["out"], "kernel": 1, "stride": 1, "padding": 0, "bias": False},
                {"kind": "batchnorm"},
                {"kind": "relu"},
            ]
        else:
            specs.append(dict(spec))
    return tuple(arch["input_shape"]), specs


def generate_model(arch, seed: int = 0, precision: str = "binary64", bias_init: str = "centered",
                   calib_samples: int = 512) -> ModelGraph:
    """Random-weight victim for an architecture.

    Weights are He-normal.  With ``bias_init="centered"`` every dense bias
    (and every batchnorm running mean / variance) is set from the statistics
    of ``calib_samples`` standard-normal inputs, so hidden neurons switch
    state on a sizable share of the input distribution, the way trained
    networks with batchnorm behave.  ``bias_init="normal"`` draws dense
    biases from N(0, 0.1^2) instead.
    """
    if isinstance(arch, (str, Path)):
        arch = load_architecture(arch)
    rng = np.random.default_rng(seed)
    input_shape, specs = expand_layers(arch)
    calib = rng.standard_normal((calib_samples,) + input_shape)
    layers: list[Layer] = []
    h = calib
    shape = input_shape
    last_weighted = max(i for i, s in enumerate(specs) if s["kind"] in ("dense", "conv2d"))
    for i, spec in enumerate(specs):
        kind = spec["kind"]
        if kind == "dense":
            fan_in = int(np.prod(shape))
            w = rng.standard_normal((spec["out"], fan_in)) * np.sqrt(2.0 / fan_in)
            layer = Layer("dense", weight=w, bias=np.zeros(spec["out"]))
            if bias_init == "centered" and i != last_weighted:
                pre = apply_layer(layer, h.reshape(len(h), -1))
                b = -np.median(pre, axis=0) + 0.25 * pre.std(axis=0) * rng.standard_normal(spec["out"])
            else:
                b = 0.1 * rng.standard_normal(spec["out"])
            layer = Layer("dense", weight=w, bias=b)
        elif kind == "conv2d":
            c = shape[0]
            k = spec.get("kernel", 3)
            if spec.get("depthwise"):
                out, groups = c, c
            else:
                out, groups = spec["out"], spec.get("groups", 1)
            fan_in = (c // groups) * k * k
            w = rng.standard_normal((out, c // groups, k, k)) * np.sqrt(2.0 / fan_in)
            bias = 0.1 * rng.standard_normal(out) if spec.get("bias", False) else None
            layer = Layer("conv2d", weight=w, bias=bias, stride=spec.get("stride", 1),
                          padding=spec.get("padding", 0), groups=groups)
        elif kind == "batchnorm":
            c = shape[0]
            axes = (0,) + tuple(range(2, h.ndim))
            layer = Layer("batchnorm", gamma=rng.uniform(0.5, 1.5, c), beta=0.25 * rng.standard_normal(c),
                          mean=h.mean(axis=axes), var=h.var(axis=axes) + 1e-3)
        elif kind in ("relu", "avgpool", "flatten"):
            layer = Layer(kind)
        else:
            raise ModelError(f"unknown layer kind {kind!r}")
        layers.append(layer)
        h = apply_layer(layer, h)
        shape = h.shape[1:]
    return ModelGraph(layers, input_shape, precision)


def planted_special_mlp(precision: str = "binary64") -> ModelGraph:
    """Small regression net with one always-on, one always-off and one input-off neuron.

    Layout 6-8-6-4-1.  In hidden layer 0, unit 6 is always-on (bias +12),
    unit 7 always-off (bias -12), unit 4 is relu(x0) and unit 5 a gate
    relu(x0 - 1).  In hidden layer 1, unit 5 is input-off: its boundary sits
    near x0 = 0.5 where the gate is closed, so the gate coordinate is zero
    at all of its critical points, while the gate weight still acts when
    the neuron is well inside its active region.  Other biases are set to
    the median pre-activation over standard-normal inputs.
    """
    rng = np.random.default_rng(2024)
    d = 6
    probe = rng.standard_normal((4096, d))
    w1 = rng.standard_normal((8, d))
    w1[4:6] = 0.0
    w1[4:6, 0] = 1.0
    b1 = -np.median(probe @ w1.T, axis=0)
    b1[4], b1[5] = 0.0, -1.0
    b1[6], b1[7] = 12.0, -12.0
    h1 = relu(probe @ w1.T + b1)
    w2 = rng.standard_normal((6, 8)) / np.sqrt(8)
    w2[:, 6] *= 0.2
    w2[5] = 0.05 * rng.standard_normal(8)
    w2[5, 4], w2[5, 5], w2[5, 6] = 1.0, 3.0, 0.0
    b2 = -np.median(h1 @ w2.T, axis=0)
    b2[5] = -0.5 - np.median(h1 @ np.where(np.arange(8) < 4, w2[5], 0.0))
    h2 = relu(h1 @ w2.T + b2)
    w3 = rng.standard_normal((4, 6)) / np.sqrt(6)
    w3[:, 5] = [0.3, -0.3, 0.25, -0.25]
    b3 = -np.median(h2 @ w3.T, axis=0)
    w4 = rng.standard_normal((1, 4))
    b4 = np.zeros(1)
    layers = [Layer("dense", weight=w1, bias=b1), Layer("relu"),
              Layer("dense", weight=w2, bias=b2), Layer("relu"),
              Layer("dense", weight=w3, bias=b3), Layer("relu"),
              Layer("dense", weight=w4, bias=b4)]
    return ModelGraph(layers, (d,), precision)
