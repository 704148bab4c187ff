"""Comparison of an extracted model against its victim.

Extracted rows are only known up to a positive scale per neuron, so every
weight comparison first rescales the extracted model layer by layer
(``align_scales``), which leaves its function unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import Layer, ModelGraph, fused_layer, hard_label, segment_structure

DEFAULT_EPSILONS = tuple(2.0 ** -k for k in (0, 4, 8, 12, 16, 20, 24, 28, 32, 36, 40))


class EvaluationError(ValueError):
    pass


def _pinned(w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return ~np.any(w.reshape(len(w), -1), axis=1) & (b < 0)


def _input_channel(weight_shape, groups: int, n_prev_channels: int, kind: str) -> np.ndarray:
    """Previous-layer channel feeding every weight entry (same shape as the weight)."""
    if kind == "dense":
        m, n = weight_shape
        per = max(n // n_prev_channels, 1)
        return np.broadcast_to(np.arange(n) // per, (m, n))
    o, i_g, kh, kw = weight_shape
    oc = np.arange(o)[:, None] // (o // groups) * i_g + np.arange(i_g)[None, :]
    return np.broadcast_to(oc[:, :, None, None], weight_shape)


@dataclass
class AlignedModel:
    model: ModelGraph
    alphas: list[np.ndarray]
    negative: list[np.ndarray]       # rows whose best scale was not positive
    pinned: list[np.ndarray]         # always-off rows (excluded from errors)
    pinned_inputs: list[np.ndarray]  # weight entries fed by a pinned neuron


def align_scales(victim: ModelGraph, extracted: ModelGraph, compensate: bool = True) -> AlignedModel:
    """Rescale extracted rows onto the victim's fused rows.

    Per neuron alpha = <theta, theta_hat> / <theta_hat, theta_hat>; the row and
    bias are multiplied by alpha and, when ``compensate``, the next layer's
    matching input columns are divided by it.  The output head is only
    column-compensated.  Always-off rows (zero weights, negative bias) keep
    alpha = 1.
    """
    if len(victim.relu_indices) != len(extracted.relu_indices):
        raise EvaluationError("victim and extracted models have different depths")
    layers = list(extracted.layers)
    alphas, negative, pinned, pinned_inputs = [], [], [], []
    prev_alpha = prev_pinned = None
    segs = list(zip(victim.relu_indices, extracted.relu_indices)) + [(len(victim.layers), len(extracted.layers))]
    for k, (rv, re_) in enumerate(segs):
        wv, _ = fused_layer(victim, rv)
        st = segment_structure(extracted, re_)
        lay = layers[st.weighted]
        w = np.array(lay.weight, np.float64)
        b = np.zeros(w.shape[0]) if lay.bias is None else np.array(lay.bias, np.float64)
        if w.shape != wv.shape:
            raise EvaluationError(f"segment {k}: weight shapes {w.shape} and {wv.shape} differ")
        fed_by_pinned = np.zeros(w.shape, bool)
        if prev_alpha is not None:
            ch = _input_channel(w.shape, lay.groups, len(prev_alpha), lay.kind)
            if compensate:
                w = w / prev_alpha[ch]
            fed_by_pinned = prev_pinned[ch]
        head = k == len(segs) - 1
        pin = _pinned(w, b) if not head else np.zeros(len(w), bool)
        alpha = np.ones(len(w))
        if not head:
            flat_v, flat_e = wv.reshape(len(wv), -1), w.reshape(len(w), -1)
            den = np.einsum("ij,ij->i", flat_e, flat_e)
            num = np.einsum("ij,ij->i", flat_v, flat_e)
            ok = ~pin & (den > 0)
            alpha[ok] = num[ok] / den[ok]
            w = w * alpha.reshape((-1,) + (1,) * (w.ndim - 1))
            b = b * alpha
        layers[st.weighted] = Layer(lay.kind, weight=w, bias=b, stride=lay.stride, padding=lay.padding,
                                    groups=lay.groups)
        alphas.append(alpha)
        negative.append(~pin & (alpha <= 0))
        pinned.append(pin)
        pinned_inputs.append(fed_by_pinned)
        prev_alpha = np.where(pin | (alpha == 0), 1.0, alpha)
        prev_pinned = pin
    model = ModelGraph(layers, extracted.input_shape, "binary64")
    return AlignedModel(model, alphas, negative, pinned, pinned_inputs)


@dataclass
class LayerError:
    max_weight_error: float
    max_bias_error: float
    negative_scales: int
    pinned: int

    @property
    def log2_weight_error(self) -> float:
        return float(np.log2(self.max_weight_error)) if self.max_weight_error > 0 else float("-inf")


def layer_errors(victim: ModelGraph, aligned: AlignedModel) -> list[LayerError]:
    """max|theta - theta_hat| per segment (hidden layers then head), pinned rows and their inputs excluded."""
    out = []
    segs = list(zip(victim.relu_indices, aligned.model.relu_indices))
    segs += [(len(victim.layers), len(aligned.model.layers))]
    for k, (rv, re_) in enumerate(segs):
        wv, bv = fused_layer(victim, rv)
        we, be = fused_layer(aligned.model, re_)
        keep_rows = ~aligned.pinned[k]
        mask = keep_rows.reshape((-1,) + (1,) * (wv.ndim - 1)) & ~aligned.pinned_inputs[k]
        dw = np.abs(wv - we)[mask]
        db = np.abs(bv - be)[keep_rows]
        out.append(LayerError(float(dw.max(initial=0.0)), float(db.max(initial=0.0)),
                              int(aligned.negative[k].sum()), int(aligned.pinned[k].sum())))
    return out


def row_errors(victim: ModelGraph, relu_index: int, weights: np.ndarray, bias: np.ndarray,
               pinned: np.ndarray | None = None) -> LayerError:
    """Per-row scale alignment only (no column compensation): used when layer inputs were exact."""
    wv, bv = fused_layer(victim, relu_index)
    wv = wv.reshape(len(wv), -1)
    we = np.asarray(weights, np.float64).reshape(len(wv), -1)
    pin = np.zeros(len(wv), bool) if pinned is None else pinned
    den = np.einsum("ij,ij->i", we, we)
    alpha = np.where(~pin & (den > 0), np.einsum("ij,ij->i", wv, we) / np.where(den > 0, den, 1), 1.0)
    dw = np.abs(wv - alpha[:, None] * we)[~pin]
    db = np.abs(bv - alpha * bias)[~pin]
    return LayerError(float(dw.max(initial=0.0)), float(db.max(initial=0.0)), int(np.sum(~pin & (alpha <= 0))),
                      int(pin.sum()))


def hybrid_model(victim: ModelGraph, aligned: ModelGraph) -> ModelGraph:
    """Aligned extracted hidden layers followed by the victim's own output head."""
    last_v = victim.relu_indices[-1]
    last_e = aligned.relu_indices[-1]
    layers = list(aligned.layers[:last_e + 1]) + [l.astype(np.float64) for l in victim.layers[last_v + 1:]]
    return ModelGraph(layers, victim.input_shape, "binary64")


@dataclass
class Evaluation:
    samples: int
    fidelity: float | None
    accuracy: float | None
    hybrid_agreement: float | None
    epsilon_delta: list[tuple[float, float]]
    max_output_error: float
    mean_activation_error: list[float]
    layer_errors: list[LayerError] = field(default_factory=list)
    sign_correct: list[bool] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "samples": self.samples, "fidelity": self.fidelity, "accuracy": self.accuracy,
            "hybrid_agreement": self.hybrid_agreement,
            "epsilon_delta": [{"epsilon": e, "delta": d} for e, d in self.epsilon_delta],
            "max_output_error": self.max_output_error,
            "mean_activation_error": self.mean_activation_error,
            "layers": [{"max_weight_error": e.max_weight_error, "log2_max_weight_error": e.log2_weight_error,
                        "max_bias_error": e.max_bias_error, "negative_scales": e.negative_scales,
                        "pinned": e.pinned} for e in self.layer_errors],
            "sign_correct": self.sign_correct,
        }


def relu_activations(model: ModelGraph, x) -> list[np.ndarray]:
    rec = model.forward(x)
    return [rec.activations[r].reshape(len(x), -1).astype(np.float64) for r in model.relu_indices]


def evaluate(victim: ModelGraph, extracted: ModelGraph, x: np.ndarray, labels: np.ndarray | None = None,
             epsilons=DEFAULT_EPSILONS, aligned: AlignedModel | None = None) -> Evaluation:
    """Fidelity, (epsilon, delta) table, activation and weight errors on the inputs ``x``."""
    x = np.asarray(x, np.float64)
    f = victim.output(x).astype(np.float64)
    g = extracted.output(x)
    f, g = f.reshape(len(x), -1), g.reshape(len(x), -1)
    diff = np.max(np.abs(f - g), axis=1)
    eps_delta = [(float(e), float(np.mean(diff > e))) for e in epsilons]
    classify = f.shape[1] >= 2
    fidelity = float(np.mean(hard_label(f) == hard_label(g))) if classify else None
    accuracy = float(np.mean(hard_label(g) == np.asarray(labels))) if labels is not None and classify else None
    if aligned is None:
        aligned = align_scales(victim, extracted)
    errors = layer_errors(victim, aligned)
    hybrid = None
    if classify:
        hybrid = float(np.mean(hard_label(hybrid_model(victim, aligned.model).output(x)) == hard_label(f)))
    act_v = relu_activations(victim, x)
    act_e = relu_activations(aligned.model, x)
    mean_act = [float(np.mean(np.abs(a - b))) for a, b in zip(act_v, act_e)]
    signs = [not bool(np.any(n)) for n in aligned.negative[:-1]]
    return Evaluation(len(x), fidelity, accuracy, hybrid, eps_delta, float(diff.max(initial=0.0)), mean_act,
                      errors, signs)


def load_dataset(path) -> tuple[np.ndarray, np.ndarray]:
    """Dataset file: ``uint64 N, uint64 D`` header, N*D little-endian binary64 inputs, N int64 labels."""
    with open(path, "rb") as fh:
        head = np.fromfile(fh, "<u8", 2)
        if len(head) != 2:
            raise EvaluationError("truncated dataset header")
        n, d = (int(v) for v in head)
        x = np.fromfile(fh, "<f8", n * d)
        y = np.fromfile(fh, "<i8", n)
    if len(x) != n * d or len(y) != n:
        raise EvaluationError("truncated dataset file")
    return x.reshape(n, d), y


def save_dataset(path, x: np.ndarray, labels: np.ndarray) -> None:
    x = np.asarray(x, "<f8")
    with open(path, "wb") as fh:
        np.array(x.shape, "<u8").tofile(fh)
        x.tofile(fh)
        np.asarray(labels, "<i8").tofile(fh)
