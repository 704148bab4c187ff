import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scaextract.evaluate import (
    EvaluationError, align_scales, evaluate, hybrid_model, load_dataset, row_errors, save_dataset,
)
from scaextract.fixtures import generate_model
from scaextract.model import Layer, ModelGraph


def rescaled(model, factors):
    """Same function: hidden rows times f, next-layer columns divided by f."""
    layers = list(model.layers)
    dense = [i for i, l in enumerate(layers) if l.kind == "dense"]
    for i, f in zip(dense, factors):
        l = layers[i]
        layers[i] = Layer("dense", weight=l.weight * f[:, None], bias=l.bias * f)
        n = layers[dense[dense.index(i) + 1]]
        layers[dense[dense.index(i) + 1]] = Layer("dense", weight=n.weight / f[None, :], bias=n.bias)
    return ModelGraph(layers, model.input_shape, "binary64")


def test_halved_model_aligns_with_alpha_two():
    victim = generate_model("mlp_10_10_10_1", seed=0)
    half = rescaled(victim, [np.full(10, 0.5), np.full(10, 0.5)])
    al = align_scales(victim, half)
    assert np.allclose(al.alphas[0], 2.0) and np.allclose(al.alphas[1], 2.0)
    ev = evaluate(victim, half, np.random.default_rng(0).standard_normal((500, 10)), aligned=al)
    assert all(e.max_weight_error <= 1e-14 and e.max_bias_error <= 1e-14 for e in ev.layer_errors)
    assert ev.max_output_error <= 1e-12 and ev.sign_correct == [True, True]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_positive_rescaling_is_invisible(seed):
    rng = np.random.default_rng(seed)
    victim = generate_model("mlp_10_10_10_1", seed=seed % 7)
    other = rescaled(victim, [rng.uniform(0.1, 10, 10), rng.uniform(0.1, 10, 10)])
    errs = evaluate(victim, other, rng.standard_normal((50, 10))).layer_errors
    assert max(e.max_weight_error for e in errs) <= 1e-12


def test_negative_scale_flagged():
    victim = generate_model("mlp_10_10_10_1", seed=1)
    f = np.ones(10)
    f[3] = -1.0
    flipped = rescaled(victim, [f, np.ones(10)])
    al = align_scales(victim, flipped)
    assert al.negative[0].tolist() == [i == 3 for i in range(10)]
    assert evaluate(victim, flipped, np.zeros((1, 10)), aligned=al).sign_correct == [False, True]


def test_identical_model_fidelity_one():
    victim = generate_model("mlp_256_32_32_32_16_10", seed=0)
    x = np.random.default_rng(1).standard_normal((1000, 256))
    labels = np.argmax(victim.output(x), axis=1)
    ev = evaluate(victim, victim, x, labels)
    assert ev.fidelity == 1.0 and ev.accuracy == 1.0 and ev.hybrid_agreement == 1.0
    assert all(d == 0.0 for _, d in ev.epsilon_delta)
    assert ev.mean_activation_error == [0.0] * 4


def test_epsilon_delta_monotone():
    victim = generate_model("mlp_256_32_32_32_16_10", seed=0)
    rng = np.random.default_rng(2)
    noisy = ModelGraph([Layer(l.kind, weight=None if l.weight is None else l.weight + 1e-6 * rng.standard_normal(l.weight.shape),
                              bias=l.bias) for l in victim.layers], victim.input_shape)
    ev = evaluate(victim, noisy, rng.standard_normal((500, 256)))
    deltas = [d for _, d in ev.epsilon_delta]
    assert deltas == sorted(deltas) and deltas[0] == 0.0 and deltas[-1] == 1.0


def test_hybrid_uses_victim_head():
    victim = generate_model("mlp_10_10_10_1", seed=0)
    wrong_head = ModelGraph(list(victim.layers[:-1]) + [Layer("dense", weight=np.zeros((1, 10)), bias=np.zeros(1))],
                            victim.input_shape)
    h = hybrid_model(victim, wrong_head)
    x = np.random.default_rng(3).standard_normal((20, 10))
    assert np.allclose(h.output(x), victim.output(x))


def test_row_errors_ignore_column_scale():
    victim = generate_model("mlp_10_10_10_1", seed=2)
    w, b = victim.layers[2].weight, victim.layers[2].bias
    err = row_errors(victim, 3, 3.0 * w, 3.0 * b)
    assert err.max_weight_error <= 1e-15 and err.negative_scales == 0


def test_depth_mismatch_rejected():
    with pytest.raises(EvaluationError):
        align_scales(generate_model("mlp_10_10_10_1"), generate_model("mlp_784_32_1"))


def test_dataset_round_trip(tmp_path):
    x = np.random.default_rng(4).standard_normal((7, 3))
    y = np.arange(7) % 3
    p = tmp_path / "d.bin"
    save_dataset(p, x, y)
    raw = p.read_bytes()
    assert len(raw) == 16 + 8 * 21 + 8 * 7
    assert np.frombuffer(raw[:16], "<u8").tolist() == [7, 3]
    bx, by = load_dataset(p)
    assert np.array_equal(bx, x) and np.array_equal(by, y)
    p.write_bytes(raw[:-8])
    with pytest.raises(EvaluationError):
        load_dataset(p)
