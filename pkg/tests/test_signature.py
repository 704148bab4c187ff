import numpy as np
import pytest
from scipy.optimize import brentq

from scaextract.model import Layer, ModelGraph, NeuronRef, relu
from scaextract.oracle import Oracle, OracleConfig
from scaextract.search import NeuronKindValue, QueryLedger, SearchConfig, StateProbe, collect_critical_points
from scaextract.signature import (
    PINNED_BIAS, LinearSystem, RankDeficient, SignatureError, TooFewPoints, assemble_layer, map_to_layer_input,
    pinned_estimate, recover_always_on, recover_bias, recover_input_off, single_neuron_model, solve_signature,
    solve_signature_pivot,
)


def aligned_error(w_hat, b_hat, w, b):
    """max |theta - alpha * theta_hat| with the least-squares alpha."""
    t, th = np.append(w, b), np.append(w_hat, b_hat)
    alpha = t @ th / (th @ th)
    return np.max(np.abs(t - alpha * th)), alpha


def exact_points(f, dim, n, rng, scale=1.0):
    """Roots of f on random segments whose endpoints have differing signs (full binary64 precision)."""
    out = []
    for _ in range(200 * n):
        if len(out) == n:
            break
        x, y = rng.standard_normal((2, dim)) * scale
        fx, fy = f(x), f(y)
        if np.sign(fx) == np.sign(fy):
            continue
        t = brentq(lambda s: f(x + s * (y - x)), 0.0, 1.0, xtol=1e-300, rtol=8.9e-16, maxiter=400)
        out.append(x + t * (y - x))
    assert len(out) == n, "function has no sign change on sampled segments"
    return np.array(out)


def test_plane_example():
    pts = np.array([[1.0, 1.0], [3.0, 2.0], [-1.0, 0.0]])
    est = solve_signature(pts)
    ref = np.array([2.0, -4.0, 2.0]) / np.sqrt(20)
    got = np.append(est.weights, est.bias)
    assert np.allclose(got, ref, atol=1e-12) or np.allclose(got, -ref, atol=1e-12)
    assert np.linalg.norm(est.weights) == pytest.approx(1.0)
    assert est.residual <= 1e-12
    assert est.weights[np.argmax(np.abs(est.weights))] > 0


def test_recover_bias_example():
    w = np.array([2.0, -4.0]) / np.sqrt(20)
    assert recover_bias(w, np.array([1.0, 1.0])) == pytest.approx(2 / np.sqrt(20))


def test_random_neurons_exact_points():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 65))
        w, b = rng.standard_normal(n), 0.3 * rng.standard_normal()
        a = exact_points(lambda x: x @ w + b, n, n + 4, rng)
        est = solve_signature(a)
        err, _ = aligned_error(est.weights, est.bias, w, b)
        worst = max(worst, err)
    assert worst <= 1e-10


def test_random_neurons_delta_limited_points():
    rng = np.random.default_rng(1)
    worst = 0.0
    for i in range(100):
        n = int(rng.integers(2, 65))
        w, b = rng.standard_normal(n), 0.3 * rng.standard_normal()
        model = single_neuron_model(w, b)
        probe = StateProbe(Oracle(model, OracleConfig(ideal_state_mode=True, output_mode="confidence")),
                           QueryLedger())
        cfg = SearchConfig(seed=i)
        pts = collect_critical_points(probe, NeuronRef(1, 0), cfg.point_count(n), cfg, cfg.rng(i), n)
        est = solve_signature(pts.center)
        worst = max(worst, aligned_error(est.weights, est.bias, w, b)[0])
    assert worst <= 2.0 ** -35


def test_pivot_form_agrees_with_nullspace():
    rng = np.random.default_rng(2)
    w, b = rng.standard_normal(6), 0.5
    a = exact_points(lambda x: x @ w + b, 6, 12, rng)
    e1, e2 = solve_signature(a), solve_signature_pivot(a, 0)
    assert np.allclose(e1.weights, e2.weights, atol=1e-10)
    assert e1.bias == pytest.approx(e2.bias, abs=1e-10)


def test_nullspace_handles_zero_leading_weight():
    rng = np.random.default_rng(3)
    w, b = np.array([0.0, 1.0, -2.0]), 0.4
    a = exact_points(lambda x: x @ w + b, 3, 8, rng)
    est = solve_signature(a)
    assert aligned_error(est.weights, est.bias, w, b)[0] <= 1e-10


def test_too_few_points_and_dead_columns():
    with pytest.raises(TooFewPoints):
        solve_signature(np.ones((2, 3)))
    rng = np.random.default_rng(4)
    a = rng.standard_normal((10, 4))
    a[:, 1] = 0.0
    with pytest.raises(RankDeficient) as err:
        solve_signature(a)
    assert err.value.dead.tolist() == [False, True, False, False]
    est = solve_signature(a, allow_dead=True)
    assert est.dead[1] and est.weights[1] == 0.0


def test_raw_input_zero_column_is_the_hyperplane():
    a = np.random.default_rng(5).standard_normal((8, 3))
    a[:, 0] = 0.0
    est = solve_signature(a, drop_dead=False)
    assert np.allclose(np.abs(est.weights), [1, 0, 0], atol=1e-12) and abs(est.bias) < 1e-12


def test_rank_deficient_system_flagged():
    rng = np.random.default_rng(6)
    a = rng.standard_normal((10, 3))
    a[:, 1] = a[:, 0]
    a[:, 2] = 2 * a[:, 0] + 1.0
    with pytest.raises(RankDeficient):
        solve_signature(a)


def test_system_blocks_and_residual():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((20, 3))
    y = x @ np.array([1.0, 2.0, 3.0]) + 1.0
    sol = LinearSystem().add("x", x).add("y", y).solve()
    v = sol.vector / sol.block("y")[0]
    assert np.allclose(v, [-1, -2, -3, 1, -1], atol=1e-10)
    assert sol.residual < 1e-12 and sol.rank_ok


def _planted_always_on(rng, n_in=4, m=2):
    u, bu = rng.standard_normal((m, n_in)), 0.2 * rng.standard_normal(m)
    v, beta = rng.standard_normal(n_in), 50.0
    c, gamma, d = rng.standard_normal(m), 0.7, -0.4
    lam = lambda x: c @ relu(u @ x + bu) + gamma * (v @ x + beta) + d - gamma * beta
    pts = exact_points(lam, n_in, 20, rng)
    return pts, relu(pts @ u.T + bu), v


def test_recover_always_on_planted():
    pts, others, v = _planted_always_on(np.random.default_rng(8))
    rec = recover_always_on(others, pts)
    # 2 other neurons + 4 inputs + 1 aggregate bias
    assert sum(b.shape[1] for _, b in LinearSystem().add("o", others).add("e", pts).blocks) + 1 == 7
    err, alpha = aligned_error(rec.estimate.weights, 0.0, v, 0.0)
    assert err <= 1e-8
    assert np.isnan(rec.estimate.bias)
    assert rec.estimate.kind == NeuronKindValue.ALWAYS_ON


def test_recover_always_on_insensitive_lambda():
    rng = np.random.default_rng(9)
    u = rng.standard_normal((2, 4))
    c = np.abs(rng.standard_normal(2))
    lam = lambda x: c @ relu(u @ x) - 0.1
    pts = exact_points(lam, 4, 20, rng)
    with pytest.raises(SignatureError):
        recover_always_on(relu(pts @ u.T), pts)


def _planted_input_off(rng, n_in=4, m=2):
    u, bu = rng.standard_normal((m, n_in)), 0.2 * rng.standard_normal(m)
    v, beta = rng.standard_normal(n_in), -0.3
    c, gamma, d = np.array([1.0, -0.8]), -1.3, -0.2
    lam = lambda x: c @ relu(u @ x + bu) + gamma * relu(v @ x + beta) + d
    pts = exact_points(lam, n_in, 40, rng)
    return pts, relu(pts @ u.T + bu), pts @ v + beta > 0, v, beta


def test_recover_input_off_planted_and_negative_control():
    rng = np.random.default_rng(10)
    pts, others, active, v, beta = _planted_input_off(rng)
    assert 0.2 < active.mean() < 0.8
    rec = recover_input_off(others, pts, active)
    err, _ = aligned_error(rec.estimate.weights, rec.estimate.bias, v, beta)
    assert err <= 1e-8
    wrong = rng.permutation(active)
    bad = recover_input_off(others, pts, wrong)
    assert bad.solution.residual >= 1e3 * rec.solution.residual


def test_recover_input_off_never_active():
    rng = np.random.default_rng(11)
    pts, others, active, _, _ = _planted_input_off(rng)
    rec = recover_input_off(others, pts, np.zeros(len(pts), bool))
    assert rec.estimate.kind == NeuronKindValue.ALWAYS_OFF
    assert rec.estimate.bias == PINNED_BIAS and not rec.estimate.weights.any()


def test_map_to_layer_input():
    x = np.random.default_rng(12).standard_normal((5, 3))
    assert np.array_equal(map_to_layer_input([], x, (3,)), x)
    w = np.random.default_rng(13).standard_normal((4, 3))
    model = ModelGraph([Layer("dense", weight=w, bias=np.zeros(4)), Layer("relu"),
                        Layer("dense", weight=np.ones((1, 4)), bias=np.zeros(1))], (3,))
    got = map_to_layer_input(model.layers[:2], x, (3,))
    assert np.array_equal(got, model.layer_input(x, len(model.layers)))


def test_assemble_dense_and_pinned():
    ests = [solve_signature(np.array([[1.0, 1.0], [3.0, 2.0], [-1.0, 0.0]])).oriented(1), pinned_estimate(2)]
    layer = assemble_layer(ests, Layer("dense", weight=np.zeros((2, 2)), bias=np.zeros(2)))
    assert layer.weight.shape == (2, 2)
    assert np.allclose(np.linalg.norm(layer.weight[0]), 1.0)
    assert not layer.weight[1].any() and layer.bias[1] == PINNED_BIAS
    with pytest.raises(SignatureError):
        assemble_layer(ests[:1], Layer("dense", weight=np.zeros((2, 2)), bias=np.zeros(2)))


def test_two_layer_planted_net_end_to_end():
    """Exact points per neuron, assembled layers, head by least squares: outputs match."""
    rng = np.random.default_rng(14)
    w1, b1 = rng.standard_normal((3, 4)), 0.2 * rng.standard_normal(3)
    w2, b2 = rng.standard_normal((1, 3)), np.array([0.1])
    victim = ModelGraph([Layer("dense", weight=w1, bias=b1), Layer("relu"),
                         Layer("dense", weight=w2, bias=b2)], (4,))
    ests = []
    for i in range(3):
        a = exact_points(lambda x: x @ w1[i] + b1[i], 4, 8, rng)
        e = solve_signature(a)
        probe = rng.standard_normal(4)
        ests.append(e.oriented(1 if np.sign(e.preactivation(probe)) == np.sign(probe @ w1[i] + b1[i]) else -1))
    layer = assemble_layer(ests, victim.layers[0])
    x = rng.standard_normal((200, 4))
    h = relu(x @ layer.weight.T + layer.bias)
    design = np.hstack([h, np.ones((200, 1))])
    coef, *_ = np.linalg.lstsq(design, victim.output(x)[:, 0], rcond=None)
    xt = rng.standard_normal((500, 4))
    pred = relu(xt @ layer.weight.T + layer.bias) @ coef[:-1] + coef[-1]
    assert np.max(np.abs(pred - victim.output(xt)[:, 0])) <= 1e-8
