"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line for the terminal summary.

Extraction runs are cached per session so the sign-recovery criterion can
reuse every fixture run by the others.  The MobileNet run takes tens of
minutes on one core and is marked ``slow`` (it still runs by default).
"""

import time

import numpy as np
import pytest
from scipy.stats import norm

from conftest import ACCEPTANCE, NEURON, line_model
from scaextract.distinguisher import classify, classify_majority, fit_two_clusters, majority_success_rate, snr
from scaextract.extract import ExperimentConfig, extract_model
from scaextract.fixtures import planted_special_mlp
from scaextract.oracle import Oracle, OracleConfig, masked_relu_bits
from scaextract.search import NeuronKindValue
from test_signature import _planted_always_on, _planted_input_off, aligned_error, exact_points
from test_signature import test_random_neurons_delta_limited_points as delta_limited_check
from scaextract.signature import recover_always_on, recover_input_off, solve_signature

_RUNS: dict = {}


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE.append(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def extraction(name, arch=None, precision="binary64", victim=None, **kw):
    """Ideal-oracle, confidence-output extraction, cached by ``name``."""
    if name not in _RUNS:
        cfg = ExperimentConfig(architecture=arch, model_path="<planted>" if victim is not None else None,
                               oracle=OracleConfig(precision=precision, output_mode="confidence",
                                                   ideal_state_mode=True), **kw)
        t0 = time.time()
        model, rep = extract_model(cfg, victim)
        _RUNS[name] = (model, rep, time.time() - t0)
    return _RUNS[name]


def log2_errors(rep):
    return [float(np.log2(l.max_weight_error)) if l.max_weight_error else -np.inf for l in rep.layers]


# -- 1: mask leakage --------------------------------------------------------------------


def test_criterion_01_mask_leakage():
    rng = np.random.default_rng(1)
    t0 = time.time()
    bad = 0
    for precision, uint, ftype in (("binary32", np.uint32, np.float32), ("binary64", np.uint64, np.float64)):
        bits = rng.integers(0, np.iinfo(uint).max, 10 ** 6, dtype=uint, endpoint=True)
        v = bits.view(ftype)
        keep = ~np.isnan(v)      # relu is only defined on numbers
        ref = np.where(v > 0, v, ftype(0)).view(uint)
        bad += int(np.sum(masked_relu_bits(v, precision)[keep] != ref[keep]))
    dt = time.time() - t0
    record(1, bad == 0 and dt < 5, f"mask & pattern == relu on 2x10^6 patterns: {bad} mismatches, {dt:.2f}s")


# -- 2: distinguisher ---------------------------------------------------------------------


def _state_accuracy(sigma, repeats, n, seed):
    oracle = Oracle(line_model(), OracleConfig(precision="binary32", noise_sigma=sigma, seed=seed, repeats=repeats))
    x = np.random.default_rng(seed).standard_normal((n, 2))
    active = x[:, 0] >= 0
    return oracle.query_trace(x, NEURON), active


def test_criterion_02_distinguisher():
    cal, act = _state_accuracy(0.0, 1, 10_000, 0)
    m0 = fit_two_clusters(cal[:, 0])
    acc0 = max(np.mean(classify(cal[:, 0], m0) == act), np.mean(classify(cal[:, 0], m0) != act))

    sigma = 16 / norm.ppf(0.86)          # leak gap 32 on binary32, midpoint threshold
    cal, act = _state_accuracy(sigma, 1, 10_000, 1)
    m = fit_two_clusters(cal[:, 0])
    a_is_active = np.mean(classify(cal[:, 0], m) == act) > 0.5
    p = np.mean(classify(cal[:, 0], m) == (act if a_is_active else ~act))
    rates = {}
    for n in (7, 13):
        t, act = _state_accuracy(sigma, n, 10_000, 10 + n)
        rates[n] = np.mean(classify_majority(t, m) == (act if a_is_active else ~act))
    ok = (acc0 == 1.0 and 0.85 <= p <= 0.87 and rates[7] >= 0.99 - 0.005 and rates[13] >= 0.999 - 0.005
          and all(abs(rates[n] - majority_success_rate(p, n)) <= 0.005 for n in rates))
    record(2, ok, f"sigma=0 acc {acc0:.4f}; sigma={sigma:.2f} single {p:.4f}, "
                  f"n=7 {rates[7]:.4f}, n=13 {rates[13]:.4f} (10,000 trials)")


# -- 3: SNR -----------------------------------------------------------------------------------


def test_criterion_03_snr():
    traces, active = _state_accuracy(4.0, 1, 10_000, 3)
    s = snr(traces[:, 0], active)
    peak = int(np.argmax(s))
    ratio = s[peak] / np.median(np.delete(s, peak))
    runner_up = np.sort(s)[-2]
    record(3, peak == 25 and ratio >= 100 and s[peak] > 100 * runner_up,
           f"peak at {peak}, SNR {s[peak]:.2f}, {ratio:.3g}x median off-peak")


# -- 4: signature oracle equivalence -----------------------------------------------------------


def test_criterion_04_signature_equivalence():
    t0 = time.time()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 65))
        w, b = rng.standard_normal(n), 0.3 * rng.standard_normal()
        est = solve_signature(exact_points(lambda x: x @ w + b, n, n + 4, rng))
        worst = max(worst, aligned_error(est.weights, est.bias, w, b)[0])
    try:
        delta_limited_check()
        delta_ok = True
    except AssertionError:
        delta_ok = False
    dt = time.time() - t0
    record(4, worst <= 1e-10 and delta_ok and dt < 60,
           f"exact points worst {worst:.2e}; delta-limited <= 2^-35: {delta_ok}; {dt:.1f}s")


# -- 5, 6: end-to-end MLPs -----------------------------------------------------------------------


def test_criterion_05_end_to_end_64bit():
    cases = (("mlp_10_10_10_1", -35, 15.6), ("mlp_10_20_20_1", -35, 15.6), ("mlp_40_20_10_10_1", -30, 16.8))
    ok, parts = True, []
    for arch, bound, q in cases:
        _, rep, dt = extraction(arch, arch)
        err = max(log2_errors(rep) + [np.log2(rep.head["max_weight_error"])])
        good = err <= bound and abs(rep.log2_queries - q) <= 2
        ok &= good
        parts.append(f"{arch} err 2^{err:.1f} q 2^{rep.log2_queries:.2f} ({dt:.0f}s)")
    record(5, ok, "; ".join(parts))


def test_criterion_06_32bit():
    _, rep, _ = extraction("mlp_10_10_10_1_b32", "mlp_10_10_10_1", precision="binary32")
    err = max(log2_errors(rep))
    record(6, err <= -12 and abs(rep.log2_queries - 13.0) <= 2,
           f"binary32 10-10-10-1 err 2^{err:.1f}, queries 2^{rep.log2_queries:.2f}")


# -- 7: MobileNet -------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_07_mobilenet():
    _, rep, dt = extraction("mobilenet_short", "mobilenet_short")
    errs = log2_errors(rep)
    act = rep.evaluation["mean_activation_error"]
    finite = all(np.isfinite(a) for a in act)
    growth = [np.log10(b / a) for a, b in zip(act, act[1:]) if a > 0 and b > 0]
    hybrid = rep.evaluation["hybrid_agreement"]
    ok = (errs[0] <= -40 and finite and all(g <= 2 for g in growth) and hybrid >= 0.99 and dt <= 1.1 * 3600)
    record(7, ok, f"L0 err 2^{errs[0]:.1f}, max activation-error growth {max(growth, default=0):.2f} decades/layer, "
                  f"hybrid {hybrid:.4f}, queries 2^{rep.log2_queries:.2f}, {dt / 60:.1f} min")


# -- 8: special neurons ---------------------------------------------------------------------------


def test_criterion_08_special_neurons():
    model, rep, _ = extraction("planted", victim=planted_special_mlp())
    c0, c1 = rep.layers[0].census, rep.layers[1].census
    detected = (c0[NeuronKindValue.ALWAYS_ON.value] == 1 and c0[NeuronKindValue.ALWAYS_OFF.value] == 1
                and c1[NeuronKindValue.INPUT_OFF.value] == 1)
    pinned = [i for i, r in enumerate(model.layers[0].weight) if not r.any() and model.layers[0].bias[i] < 0]
    pipeline_err = max(l.max_weight_error for l in rep.layers)

    # exact-point recovery and the wrong-state negative control
    pts, others, v = _planted_always_on(np.random.default_rng(8))
    on_err = aligned_error(recover_always_on(others, pts).estimate.weights, 0.0, v, 0.0)[0]
    rng = np.random.default_rng(10)
    pts, others, active, v, beta = _planted_input_off(rng)
    good = recover_input_off(others, pts, active)
    off_err = aligned_error(good.estimate.weights, good.estimate.bias, v, beta)[0]
    bad = recover_input_off(others, pts, rng.permutation(active))
    control = bad.solution.residual / good.solution.residual

    ok = (detected and pinned == [7] and pipeline_err <= 1e-6 and on_err <= 1e-6 and off_err <= 1e-6
          and control >= 1e3)
    record(8, ok, f"census ok {detected}, pinned rows {pinned}, pipeline err {pipeline_err:.1e}, "
                  f"exact-point always-on {on_err:.1e} input-off {off_err:.1e}, control ratio {control:.1e}")


# -- 10: perfect-prefix ablation (the 9th aggregates every run, so it goes last) -----------------------


def test_criterion_10_perfect_prefix():
    arch = "mlp_256_32_32_32_16_10"
    _, pp, t_pp = extraction("proxy_perfect", arch, perfect_prefix=True)
    _, nm, t_nm = extraction("proxy", arch)
    e_pp, e_nm = log2_errors(pp), log2_errors(nm)
    spread = (max(e_pp) - min(e_pp)) * np.log10(2)
    growing = all(b > a for a, b in zip(e_nm, e_nm[1:]))
    record(10, spread <= 2 and growing and t_pp < 600,
           f"perfect-prefix log2 errs {[round(e, 1) for e in e_pp]} (spread {spread:.2f} decades, {t_pp:.0f}s); "
           f"normal {[round(e, 1) for e in e_nm]}")


def test_criterion_09_sign_recovery():
    # make sure the non-slow fixtures exist even when run alone
    for name, arch, kw in (("mlp_10_10_10_1", "mlp_10_10_10_1", {}), ("proxy", "mlp_256_32_32_32_16_10", {})):
        extraction(name, arch, **kw)
    extraction("planted", victim=planted_special_mlp())
    wrong, stage3, unbalanced = [], 0, []
    for name, (_, rep, _) in sorted(_RUNS.items()):
        wrong += [f"{name}:{l.index}" for l in rep.layers if not l.sign_correct]
        stage3 += rep.stage3_queries
        if sum(r["queries"] for r in rep.ledger) != rep.total_queries:
            unbalanced.append(name)
    n_layers = sum(len(r.layers) for _, r, _ in _RUNS.values())
    record(9, not wrong and stage3 == 0 and not unbalanced,
           f"{n_layers} layers over {len(_RUNS)} runs, wrong signs {wrong or 'none'}, stage-3 queries {stage3}")
