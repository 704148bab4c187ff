"""Command-line entry point: ``scaextract <command> ...``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys

import numpy as np

from .config import ConfigError, load_config
from .distinguisher import DistinguisherError, majority_success_rate, snr
from .evaluate import EvaluationError, align_scales, evaluate, load_dataset
from .extract import ExtractionError, extract_model
from .fixtures import bundled_architectures, generate_model, planted_special_mlp
from .model import ModelError, NeuronRef
from .modelio import load_model, save_model
from .oracle import Oracle, OracleConfig, OracleError
from .report import format_report, layer_rows, write_csv
from .search import SearchError



def _config(args):
    overrides = list(args.set or [])
    if getattr(args, "arch", None):
        overrides.append(f"architecture={args.arch}")
    if getattr(args, "model", None):
        overrides.append(f"model_path={args.model}")
    if getattr(args, "report", None):
        overrides.append(f"report_path={args.report}")
    return load_config(args.config, overrides)


def cmd_gen_model(args) -> int:
    if args.planted:
        model = planted_special_mlp(args.precision)
    else:
        model = generate_model(args.arch, seed=args.seed, precision=args.precision, bias_init=args.bias_init)
    save_model(model, args.out, metadata={"architecture": "planted" if args.planted else args.arch,
                                          "seed": args.seed})
    print(f"wrote {args.out}: {model.n_params()} parameters, {len(model.relu_indices)} relu layers")
    return 0


def cmd_extract(args) -> int:
    cfg = _config(args)
    model, report = extract_model(cfg)
    if args.out:
        save_model(model, args.out, metadata={"total_queries": report.total_queries})
    print(format_report(report))
    if cfg.report_path:
        print(f"report: {cfg.report_path}")
    return 0


def cmd_evaluate(args) -> int:
    victim = load_model(args.victim)
    extracted = load_model(args.extracted)
    if args.dataset:
        x, labels = load_dataset(args.dataset)
    else:
        x = np.random.default_rng(args.seed).standard_normal((args.samples, victim.input_size))
        labels = None
    ev = evaluate(victim, extracted, x, labels, aligned=align_scales(victim, extracted))
    d = ev.to_dict()
    for i, l in enumerate(d["layers"]):
        print(f"segment {i}: max weight error {l['max_weight_error']:.3g} (log2 {l['log2_max_weight_error']:.1f})")
    for k in ("fidelity", "accuracy", "hybrid_agreement"):
        if d[k] is not None:
            print(f"{k}: {d[k]:.4f}")
    print(f"max |f-g|: {d['max_output_error']:.3g}")
    if args.out:
        write_csv(args.out, [{"epsilon": e["epsilon"], "delta": e["delta"]} for e in d["epsilon_delta"]])
    return 0


def cmd_snr_report(args) -> int:
    """Profiling run on one neuron: labeled traces and the per-sample SNR."""
    victim = generate_model(args.arch, seed=args.seed, precision=args.precision)
    cfg = OracleConfig(precision=args.precision, noise_sigma=args.sigma, leak_gain=args.gain,
                       trace_len=args.trace_len, leak_index=args.leak_index, seed=args.seed)
    oracle = Oracle(victim, cfg)
    neuron = NeuronRef(victim.relu_indices[args.layer], args.unit)
    x = np.random.default_rng(args.seed).standard_normal((args.n, victim.input_size))
    traces = oracle.pure_traces(x, neuron, nonce=args.seed)[:, 0]
    labels = ~np.signbit(oracle.model.preactivation(oracle.quantize(x), neuron))
    curve = snr(traces, labels)
    peak = int(np.argmax(curve))
    off = np.delete(curve, peak)
    ratio = curve[peak] / np.median(off) if np.median(off) > 0 else float("inf")
    print(f"peak at sample {peak}: SNR {curve[peak]:.4g}, {ratio:.4g}x the median off-peak value")
    if args.out:
        write_csv(args.out, [{"sample": i, "snr": float(v)} for i, v in enumerate(curve)])
    return 0


def cmd_success_curve(args) -> int:
    rows = [{"n": n, "success_rate": majority_success_rate(args.p, n)} for n in range(1, args.max_n + 1, 2)]
    if args.out:
        write_csv(args.out, rows)
    else:
        w = csv.DictWriter(sys.stdout, fieldnames=["n", "success_rate"])
        w.writeheader()
        w.writerows(rows)
    return 0


def cmd_special_census(args) -> int:
    """Neuron-kind census and average queries per kind, per layer."""
    cfg = _config(args)
    _, report = extract_model(cfg)
    rows = []
    for r in layer_rows(report):
        row = {"layer": r["layer"]}
        row.update({k: v for k, v in r.items() if k.startswith(("n_", "avg_queries_"))})
        rows.append(row)
    for row in rows:
        print(", ".join(f"{k}={'-' if v is None else (f'{v:.1f}' if isinstance(v, float) else v)}"
                        for k, v in row.items()))
    if args.out:
        write_csv(args.out, rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scaextract", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="YAML or JSON experiment config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry, e.g. oracle.noise_sigma=2 (repeatable)")
        sp.add_argument("--arch", help="bundled architecture name or YAML path")
        sp.add_argument("--model", help="victim model file")
        sp.add_argument("--report", help="report path (JSON; CSV companions are written alongside)")

    g = sub.add_parser("gen-model", help="write a random-weight victim model")
    g.add_argument("--arch", default="mlp_10_10_10_1", help=f"one of {', '.join(bundled_architectures())}")
    g.add_argument("--planted", action="store_true", help="the small net with planted special neurons")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--precision", default="binary64", choices=["binary32", "binary64"])
    g.add_argument("--bias-init", default="centered", choices=["centered", "normal"])
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_model)

    e = sub.add_parser("extract", help="run the extraction attack")
    with_config(e)
    e.add_argument("--out", help="write the extracted model here")
    e.set_defaults(func=cmd_extract)

    v = sub.add_parser("evaluate", help="compare an extracted model with its victim")
    v.add_argument("--victim", required=True)
    v.add_argument("--extracted", required=True)
    v.add_argument("--samples", type=int, default=10000)
    v.add_argument("--seed", type=int, default=12345)
    v.add_argument("--dataset", help="dataset file (u64 N, u64 D, f8 inputs, i8 labels)")
    v.add_argument("--out", help="CSV of the (epsilon, delta) table")
    v.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("snr-report", help="per-sample SNR of simulated traces")
    s.add_argument("--arch", default="mlp_10_10_10_1")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--layer", type=int, default=0, help="relu layer (0-based)")
    s.add_argument("--unit", type=int, default=0)
    s.add_argument("--n", type=int, default=10000)
    s.add_argument("--sigma", type=float, default=4.0)
    s.add_argument("--gain", type=float, default=1.0)
    s.add_argument("--trace-len", type=int, default=50)
    s.add_argument("--leak-index", type=int, default=25)
    s.add_argument("--precision", default="binary32", choices=["binary32", "binary64"])
    s.add_argument("--out", help="CSV of the SNR curve")
    s.set_defaults(func=cmd_snr_report)

    c = sub.add_parser("success-curve", help="majority-vote success rate versus number of traces")
    c.add_argument("--p", type=float, required=True, help="single-trace accuracy")
    c.add_argument("--max-n", type=int, default=15)
    c.add_argument("--out")
    c.set_defaults(func=cmd_success_curve)

    k = sub.add_parser("special-census", help="neuron-kind census and queries per kind")
    with_config(k)
    k.add_argument("--out", help="CSV of the census")
    k.set_defaults(func=cmd_special_census)
    return p


def run_cli(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ExtractionError, EvaluationError, ModelError, OracleError, SearchError,
            DistinguisherError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
