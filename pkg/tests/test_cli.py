import csv
import json

import numpy as np
import pytest

from scaextract.cli import run_cli
from scaextract.config import ConfigError, apply_overrides, config_from_dict, load_config, save_config
from scaextract.distinguisher import majority_success_rate
from scaextract.evaluate import save_dataset
from scaextract.modelio import load_model
from scaextract.report import companion


def write_config(path, **extra):
    body = {"architecture": "mlp_10_10_10_1", "ideal_oracle": True, "confidence_output": True}
    body.update(extra)
    path.write_text("\n".join(f"{k}: {json.dumps(v)}" for k, v in body.items()))
    return path


def test_extract_from_config(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", report_path=str(tmp_path / "rep.json"))
    assert run_cli(["extract", "--config", str(cfg), "--out", str(tmp_path / "m.scax")]) == 0
    out = capsys.readouterr().out
    assert "total queries" in out and "stage-3 queries: 0" in out
    rep = json.loads((tmp_path / "rep.json").read_text())
    assert sum(r["queries"] for r in rep["ledger"]) == rep["total_queries"]
    assert rep["config"]["oracle"]["ideal_state_mode"] is True
    with open(companion(tmp_path / "rep.json", "layers")) as fh:
        assert len(list(csv.DictReader(fh))) == 2
    assert load_model(tmp_path / "m.scax").output_size == 1


def test_gen_model_then_evaluate(tmp_path, capsys):
    m = tmp_path / "v.scax"
    assert run_cli(["gen-model", "--arch", "mlp_256_32_32_32_16_10", "--seed", "2", "--out", str(m)]) == 0
    x = np.random.default_rng(0).standard_normal((100, 256))
    labels = np.argmax(load_model(m).output(x), axis=1)
    save_dataset(tmp_path / "d.bin", x, labels)
    assert run_cli(["evaluate", "--victim", str(m), "--extracted", str(m), "--dataset", str(tmp_path / "d.bin"),
                    "--out", str(tmp_path / "ed.csv")]) == 0
    out = capsys.readouterr().out
    assert "fidelity: 1.0000" in out and "accuracy: 1.0000" in out
    assert (tmp_path / "ed.csv").read_text().startswith("epsilon,delta")


def test_success_curve_matches_formula(capsys):
    assert run_cli(["success-curve", "--p", "0.859", "--max-n", "15"]) == 0
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    assert [int(r["n"]) for r in rows] == list(range(1, 16, 2))
    for r in rows:
        assert float(r["success_rate"]) == pytest.approx(majority_success_rate(0.859, int(r["n"])))


def test_snr_report_peak_at_leak(tmp_path, capsys):
    assert run_cli(["snr-report", "--n", "3000", "--leak-index", "7", "--out", str(tmp_path / "snr.csv")]) == 0
    assert "peak at sample 7" in capsys.readouterr().out


def test_special_census(tmp_path, capsys):
    assert run_cli(["special-census", "--arch", "mlp_10_10_10_1", "--set", "ideal_oracle=true",
                    "--set", "confidence_output=true", "--out", str(tmp_path / "census.csv")]) == 0
    with open(tmp_path / "census.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 and "n_normal" in rows[0]


def test_invalid_config_nonzero_exit(tmp_path, capsys):
    cfg = write_config(tmp_path / "bad.yaml", oracle={"bogus": 1})
    assert run_cli(["extract", "--config", str(cfg)]) != 0
    assert "bogus" in capsys.readouterr().err
    assert run_cli(["extract", "--config", str(tmp_path / "missing.yaml")]) != 0


def test_overrides_and_round_trip(tmp_path):
    data = apply_overrides({"architecture": "mlp_10_10_10_1"}, ["oracle.noise_sigma=2.5", "search.seed=9"])
    cfg = config_from_dict(data)
    assert cfg.oracle.noise_sigma == 2.5 and cfg.search.seed == 9
    save_config(cfg, tmp_path / "c.yaml")
    back = load_config(tmp_path / "c.yaml")
    assert back == cfg


@pytest.mark.parametrize("data", [{"architecture": "x", "colour": 1}, {"architecture": "x", "oracle": 3},
                                  {"architecture": "x", "search": {"delta": -1}}, {}])
def test_config_errors(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)
