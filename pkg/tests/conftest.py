import numpy as np
import pytest

from scaextract.model import Layer, ModelGraph, NeuronRef
from scaextract.oracle import Oracle, OracleConfig


def line_model(w=(1.0, 0.0), b=0.0, classes=2):
    """One hidden relu neuron on a 2-D input, with a small classification head."""
    w = np.asarray(w, float)[None, :]
    head = np.vstack([np.ones((1, 1)), -np.ones((classes - 1, 1))]) if classes > 1 else np.ones((1, 1))
    return ModelGraph([Layer("dense", weight=w, bias=np.array([b])), Layer("relu"),
                       Layer("dense", weight=head, bias=np.zeros(len(head)))], (w.shape[1],))


NEURON = NeuronRef(1, 0)


@pytest.fixture
def balanced_traces():
    """Traces from a neuron active on half the inputs, with ground-truth states."""

    def make(sigma=4.0, n=10_000, gain=1.0, seed=7, precision="binary32", repeats=1):
        oracle = Oracle(line_model(), OracleConfig(precision=precision, noise_sigma=sigma, leak_gain=gain,
                                                   seed=seed, repeats=repeats))
        x = np.random.default_rng(seed).standard_normal((n, 2))
        traces = oracle.query_trace(x, NEURON)
        active = x[:, 0] >= 0
        return traces, active

    return make


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
