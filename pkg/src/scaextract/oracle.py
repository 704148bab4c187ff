"""Simulated embedded victim: label/score queries plus constant-time-ReLU leakage.

The leak model follows the masked ReLU ``A = ~(Z >> (w-1)) & Z``: the mask
word is all ones for a non-negative value and all zeros otherwise, and one
trace sample carries ``gain * HammingWeight(mask)`` plus white Gaussian
noise.  Every other sample is pure noise.  The same operations run for both
states, only the data differs.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import rng
from .model import ModelError, ModelGraph, NeuronRef, dtype_of, hard_label

_WORD = {"binary32": (np.int32, np.uint32, 32), "binary64": (np.int64, np.uint64, 64)}


class OracleError(RuntimeError):
    pass


def relu_mask_word(v, precision: str = "binary32") -> np.ndarray:
    """Mask word of the constant-time ReLU for value(s) ``v``.

    Reinterprets the IEEE-754 pattern as a signed word, shifts arithmetically
    by width-1 and complements: 0xFF..FF for a clear sign bit, 0 otherwise.
    """
    sint, uint, width = _WORD[precision]
    bits = np.asarray(v, dtype=dtype_of(precision)).view(sint)
    return (~(bits >> (width - 1))).view(uint)


def masked_relu_bits(v, precision: str = "binary32") -> np.ndarray:
    """Bit pattern of the masked ReLU output: mask & pattern."""
    sint, uint, _ = _WORD[precision]
    bits = np.asarray(v, dtype=dtype_of(precision)).view(uint)
    return relu_mask_word(v, precision) & bits


def hamming_weight(words: np.ndarray) -> np.ndarray:
    return np.bitwise_count(words).astype(np.int64)


@dataclass
class OracleConfig:
    precision: str = "binary64"
    output_mode: str = "hard-label"
    trace_len: int = 50
    leak_index: int = 25
    leak_gain: float = 1.0
    noise_sigma: float = 4.0
    repeats: int = 1
    seed: int = 0
    ideal_state_mode: bool = False
    dump_path: str | None = None

    def __post_init__(self):
        dtype_of(self.precision)
        if self.output_mode not in ("hard-label", "confidence"):
            raise OracleError(f"unknown output mode {self.output_mode!r}")
        if not 0 <= self.leak_index < self.trace_len:
            raise OracleError("leak_index must lie in [0, trace_len)")
        if self.noise_sigma < 0 or self.repeats < 1:
            raise OracleError("noise_sigma must be >= 0 and repeats >= 1")


@dataclass
class QueryCounter:
    label_queries: int = 0
    trace_queries: int = 0
    output_queries: int = 0

    @property
    def total(self) -> int:
        return self.label_queries + self.trace_queries + self.output_queries

    def snapshot(self) -> dict:
        return asdict(self)


# record layout of the optional trace dump
def dump_dtype(trace_len: int) -> np.dtype:
    return np.dtype([("query", "<u8"), ("layer", "<i4"), ("unit", "<i4"), ("row", "<i4"), ("col", "<i4"),
                     ("samples", "<f8", (trace_len,))])


def read_trace_dump(path, trace_len: int) -> np.ndarray:
    return np.fromfile(path, dtype=dump_dtype(trace_len))


@dataclass
class Oracle:
    """Metered victim device.

    Noise for the k-th trace ever produced is keyed by ``(seed, k)``, so the
    oracle is a serialized resource: identical query histories give
    bit-identical traces.  ``pure_traces`` is the unmetered variant keyed by
    an explicit nonce.
    """

    model: ModelGraph
    config: OracleConfig = field(default_factory=OracleConfig)
    counter: QueryCounter = field(default_factory=QueryCounter)

    def __post_init__(self):
        self.model = self.model.astype(self.config.precision)
        self._noise_counter = 0
        if self.config.dump_path:
            Path(self.config.dump_path).write_bytes(b"")

    @property
    def n_classes(self) -> int:
        return self.model.output_size

    def quantize(self, x) -> np.ndarray:
        """Round inputs to the device precision (returned as binary64)."""
        return np.asarray(x, np.float64).astype(self.model.dtype).astype(np.float64)

    def _device_input(self, x) -> np.ndarray:
        x = np.asarray(x, np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.model.input_size:
            raise ModelError(f"query of width {x.shape[1]} does not match input size {self.model.input_size}")
        return x.astype(self.model.dtype)

    def _answer(self, x):
        out = self.model.output(x)
        if self.config.output_mode == "hard-label":
            return hard_label(out)
        return out.astype(np.float64)

    # -- output queries --------------------------------------------------

    def query_label(self, x) -> np.ndarray:
        if self.config.output_mode != "hard-label":
            raise OracleError("query_label needs hard-label mode")
        xd = self._device_input(x)
        self.counter.label_queries += len(xd)
        return hard_label(self.model.output(xd))

    def query_output(self, x) -> np.ndarray:
        if self.config.output_mode != "confidence":
            raise OracleError("query_output needs confidence mode")
        xd = self._device_input(x)
        self.counter.output_queries += len(xd)
        return self.model.output(xd).astype(np.float64)

    # -- side channel ----------------------------------------------------

    def _preact(self, xd, neuron) -> np.ndarray:
        """``neuron`` is one NeuronRef for the whole batch or one per row."""
        try:
            if isinstance(neuron, NeuronRef):
                self.model.check_neuron(neuron)
                return self.model.preactivation(xd, neuron)
            return self.model.preactivation_rows(xd, list(neuron))
        except ModelError as e:
            raise OracleError(str(e)) from None

    def _leak(self, v: np.ndarray, counters: np.ndarray) -> np.ndarray:
        cfg = self.config
        n, r = counters.shape
        h = hamming_weight(relu_mask_word(v, cfg.precision)).astype(np.float64)
        flat = counters.reshape(-1)
        if cfg.noise_sigma > 0:
            traces = cfg.noise_sigma * rng.normal(cfg.seed, flat, cfg.trace_len)
        else:
            traces = np.zeros((len(flat), cfg.trace_len))
        traces[:, cfg.leak_index] += cfg.leak_gain * np.repeat(h, r)
        return traces.reshape(n, r, cfg.trace_len)

    def query_trace(self, x, neuron, return_output: bool = False):
        """Traces of shape (N, repeats, T); every repeat is one metered trace query.

        With ``return_output`` the device answer of the same inference is
        returned as well (label or score vector, per output mode).
        """
        xd = self._device_input(x)
        v = self._preact(xd, neuron)
        n, r = len(xd), self.config.repeats
        counters = np.arange(self._noise_counter, self._noise_counter + n * r, dtype=np.uint64).reshape(n, r)
        self._noise_counter += n * r
        self.counter.trace_queries += n * r
        traces = self._leak(v, counters)
        if self.config.dump_path:
            self._dump(counters, neuron, traces)
        if return_output:
            return traces, self._answer(xd)
        return traces

    def pure_traces(self, x, neuron, nonce: int) -> np.ndarray:
        """Unmetered traces keyed by an explicit nonce (one counter per input/repeat)."""
        xd = self._device_input(x)
        v = self._preact(xd, neuron)
        n, r = len(xd), self.config.repeats
        base = (1 << 63) | (int(nonce) << 24)
        counters = (np.uint64(base) + np.arange(n * r, dtype=np.uint64)).reshape(n, r)
        return self._leak(v, counters)

    def query_state_ideal(self, x, neuron, return_output: bool = False):
        """Exact state per input: True (A-side) iff the sign bit of V is clear."""
        if not self.config.ideal_state_mode:
            raise OracleError("ideal state queries need ideal_state_mode")
        xd = self._device_input(x)
        v = self._preact(xd, neuron)
        self.counter.trace_queries += len(xd)
        states = ~np.signbit(v)
        if return_output:
            return states, self._answer(xd)
        return states

    def _dump(self, counters, neuron, traces) -> None:
        n, r = traces.shape[:2]
        rows = [neuron] * n if isinstance(neuron, NeuronRef) else list(neuron)
        meta = np.array([(q.layer_index, q.unit) + (q.position or (-1, -1)) for q in rows], np.int32)
        meta = np.repeat(meta, r, axis=0)
        rec = np.zeros(n * r, dtype=dump_dtype(self.config.trace_len))
        rec["query"] = counters.reshape(-1)
        rec["layer"], rec["unit"], rec["row"], rec["col"] = meta.T
        rec["samples"] = traces.reshape(-1, self.config.trace_len)
        with open(self.config.dump_path, "ab") as f:
            rec.tofile(f)
