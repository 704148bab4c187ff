"""Stage 1: neuron states, critical-point search and neuron-kind census.

All searching happens in the victim's input space.  A ``StateProbe`` hides
how states are obtained (ideal oracle or clustered traces) and meters every
query into a ``QueryLedger``; the bisection itself is vectorized so that
many (neuron, pair) rows advance together through one forward pass.
"""

from __future__ import annotations

import enum
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .distinguisher import (
    ClusterModel, DistinguisherError, StateLabel, align_layer, classify, fit_two_clusters,
)
from .model import NeuronRef
from .oracle import Oracle

DEFAULT_RELATIVE_DELTA = {"binary64": 2.0 ** -45, "binary32": 2.0 ** -18}
ALWAYS_ON_FRACTION = 0.995
ALWAYS_OFF_FRACTION = 0.005
DEAD_COLUMN = 1e-9


class SearchError(RuntimeError):
    pass


class NotFound(SearchError):
    """No pair of inputs with differing states was found."""

    def __init__(self, message: str, active_fraction: float):
        super().__init__(message)
        self.active_fraction = active_fraction


# -- configuration -------------------------------------------------------------


@dataclass
class SearchConfig:
    delta: float | None = None            # absolute stop distance; None = relative default
    relative_delta: float | None = None   # stop at relative_delta * initial gap
    sampler: str = "normal"               # "normal" or "uniform"
    low: float = -1.0
    high: float = 1.0
    scale: float = 1.0
    max_pair_attempts: int = 128
    points_per_neuron: int | None = None  # override of the oversampling rule
    oversample_min: int = 4
    oversample_frac: float = 0.1
    max_collect_factor: int = 3
    calibration_size: int = 200
    extended_scales: int = 10
    extended_batch: int = 16
    special_batches: int = 8              # extra point batches to cover an input-off neuron's dead inputs
    seed: int = 0

    def __post_init__(self):
        if self.delta is not None and not self.delta > 0:
            raise SearchError("delta must be > 0")
        if self.relative_delta is not None and not 0 < self.relative_delta < 1:
            raise SearchError("relative_delta must lie in (0, 1)")
        if self.sampler not in ("normal", "uniform"):
            raise SearchError(f"unknown sampler {self.sampler!r}")
        if self.sampler == "uniform" and not self.low < self.high:
            raise SearchError("uniform sampler needs low < high")
        if self.max_pair_attempts < 1 or self.calibration_size < 2 or self.max_collect_factor < 1:
            raise SearchError("attempt, calibration and collection limits must be positive")

    def stop_distance(self, gap0: np.ndarray, precision: str) -> np.ndarray:
        if self.delta is not None:
            return np.full(np.shape(gap0), self.delta)
        rel = self.relative_delta or DEFAULT_RELATIVE_DELTA[precision]
        return rel * np.asarray(gap0)

    def point_count(self, n_weights: int) -> int:
        """Critical points to collect for a neuron with ``n_weights`` unknown weights."""
        if self.points_per_neuron is not None:
            if self.points_per_neuron < n_weights + 1:
                raise SearchError("points_per_neuron must cover the weights and the bias")
            return self.points_per_neuron
        return n_weights + max(self.oversample_min, math.ceil(self.oversample_frac * n_weights))

    def sample(self, rng: np.random.Generator, n: int, dim: int, scale: float = 1.0) -> np.ndarray:
        if self.sampler == "normal":
            return rng.standard_normal((n, dim)) * (self.scale * scale)
        mid, half = (self.high + self.low) / 2, (self.high - self.low) / 2
        return mid + rng.uniform(-1, 1, (n, dim)) * half * scale

    def rng(self, *key: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, *key])


# -- ledger ------------------------------------------------------------------------


class QueryLedger:
    """Oracle queries per (relu layer, unit, category)."""

    def __init__(self):
        self.counts: dict[tuple[int, int, str], int] = defaultdict(int)

    def charge(self, neuron: NeuronRef | None, category: str, n: int) -> None:
        key = (-1, -1, category) if neuron is None else (neuron.layer_index, neuron.unit, category)
        self.counts[key] += int(n)

    def total(self, category: str | None = None, layer: int | None = None, unit: int | None = None) -> int:
        return sum(v for (l, u, c), v in self.counts.items()
                   if (category is None or c == category) and (layer is None or l == layer)
                   and (unit is None or u == unit))

    def neuron_total(self, neuron: NeuronRef) -> int:
        return self.total(layer=neuron.layer_index, unit=neuron.unit)

    def rows(self) -> list[dict]:
        return [{"layer": l, "unit": u, "category": c, "queries": v} for (l, u, c), v in sorted(self.counts.items())]


# -- state probe --------------------------------------------------------------------


@dataclass
class LayerCalibration:
    neurons: list[NeuronRef]
    x: np.ndarray                 # calibration inputs (N, D)
    labels: np.ndarray            # (m, N) True = A-side after alignment
    answers: np.ndarray           # device answers for the N inputs
    degenerate: np.ndarray        # (m,) constant-state neurons (trace mode: collapsed clusters)
    alignment_flags: list[bool] = field(default_factory=list)

    @property
    def a_fraction(self) -> np.ndarray:
        return self.labels.mean(axis=1)


class StateProbe:
    """Attacker-side state queries.

    In ideal mode the state is the oracle's exact answer.  In trace mode each
    neuron gets a two-cluster model fitted on its calibration traces; models
    of one layer are aligned to a common A side and states are majority
    votes over the oracle's repeats.  ``flip_labels`` swaps A and B
    everywhere, which must not change any downstream result.
    """

    def __init__(self, oracle: Oracle, ledger: QueryLedger | None = None, flip_labels: bool = False,
                 seed: int = 0):
        self.oracle = oracle
        self.ledger = ledger if ledger is not None else QueryLedger()
        self.flip_labels = flip_labels
        self.seed = seed
        self.models: dict[NeuronRef, ClusterModel] = {}
        if not self.ideal and oracle.config.repeats % 2 == 0:
            raise SearchError("trace mode needs an odd number of repeats for majority voting")

    @property
    def ideal(self) -> bool:
        return self.oracle.config.ideal_state_mode

    @property
    def precision(self) -> str:
        return self.oracle.config.precision

    def quantize(self, x) -> np.ndarray:
        return self.oracle.quantize(x)

    def _charge(self, rows, category: str, per_row: int) -> None:
        counts: dict[NeuronRef, int] = defaultdict(int)
        for n in rows:
            counts[n] += per_row
        for n, c in counts.items():
            self.ledger.charge(n, category, c)

    def _traces(self, x, rows, category: str, batches: int = 1):
        tr, ans = [], None
        for _ in range(batches):
            t, a = self.oracle.query_trace(x, rows, return_output=True)
            tr.append(t)
            ans = a if ans is None else ans
        self._charge(rows, category, batches * self.oracle.config.repeats)
        return np.concatenate(tr, axis=1), ans

    def states(self, x, rows, category: str = "search", batches: int = 1):
        """A-side flags (one neuron per row) and the device answers."""
        rows = list(rows)
        if self.ideal:
            s, ans = self.oracle.query_state_ideal(x, rows, return_output=True)
            self._charge(rows, category, 1)
            return s ^ self.flip_labels, ans
        traces, ans = self._traces(x, rows, category, batches)
        out = np.empty(len(rows), bool)
        groups: dict[NeuronRef, list[int]] = defaultdict(list)
        for i, n in enumerate(rows):
            groups[n].append(i)
        for n, idx in groups.items():
            votes = classify(traces[idx], self.models[n])
            out[idx] = votes.sum(axis=1) * 2 > votes.shape[1]
        return out ^ self.flip_labels, ans

    def calibrate_layer(self, neurons: list[NeuronRef], x: np.ndarray, category: str = "calibration",
                        degenerate_ratio: float = 0.5) -> LayerCalibration:
        """Query every neuron of a layer on the same inputs and fix its A side."""
        n, m = len(x), len(neurons)
        xt = np.tile(x, (m, 1))
        rows = [nr for nr in neurons for _ in range(n)]
        if self.ideal:
            s, ans = self.oracle.query_state_ideal(xt, rows, return_output=True)
            self._charge(rows, category, 1)
            labels = (s ^ self.flip_labels).reshape(m, n)
            degenerate = np.all(labels, axis=1) | ~np.any(labels, axis=1)
            return LayerCalibration(list(neurons), x, labels, ans[:n], degenerate)
        traces, ans = self._traces(xt, rows, category)
        traces = traces.reshape(m, n, traces.shape[1], -1)
        fits: list[ClusterModel | None] = []
        for i in range(m):
            try:
                fits.append(fit_two_clusters(traces[i].reshape(-1, traces.shape[-1]), seed=self.seed + i))
            except DistinguisherError:
                fits.append(None)
        sep = np.array([f.separation if f is not None else 0.0 for f in fits])
        good = sep >= degenerate_ratio * np.median(sep[sep > 0]) if np.any(sep > 0) else np.zeros(m, bool)
        if not np.any(good):
            raise SearchError("no neuron of the layer shows two state clusters")
        good_idx = np.flatnonzero(good)
        flags = align_layer([fits[i] for i in good_idx])
        ref = fits[good_idx[0]]
        models = []
        for i in range(m):
            if good[i]:
                f = fits[i].swapped() if flags[list(good_idx).index(i)] else fits[i]
            else:
                f = ref
            models.append(f)
            self.models[neurons[i]] = f
        labels = np.empty((m, n), bool)
        for i in range(m):
            votes = classify(traces[i], models[i])
            labels[i] = votes.sum(axis=1) * 2 > votes.shape[1]
        labels ^= self.flip_labels
        degenerate = ~good | np.all(labels, axis=1) | ~np.any(labels, axis=1)
        return LayerCalibration(list(neurons), x, labels, ans[:n], degenerate, list(flags))


# -- critical points ----------------------------------------------------------------


@dataclass
class CriticalPoint:
    x: np.ndarray
    endpoint_states: tuple[StateLabel, StateLabel]
    gap: float
    layer_input: np.ndarray | None = None


@dataclass
class CriticalPointSet:
    """Critical points of one neuron, stored column-wise."""

    neuron: NeuronRef
    x: np.ndarray              # (K, D) final X endpoints (the returned points)
    y: np.ndarray              # (K, D) final Y endpoints
    x_state: np.ndarray        # (K,) True = X endpoint on the A side
    gap: np.ndarray            # (K,) final |X - Y|
    steps: np.ndarray          # (K,) bisection steps
    answers: np.ndarray | None = None
    layer_input: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.x)

    @property
    def center(self) -> np.ndarray:
        """Bracket midpoints: half the worst-case offset of either endpoint."""
        return (self.x + self.y) / 2

    def __getitem__(self, i: int) -> CriticalPoint:
        sx = StateLabel.A if self.x_state[i] else StateLabel.B
        sy = StateLabel.B if self.x_state[i] else StateLabel.A
        li = None if self.layer_input is None else self.layer_input[i]
        return CriticalPoint(self.x[i], (sx, sy), float(self.gap[i]), li)

    @classmethod
    def empty(cls, neuron: NeuronRef, dim: int) -> "CriticalPointSet":
        z = np.zeros((0, dim))
        return cls(neuron, z, z.copy(), np.zeros(0, bool), np.zeros(0), np.zeros(0, np.int64))

    def extend(self, other: "CriticalPointSet") -> "CriticalPointSet":
        ans = None
        if self.answers is not None and other.answers is not None:
            ans = np.concatenate([self.answers, other.answers])
        elif len(self) == 0:
            ans = other.answers
        return CriticalPointSet(self.neuron, np.vstack([self.x, other.x]), np.vstack([self.y, other.y]),
                                np.concatenate([self.x_state, other.x_state]), np.concatenate([self.gap, other.gap]),
                                np.concatenate([self.steps, other.steps]), ans)

    def save(self, path) -> None:
        """Cache file: inputs, endpoints, states and gaps in binary64."""
        n = self.neuron
        extra = {} if self.answers is None else {"answers": self.answers}
        np.savez(path, x=self.x, y=self.y, x_state=self.x_state, gap=self.gap, steps=self.steps,
                 neuron=np.array([n.layer_index, n.unit] + list(n.position or (-1, -1))), **extra)

    @classmethod
    def load(cls, path) -> "CriticalPointSet":
        with np.load(path) as f:
            l, u, r, c = (int(v) for v in f["neuron"])
            neuron = NeuronRef(l, u, None if r < 0 else (r, c))
            return cls(neuron, f["x"], f["y"], f["x_state"], f["gap"], f["steps"],
                       f["answers"] if "answers" in f else None)


def cache_path(directory, neuron: NeuronRef) -> Path:
    pos = "" if neuron.position is None else f"_{neuron.position[0]}_{neuron.position[1]}"
    return Path(directory) / f"points_L{neuron.layer_index}_{neuron.unit}{pos}.npz"


@dataclass
class BisectResult:
    x: np.ndarray
    y: np.ndarray
    x_state: np.ndarray
    gap: np.ndarray
    steps: np.ndarray
    answers: np.ndarray
    consistent: np.ndarray     # endpoint states re-verified (always True in ideal mode)


def bisect_batch(probe: StateProbe, rows: list[NeuronRef], x, y, x_state, delta, x_answers=None,
                 category: str = "search") -> BisectResult:
    """Midpoint bisection of many (neuron, X, Y) rows at once.

    Each row keeps the endpoint whose state matches the midpoint's until
    |X - Y| <= delta, or until the midpoint no longer moves at the device
    precision.  In trace mode the final endpoints are re-voted once with
    more traces; rows whose states then agree are marked inconsistent.
    """
    x = probe.quantize(x).copy()
    y = probe.quantize(y).copy()
    x_state = np.asarray(x_state, bool).copy()
    delta = np.broadcast_to(np.asarray(delta, float), (len(x),))
    n = len(x)
    steps = np.zeros(n, np.int64)
    answers = None if x_answers is None else np.array(x_answers, copy=True)
    active = np.linalg.norm(x - y, axis=1) > delta
    while np.any(active):
        idx = np.flatnonzero(active)
        mid = probe.quantize((x[idx] + y[idx]) / 2)
        stuck = np.all(mid == x[idx], axis=1) | np.all(mid == y[idx], axis=1)
        active[idx[stuck]] = False
        idx, mid = idx[~stuck], mid[~stuck]
        if len(idx) == 0:
            break
        s, ans = probe.states(mid, [rows[i] for i in idx], category)
        steps[idx] += 1
        same = s == x_state[idx]
        x[idx[same]] = mid[same]
        y[idx[~same]] = mid[~same]
        if answers is not None:
            answers[idx[same]] = ans[same]
        active[idx] = np.linalg.norm(x[idx] - y[idx], axis=1) > delta[idx]
    consistent = np.ones(n, bool)
    if not probe.ideal and n:
        both = np.vstack([x, y])
        rr = list(rows) + list(rows)
        s, _ = probe.states(both, rr, category)
        bad = ~((s[:n] == x_state) & (s[n:] != x_state))
        if np.any(bad):
            idx = np.flatnonzero(bad)
            s2, _ = probe.states(np.vstack([x[idx], y[idx]]), [rows[i] for i in idx] * 2, category, batches=3)
            k = len(idx)
            consistent[idx] = (s2[:k] == x_state[idx]) & (s2[k:] != x_state[idx])
    return BisectResult(x, y, x_state, np.linalg.norm(x - y, axis=1), steps, answers, consistent)


def bisect_critical(probe: StateProbe, neuron: NeuronRef, x, y, delta: float, category: str = "search"
                    ) -> CriticalPoint:
    """Single-pair bisection; X and Y must have differing states."""
    s, _ = probe.states(np.vstack([x, y]), [neuron, neuron], category)
    if s[0] == s[1]:
        raise SearchError("endpoints have the same state")
    r = bisect_batch(probe, [neuron], np.atleast_2d(x), np.atleast_2d(y), s[:1], delta, category=category)
    if not r.consistent[0]:
        raise SearchError("state flip inconsistency at the final endpoints")
    sx = StateLabel.A if r.x_state[0] else StateLabel.B
    sy = StateLabel.B if r.x_state[0] else StateLabel.A
    return CriticalPoint(r.x[0], (sx, sy), float(r.gap[0]))


@dataclass
class PairBatch:
    rows: list[NeuronRef]
    x: np.ndarray
    y: np.ndarray
    x_state: np.ndarray
    x_answers: np.ndarray
    found: np.ndarray
    attempts: np.ndarray
    x_draws_a: dict            # neuron -> (A-side count, draws) over the unconditioned X draws


def sample_pairs(probe: StateProbe, rows: list[NeuronRef], cfg: SearchConfig, rng: np.random.Generator,
                 dim: int, scale: float = 1.0, category: str = "search") -> PairBatch:
    """Draw X for every row, then re-draw Y until its state differs from X's."""
    n = len(rows)
    x = probe.quantize(cfg.sample(rng, n, dim, scale))
    sx, ax = probe.states(x, rows, category)
    y = np.zeros_like(x)
    found = np.zeros(n, bool)
    attempts = np.ones(n, np.int64)
    pending = np.arange(n)
    for _ in range(cfg.max_pair_attempts):
        if len(pending) == 0:
            break
        cand = probe.quantize(cfg.sample(rng, len(pending), dim, scale))
        s, _ = probe.states(cand, [rows[i] for i in pending], category)
        attempts[pending] += 1
        ok = s != sx[pending]
        y[pending[ok]] = cand[ok]
        found[pending[ok]] = True
        pending = pending[~ok]
    stats: dict[NeuronRef, list[int]] = defaultdict(lambda: [0, 0])
    for r, s in zip(rows, sx):
        stats[r][0] += int(s)
        stats[r][1] += 1
    return PairBatch(list(rows), x, y, sx, ax, found, attempts, dict(stats))


def sample_state_pair(probe: StateProbe, neuron: NeuronRef, cfg: SearchConfig, rng: np.random.Generator,
                      dim: int, scale: float = 1.0, category: str = "search"):
    """One (X, Y) pair with differing states; raises NotFound after ``max_pair_attempts``."""
    pb = sample_pairs(probe, [neuron], cfg, rng, dim, scale, category)
    if not pb.found[0]:
        raise NotFound(f"{neuron}: no state change in {cfg.max_pair_attempts} draws",
                       active_fraction=float(pb.x_state[0]))
    return pb.x[0], pb.y[0], bool(pb.x_state[0])


def collect_layer_points(probe: StateProbe, neurons: list[NeuronRef], counts: list[int], cfg: SearchConfig,
                         rng: np.random.Generator, dim: int, scale: float = 1.0, category: str = "search"
                         ) -> tuple[dict[NeuronRef, CriticalPointSet], dict[NeuronRef, int]]:
    """Critical points for several neurons, bisected together.

    Returns the point sets and the number of pairs that could not be formed
    per neuron.  Pairs that fail the final consistency vote are dropped.
    """
    rows = [n for n, c in zip(neurons, counts) for _ in range(c)]
    out = {n: CriticalPointSet.empty(n, dim) for n in neurons}
    if not rows:
        return out, {n: 0 for n in neurons}
    pb = sample_pairs(probe, rows, cfg, rng, dim, scale, category)
    keep = np.flatnonzero(pb.found)
    gap0 = np.linalg.norm(pb.x[keep] - pb.y[keep], axis=1)
    res = bisect_batch(probe, [rows[i] for i in keep], pb.x[keep], pb.y[keep], pb.x_state[keep],
                       cfg.stop_distance(gap0, probe.precision), pb.x_answers[keep], category)
    owner = np.repeat(np.arange(len(neurons)), counts)
    missing = {}
    for j, n in enumerate(neurons):
        sel = (owner[keep] == j) & res.consistent
        missing[n] = int(counts[j]) - int(sel.sum())
        out[n] = CriticalPointSet(n, res.x[sel], res.y[sel], res.x_state[sel], res.gap[sel], res.steps[sel],
                                  res.answers[sel])
    return out, missing


def collect_critical_points(probe: StateProbe, neuron: NeuronRef, count: int, cfg: SearchConfig,
                            rng: np.random.Generator, dim: int, category: str = "search") -> CriticalPointSet:
    """``count`` critical points of one neuron from fresh random pairs."""
    if count == 0:
        return CriticalPointSet.empty(neuron, dim)
    pts, missing = collect_layer_points(probe, [neuron], [count], cfg, rng, dim, category=category)
    if len(pts[neuron]) == 0:
        raise NotFound(f"{neuron}: no critical point found", active_fraction=float("nan"))
    return pts[neuron]


# -- neuron kinds -------------------------------------------------------------------


class NeuronKindValue(str, enum.Enum):
    NORMAL = "normal"
    ALWAYS_ON = "always-on"
    ALWAYS_OFF = "always-off"
    INPUT_OFF = "input-off"


@dataclass(frozen=True)
class NeuronKind:
    value: NeuronKindValue
    active_fraction: float


def classify_neuron_kind(active_fraction: float, layer_inputs: np.ndarray | None = None) -> NeuronKind:
    """Threshold census: >= 0.995 always-on, <= 0.005 always-off, a dead input column makes input-off."""
    f = float(active_fraction)
    if f >= ALWAYS_ON_FRACTION:
        return NeuronKind(NeuronKindValue.ALWAYS_ON, f)
    if f <= ALWAYS_OFF_FRACTION:
        return NeuronKind(NeuronKindValue.ALWAYS_OFF, f)
    if layer_inputs is not None and len(layer_inputs) and np.any(dead_columns(layer_inputs)):
        return NeuronKind(NeuronKindValue.INPUT_OFF, f)
    return NeuronKind(NeuronKindValue.NORMAL, f)


def dead_columns(a: np.ndarray, tol: float = DEAD_COLUMN) -> np.ndarray:
    return np.max(np.abs(a), axis=0) < tol
