"""End-to-end extraction: Stage 1 -> 2 -> 3 per relu layer, then the output head.

Layer k's sign can only be decided with critical points of layer k+1, so
the loop runs: search(k), resolve sign of k-1 and materialize it, solve the
signatures of k.  The final hidden layer is resolved with the head fit.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .distinguisher import StateLabel
from .evaluate import align_scales, evaluate, row_errors
from .fixtures import generate_model
from .model import Layer, ModelGraph, NeuronRef, apply_layer, receptive_field, relu, segment_structure
from .modelio import load_model, save_model
from .oracle import Oracle, OracleConfig
from .search import (
    CriticalPointSet, LayerCalibration, NeuronKind, NeuronKindValue, QueryLedger, SearchConfig, StateProbe,
    DEAD_COLUMN, bisect_batch, cache_path, classify_neuron_kind, collect_layer_points,
)
from .sign import SignDecision, SignTie, select_sign, test_hypothesis, vote
from .signature import (
    LinearSystem, RankDeficient, SignatureError, SignatureEstimate, TooFewPoints, assemble_layer,
    map_to_layer_input, pinned_estimate, recover_bias, solve_signature,
)

log = logging.getLogger(__name__)

NORMAL, CONST_A, CONST_B, INPUT_OFF = "normal", "constant-A", "constant-B", "input-off"


class ExtractionError(RuntimeError):
    pass


# -- configuration -------------------------------------------------------------------


@dataclass
class HeadConfig:
    extra_queries: int = 0          # fresh labeled queries on top of the Stage-1 ones
    max_rows: int = 20000
    learning_rate: float = 0.1
    iterations: int = 2000


@dataclass
class ExperimentConfig:
    architecture: str | None = None
    model_path: str | None = None
    model_seed: int = 0
    bias_init: str = "centered"
    oracle: OracleConfig = field(default_factory=OracleConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    perfect_prefix: bool = False
    flip_labels: bool = False
    max_probes: int = 3
    special_probes: int = 8
    eval_samples: int = 10000
    eval_seed: int = 12345
    dataset_path: str | None = None
    report_path: str | None = None
    checkpoint_dir: str | None = None
    cache_dir: str | None = None

    def __post_init__(self):
        if (self.architecture is None) == (self.model_path is None):
            raise ExtractionError("give exactly one of architecture or model_path")
        if self.max_probes < 1 or self.special_probes < 1:
            raise ExtractionError("probe counts must be positive")

    def build_victim(self) -> ModelGraph:
        if self.model_path is not None:
            return load_model(self.model_path).astype(self.oracle.precision)
        return generate_model(self.architecture, seed=self.model_seed, precision=self.oracle.precision,
                              bias_init=self.bias_init)


# -- report ----------------------------------------------------------------------------


@dataclass
class LayerReport:
    index: int
    relu_layer: int
    op: str
    neurons: int
    census: dict
    queries: dict
    points: int
    max_residual: float
    sign_a_active: bool | None = None
    sign_margin: float | None = None
    sign_probes: int = 0
    sign_warning: str | None = None
    failures: list[str] = field(default_factory=list)
    max_weight_error: float | None = None
    max_bias_error: float | None = None
    mean_activation_error: float | None = None
    sign_correct: bool | None = None


@dataclass
class ExtractionReport:
    layers: list[LayerReport]
    head: dict
    total_queries: int
    stage3_queries: int
    ledger: list[dict]
    wall_clock: float
    evaluation: dict | None = None
    config: dict | None = None

    @property
    def log2_queries(self) -> float:
        return float(np.log2(self.total_queries)) if self.total_queries else float("-inf")

    @property
    def max_weight_error(self) -> float:
        errs = [l.max_weight_error for l in self.layers if l.max_weight_error is not None]
        if self.head.get("max_weight_error") is not None:
            errs.append(self.head["max_weight_error"])
        return max(errs) if errs else float("nan")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["log2_queries"] = self.log2_queries
        d["max_weight_error"] = self.max_weight_error
        return d


# -- per-layer bookkeeping -----------------------------------------------------------


@dataclass
class Segment:
    relu: int
    pre: list[Layer]
    template: Layer
    in_shape: tuple
    n_in: int
    prev_channels: int


@dataclass
class LayerWork:
    k: int
    seg: Segment
    neurons: list[NeuronRef]
    coords: list[np.ndarray]                  # receptive coordinates per neuron
    windex: list | None
    calib: LayerCalibration | None = None
    status: list[str] = field(default_factory=list)
    points: dict = field(default_factory=dict)
    est: list[SignatureEstimate | None] = field(default_factory=list)
    dead: list[np.ndarray | None] = field(default_factory=list)
    decision: SignDecision | None = None
    final: list[SignatureEstimate] = field(default_factory=list)
    kinds: list[NeuronKind] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)
    layer: Layer | None = None

    @property
    def dense(self) -> bool:
        return self.seg.template.kind == "dense"

    def idx(self, status: str) -> list[int]:
        return [i for i, s in enumerate(self.status) if s == status]

    @property
    def has_special(self) -> bool:
        return any(s != NORMAL for s in self.status)


def _segments(model: ModelGraph) -> list[Segment]:
    out = []
    prev_ch = None
    for r in list(model.relu_indices) + [len(model.layers)]:
        st = segment_structure(model, r)
        tmpl = model.layers[st.weighted]
        in_shape = model.shapes[st.weighted]
        out.append(Segment(r, [model.layers[i] for i in st.pre], tmpl, in_shape, int(np.prod(in_shape)),
                           prev_ch if prev_ch is not None else int(np.prod(model.input_shape))))
        if r < len(model.layers):
            prev_ch = model.output_shape(r)[0]
    return out


# -- the extractor ----------------------------------------------------------------------


class Extractor:
    def __init__(self, config: ExperimentConfig, victim: ModelGraph | None = None):
        self.config = config
        self.victim = victim if victim is not None else config.build_victim()
        self.oracle = Oracle(self.victim, config.oracle)
        self.ledger = QueryLedger()
        self.probe = StateProbe(self.oracle, self.ledger, flip_labels=config.flip_labels, seed=config.search.seed)
        self.truth = self.oracle.model     # instrumented copy, used only in perfect-prefix mode
        self.segments = _segments(self.truth)
        self.works: list[LayerWork] = []
        self.prefix: list[Layer] = []      # materialized hidden layers (pre-ops, weighted, relu)
        self.labeled_x: list[np.ndarray] = []
        self.labeled_y: list[np.ndarray] = []
        self.head_layer: Layer | None = None
        self.head_info: dict = {}
        self.stage3_queries = 0

    # -- coordinates ------------------------------------------------------------------

    @property
    def dim(self) -> int:
        return self.truth.input_size

    def coords(self, k: int, x) -> np.ndarray:
        """Flattened input of segment k's weighted op (k = depth addresses the head)."""
        x = np.asarray(x, np.float64)
        if self.config.perfect_prefix:
            st = segment_structure(self.truth, self.segments[k].relu)
            h, _ = self.truth._prepare(x)
            return self.truth.run(h, stop=st.weighted).reshape(len(x), -1).astype(np.float64)
        return map_to_layer_input(self.prefix + self.segments[k].pre, x, self.truth.input_shape)

    def next_features(self, k: int, layer: Layer, xk: np.ndarray) -> np.ndarray:
        """Segment k+1 weighted-op input when layer k is ``layer`` applied to coordinates ``xk``."""
        h = xk.reshape((len(xk),) + tuple(self.segments[k].in_shape))
        h = relu(apply_layer(layer, h))
        for p in self.segments[k + 1].pre:
            h = apply_layer(p, h)
        return h.reshape(len(xk), -1)

    # -- stage 1 -------------------------------------------------------------------------

    def _point_count(self, w: LayerWork, i: int) -> int:
        n = len(w.coords[i])
        if w.k > 0 and w.dense:
            p = self.works[w.k - 1]
            if p.dense and p.has_special:
                extra = sum(1 + int(p.dead[j].sum()) for j in p.idx(INPUT_OFF))
                if p.idx(CONST_A) or p.idx(CONST_B):
                    extra += p.seg.n_in
                n = max(n, len(p.idx(NORMAL)) + extra)
        return self.config.search.point_count(n)

    def stage1(self, k: int) -> LayerWork:
        cfg = self.config.search
        seg = self.segments[k]
        neurons = self.truth.neurons(seg.relu)
        if seg.template.kind == "dense":
            coords = [np.arange(seg.n_in)] * len(neurons)
            windex = None
        else:
            rf = [receptive_field(self.truth, n) for n in neurons]
            coords, windex = [r[0] for r in rf], [r[1] for r in rf]
        w = LayerWork(k, seg, neurons, coords, windex)
        self.works.append(w)
        rng = cfg.rng(1, k)
        x_cal = self.probe.quantize(cfg.sample(rng, cfg.calibration_size, self.dim))
        w.calib = self.probe.calibrate_layer(neurons, x_cal)
        self._remember(x_cal, w.calib.answers)
        frac = w.calib.a_fraction
        for i in range(len(neurons)):
            kind = classify_neuron_kind(frac[i])
            w.status.append({NeuronKindValue.ALWAYS_ON: CONST_A, NeuronKindValue.ALWAYS_OFF: CONST_B}
                            .get(kind.value, NORMAL))
        w.est = [None] * len(neurons)
        w.dead = [None] * len(neurons)
        todo = w.idx(NORMAL)
        self._collect(w, todo, [self._point_count(w, i) for i in todo], rng)
        return w

    def _collect(self, w: LayerWork, which: list[int], counts: list[int], rng) -> None:
        neurons = [w.neurons[i] for i in which]
        cache = self.config.cache_dir
        pts, _ = collect_layer_points(self.probe, neurons, counts, self.config.search, rng, self.dim)
        for i, n in zip(which, neurons):
            new = pts[n]
            self._remember(new.x, new.answers)
            w.points[n] = new if n not in w.points else w.points[n].extend(new)
            if cache:
                Path(cache).mkdir(parents=True, exist_ok=True)
                w.points[n].save(cache_path(cache, n))

    def _remember(self, x, answers) -> None:
        if answers is not None and len(x):
            self.labeled_x.append(np.asarray(x, np.float64))
            self.labeled_y.append(np.asarray(answers))

    # -- stage 2 -------------------------------------------------------------------------

    def _structural_dead(self, w: LayerWork, i: int) -> np.ndarray:
        """Coordinates fed by pinned (always-off) neurons of the previous layer."""
        if w.k == 0:
            return np.zeros(len(w.coords[i]), bool)
        p = self.works[w.k - 1]
        pinned = np.array([e.kind == NeuronKindValue.ALWAYS_OFF for e in p.final])
        per = max(w.seg.n_in // len(pinned), 1)
        return pinned[w.coords[i] // per]

    def _orient(self, w: LayerWork, i: int, est: SignatureEstimate) -> SignatureEstimate:
        """Make the estimate positive on the neuron's A-side calibration inputs."""
        a = self.coords(w.k, w.calib.x)[:, w.coords[i]]
        agree = np.mean((est.preactivation(a) > 0) == w.calib.labels[i])
        return est.oriented(1 if agree >= 0.5 else -1)

    def stage2(self, k: int) -> None:
        w = self.works[k]
        cfg = self.config.search
        rng = cfg.rng(2, k)
        pending = w.idx(NORMAL)
        base = {i: len(w.points[w.neurons[i]]) for i in pending}
        for rnd in range(cfg.max_collect_factor):
            retry = []
            for i in pending:
                sd = self._structural_dead(w, i)
                a = self.coords(k, w.points[w.neurons[i]].center)[:, w.coords[i]][:, ~sd]
                try:
                    est = solve_signature(a, drop_dead=k > 0)
                except (RankDeficient, TooFewPoints):
                    retry.append(i)
                    continue
                w.est[i] = self._orient(w, i, self._expand(est, sd))
                w.dead[i] = np.zeros(len(sd), bool)
            pending = retry
            if not pending or rnd == cfg.max_collect_factor - 1:
                break
            self._collect(w, pending, [max(base[i], 1) for i in pending], rng)
        for i in pending:
            sd = self._structural_dead(w, i)
            a = self.coords(k, w.points[w.neurons[i]].center)[:, w.coords[i]][:, ~sd]
            try:
                est = solve_signature(a, allow_dead=True, drop_dead=k > 0)
            except SignatureError as e:
                w.failures.append(f"{w.neurons[i]}: {e}")
                w.status[i] = CONST_B if w.calib.a_fraction[i] < 0.5 else CONST_A
                continue
            full = self._expand(est, sd)
            dead = np.zeros(len(sd), bool)
            dead[~sd] = est.dead
            if np.any(est.dead) and w.dense:
                w.status[i] = INPUT_OFF
            elif np.any(est.dead):
                w.failures.append(f"{w.neurons[i]}: dead inputs in a conv layer, weights left at 0")
            w.est[i] = self._orient(w, i, full)
            w.dead[i] = dead

    @staticmethod
    def _expand(est: SignatureEstimate, structural_dead: np.ndarray) -> SignatureEstimate:
        full = np.zeros(len(structural_dead))
        full[~structural_dead] = est.weights
        dead = None if est.dead is None else np.zeros(len(structural_dead), bool)
        if dead is not None:
            dead[~structural_dead] = est.dead
        return dataclasses.replace(est, weights=full, dead=dead)

    # -- stage 3 -------------------------------------------------------------------------

    def _candidate(self, w: LayerWork, a_active: bool) -> Layer:
        """Layer k under one hypothesis; non-normal neurons are zeroed (their blocks are added separately)."""
        sgn = 1.0 if a_active else -1.0
        ests = []
        for i in range(len(w.neurons)):
            if w.status[i] == NORMAL:
                ests.append(w.est[i].oriented(int(sgn)))
            else:
                ests.append(pinned_estimate(len(w.coords[i])))
        return assemble_layer(ests, w.seg.template, w.windex)

    def _special_blocks(self, w: LayerWork, a_active: bool, xk: np.ndarray, states: dict) -> list:
        """Extra column blocks for constant-state and input-off neurons of layer k."""
        blocks = []
        on = w.idx(CONST_A) if a_active else w.idx(CONST_B)
        if on:
            blocks.append(("skip", xk))
        for i in w.idx(INPUT_OFF):
            s = (states[i] if a_active else ~states[i]).astype(np.float64)
            live = ~w.dead[i]
            v = xk[:, w.coords[i]] @ w.est[i].weights + w.est[i].bias
            blocks.append((f"io{i}", np.hstack([(s * v)[:, None], s[:, None] * xk[:, w.coords[i]][:, ~live]])))
        return blocks

    def _layer_features(self, w: LayerWork, a_active: bool, xk: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Next-layer inputs under one hypothesis, and which neurons were folded into the skip block.

        With a skip block present, a neuron that is on at every row is affine
        in the skip block and the constant; its column is zeroed so the
        system stays full rank and the skip block absorbs it instead.
        """
        cand = self._candidate(w, a_active)
        feats = self.next_features(w.k, cand, xk)
        folded = np.zeros(len(w.neurons), bool)
        on = w.idx(CONST_A) if a_active else w.idx(CONST_B)
        if on and w.dense and not self.segments[w.k + 1].pre:
            pre = xk @ cand.weight.T + cand.bias
            folded = np.all(pre > 0, axis=0)
            feats = np.where(folded, 0.0, feats)
        return feats, folded

    def _system(self, w: LayerWork, a_active: bool, lam_coords, xk, states) -> tuple[LinearSystem, np.ndarray]:
        feats, folded = self._layer_features(w, a_active, xk)
        sys = LinearSystem().add("layer", feats[:, lam_coords])
        for name, b in self._special_blocks(w, a_active, xk, states):
            sys.add(name, b)
        return sys, folded

    def _special_states(self, w: LayerWork, x: np.ndarray) -> dict:
        """A-side flags of layer k's input-off neurons at the inputs ``x`` (metered)."""
        out = {}
        for i in w.idx(INPUT_OFF):
            s, _ = self.probe.states(x, [w.neurons[i]] * len(x), "special")
            out[i] = s
        return out

    def _probes(self, k: int) -> list[int]:
        nxt = self.works[k + 1]
        return [j for j in nxt.idx(NORMAL) if len(nxt.points.get(nxt.neurons[j], ())) > 0]

    def stage3(self, k: int) -> None:
        """Decide layer k's sign with layer k+1's critical points, then materialize layer k."""
        w, nxt = self.works[k], self.works[k + 1]
        probes = self._probes(k)
        if not probes:
            raise ExtractionError(f"layer {k}: no next-layer neuron with critical points to probe")
        data = {}
        for j in probes[:max(self.config.special_probes, self.config.max_probes)]:
            pts = nxt.points[nxt.neurons[j]]
            data[j] = (pts.center, self.coords(k, pts.center), nxt.coords[j])
        states = {j: self._special_states(w, data[j][0]) for j in data} if w.idx(INPUT_OFF) else {}
        before = self.oracle.counter.total
        if not w.has_special:
            decisions = []
            for j in probes[:self.config.max_probes]:
                _, xk, lc = data[j]
                r = [test_hypothesis([self._system(w, h, lc, xk, {})[0]]) for h in (True, False)]
                try:
                    decisions.append(select_sign(*r))
                except (SignTie, SignatureError) as e:
                    w.failures.append(f"probe {nxt.neurons[j]}: {e}")
                    continue
                if decisions[-1].margin >= 1.0:
                    break
            if not decisions:
                raise ExtractionError(f"layer {k}: sign undecidable")
            w.decision = decisions[-1] if len(decisions) == 1 or decisions[-1].margin >= 1.0 else vote(decisions)
            if len(decisions) > 1:
                w.decision.probes = len(decisions)
        else:
            use = list(data)[:self.config.special_probes]
            scores = []
            for h in (True, False):
                n_on = len(w.idx(CONST_A) if h else w.idx(CONST_B))
                built = [self._system(w, h, data[j][2], data[j][1], states.get(j, {})) for j in use]
                folded = np.any([f for _, f in built], axis=0)
                known = self._candidate(w, h).weight[folded] if folded.any() else None
                scores.append(test_hypothesis([b for b, _ in built], "skip" if n_on else None, n_on, known))
            w.decision = self._decide_special(w, scores)
            w.decision.probes = len(use)
        self.stage3_queries += self.oracle.counter.total - before
        self._finalize(k, w.decision.a_active, data, states)

    def _decide_special(self, w: LayerWork, scores) -> SignDecision:
        try:
            dec = select_sign(*scores)
        except SignTie:
            dec = None
        n_on = (len(w.idx(CONST_A)), len(w.idx(CONST_B)))
        if (dec is None or dec.margin < 1.0) and (n_on[0] == 0) != (n_on[1] == 0):
            # both fit: the skip block can absorb a flipped layer, prefer the hypothesis without one
            choice = n_on[0] == 0
            hyp = select_sign(*scores).hypotheses if dec is not None else None
            dec = SignDecision(choice, 0.0 if dec is None else dec.margin, hyp, warning="tie resolved without skip block")
        if dec is None:
            raise ExtractionError(f"layer {w.k}: sign undecidable")
        return dec

    # -- finalization ------------------------------------------------------------------

    def _finalize(self, k: int, a_active: bool, data: dict, states: dict, head_fit=None) -> None:
        w = self.works[k]
        sgn = 1 if a_active else -1
        final: list[SignatureEstimate] = []
        kinds: list[NeuronKind] = []
        frac = w.calib.a_fraction
        on_label = CONST_A if a_active else CONST_B
        act = frac if a_active else 1 - frac
        on_solutions = self._special_solutions(w, a_active, data, states, head_fit)
        for i in range(len(w.neurons)):
            st = w.status[i]
            if st == NORMAL:
                final.append(w.est[i].oriented(sgn))
                kinds.append(NeuronKind(NeuronKindValue.NORMAL, float(act[i])))
            elif st in (CONST_A, CONST_B) and st != on_label:
                final.append(pinned_estimate(len(w.coords[i])))
                kinds.append(NeuronKind(NeuronKindValue.ALWAYS_OFF, float(act[i])))
            elif st in (CONST_A, CONST_B):
                final.append(self._always_on(w, i, on_solutions))
                kinds.append(NeuronKind(NeuronKindValue.ALWAYS_ON, float(act[i])))
            else:
                final.append(self._input_off(w, i, sgn, on_solutions))
                kinds.append(NeuronKind(NeuronKindValue.INPUT_OFF, float(act[i])))
        w.final, w.kinds = final, kinds
        w.layer = assemble_layer(final, w.seg.template, w.windex)
        self.prefix += list(w.seg.pre) + [w.layer, Layer("relu")]
        self._checkpoint(k)

    def _special_solutions(self, w, a_active, data, states, head_fit) -> list:
        """Solved next-layer systems (or head fit coefficients) that carry layer k's special blocks."""
        if not w.has_special:
            return []
        if head_fit is not None:
            return head_fit
        for i in w.idx(INPUT_OFF):
            self._cover_input_off(w, i, a_active, data, states)
        clean, folded_sols = [], []
        for j, (x, xk, lc) in data.items():
            sys, folded = self._system(w, a_active, lc, xk, states.get(j, {}))
            try:
                sol = sys.solve()
            except SignatureError:
                continue
            if sol.rank_ok:
                (folded_sols if folded.any() else clean).append(sol)
        # a folded neuron's linear part shares the skip block; avoid those probes when possible
        return clean or folded_sols

    def _cover_input_off(self, w: LayerWork, i: int, a_active: bool, data: dict, states: dict) -> None:
        """Add critical points of one probe until neuron i is active with live dead inputs often enough."""
        if not data:
            return
        nxt = self.works[w.k + 1]
        cfg = self.config.search
        rng = cfg.rng(6, w.k, i)
        j = next(iter(data))
        n = nxt.neurons[j]
        need = int(w.dead[i].sum()) + 2
        for _ in range(cfg.special_batches):
            _, xk, lc = data[j]
            act = states[j][i] if a_active else ~states[j][i]
            dead_x = xk[act][:, w.coords[i]][:, w.dead[i]]
            if np.sum(np.max(np.abs(dead_x), axis=1, initial=0.0) > DEAD_COLUMN) >= need:
                return
            pts, _ = collect_layer_points(self.probe, [n], [self._point_count(nxt, j)], cfg, rng, self.dim,
                                          category="special")
            new = pts[n]
            self._remember(new.x, new.answers)
            nxt.points[n] = nxt.points[n].extend(new)
            more = self._special_states(w, new.center)
            states[j] = {key: np.concatenate([states[j][key], more[key]]) for key in more}
            xc = nxt.points[n].center
            data[j] = (xc, self.coords(w.k, xc), lc)

    def _best_block(self, solutions, name: str, require_live: bool = False):
        """Block with the largest share of a solution's weight norm (optionally with no dropped column)."""
        best, share = None, 0.0
        for sol in solutions:
            total = np.linalg.norm(sol.vector[:-1])
            if total == 0 or name not in sol.slices:
                continue
            if require_live and np.any(getattr(sol, "dead", np.zeros(0, bool))[sol.slices[name]]):
                continue
            s = np.linalg.norm(sol.block(name)) / total
            if s > share:
                best, share = sol.block(name), s
        return best, share

    def _always_on(self, w: LayerWork, i: int, solutions) -> SignatureEstimate:
        if not w.dense:
            w.failures.append(f"{w.neurons[i]}: always-on neuron in a conv layer is not supported; pinned")
            return pinned_estimate(len(w.coords[i]))
        on = w.idx(CONST_A) if w.status[i] == CONST_A else w.idx(CONST_B)
        if len(on) == 1:
            block, share = self._best_block(solutions, "skip")
            if block is None or share < 1e-6:
                w.failures.append(f"{w.neurons[i]}: no next-layer neuron is sensitive to it; pinned")
                return pinned_estimate(len(w.coords[i]))
            weights = block / np.linalg.norm(block)
        else:
            stack = [s.block("skip") / np.linalg.norm(s.vector[:-1]) for s in solutions if "skip" in s.slices]
            _, _, vt = np.linalg.svd(np.vstack(stack), full_matrices=False)
            weights = vt[on.index(i)]
            w.failures.append(f"{w.neurons[i]}: {len(on)} always-on neurons share one skip block; "
                              "directions are a basis of their span")
        x_cal = self.coords(w.k, w.calib.x)[:, w.coords[i]]
        bias = self._extended_bias(w, i, weights)
        if bias is None:
            v = x_cal @ weights
            if np.mean(v) < 0:
                weights, v = -weights, -v
            bias = float(-v.min() + 0.1 * (v.std() + 1.0))
            w.failures.append(f"{w.neurons[i]}: no critical point found for the bias, kept on over the data")
        elif np.mean(x_cal @ weights + bias) < 0:
            weights, bias = -weights, -bias
        return SignatureEstimate(weights, bias, 1, 0.0, NeuronKindValue.ALWAYS_ON)

    def _extended_bias(self, w: LayerWork, i: int, weights: np.ndarray) -> float | None:
        """Bias from one critical point found with a widened sampler."""
        cfg = self.config.search
        rng = cfg.rng(3, w.k, i)
        n = w.neurons[i]
        for e in range(1, cfg.extended_scales + 1):
            x = self.probe.quantize(cfg.sample(rng, cfg.extended_batch, self.dim, 2.0 ** e))
            s, ans = self.probe.states(x, [n] * len(x), "special")
            if s.all() or not s.any():
                continue
            a, b = 0, int(np.flatnonzero(s != s[0])[0])
            gap0 = np.linalg.norm(x[a] - x[b])
            r = bisect_batch(self.probe, [n], x[a:a + 1], x[b:b + 1], s[:1],
                             cfg.stop_distance(np.array([gap0]), self.probe.precision), ans[:1], "special")
            if not r.consistent[0]:
                continue
            return recover_bias(weights, self.coords(w.k, r.x)[0, w.coords[i]])
        return None

    def _input_off(self, w: LayerWork, i: int, sgn: int, solutions) -> SignatureEstimate:
        est = w.est[i].oriented(sgn)
        block, share = self._best_block(solutions, f"io{i}", require_live=True)
        if block is None or share < 1e-6 or block[0] == 0:
            w.failures.append(f"{w.neurons[i]}: input-off weights on dead inputs not recovered, left at 0")
            return est
        dead_w = block[1:] / block[0] * sgn
        weights = est.weights.copy()
        weights[w.dead[i]] = dead_w
        return dataclasses.replace(est, weights=weights, kind=NeuronKindValue.INPUT_OFF)

    # -- last hidden layer and head ------------------------------------------------------

    def _head_data(self):
        x = np.vstack(self.labeled_x)
        y = np.concatenate(self.labeled_y) if self.labeled_y[0].ndim == 1 else np.vstack(self.labeled_y)
        hc = self.config.head
        if hc.extra_queries:
            rng = self.config.search.rng(4)
            xe = self.probe.quantize(self.config.search.sample(rng, hc.extra_queries, self.dim))
            if self.oracle.config.output_mode == "hard-label":
                ye = self.oracle.query_label(xe)
            else:
                ye = self.oracle.query_output(xe)
            self.ledger.charge(None, "head", len(xe))
            x = np.vstack([x, xe])
            y = np.concatenate([y, ye]) if y.ndim == 1 else np.vstack([y, ye])
        if len(x) > hc.max_rows:
            keep = np.sort(self.config.search.rng(5).choice(len(x), hc.max_rows, replace=False))
            x, y = x[keep], y[keep]
        return x, y

    def _head_features(self, w: LayerWork, a_active: bool, xk: np.ndarray, states: dict) -> tuple:
        feats, _ = self._layer_features(w, a_active, xk)
        blocks = self._special_blocks(w, a_active, xk, states)
        names = [("layer", feats.shape[1])] + [(n, b.shape[1]) for n, b in blocks]
        return np.hstack([feats] + [b for _, b in blocks]), names

    def _fit_head(self, f: np.ndarray, y: np.ndarray):
        if self.oracle.config.output_mode == "confidence":
            return fit_least_squares(f, y)
        return fit_logistic(f, y, self.victim.output_size, self.config.head.learning_rate,
                            self.config.head.iterations)

    def last_layer(self) -> None:
        k = len(self.works) - 1
        w = self.works[k]
        x, y = self._head_data()
        xk = self.coords(k, x)
        states = self._special_states(w, x) if w.idx(INPUT_OFF) else {}
        before = self.oracle.counter.total
        fits = {}
        for h in (True, False):
            f, names = self._head_features(w, h, xk, states)
            fits[h] = (self._fit_head(f, y), names)
        try:
            dec = select_sign(fits[True][0].loss, fits[False][0].loss)
        except SignTie:
            dec = None
        if w.has_special:
            dec = self._decide_special(w, [fits[True][0].loss, fits[False][0].loss])
        if dec is None:
            raise ExtractionError("last hidden layer: sign undecidable")
        w.decision = dec
        self.stage3_queries += self.oracle.counter.total - before
        fit, names = fits[dec.a_active]
        self._finalize(k, dec.a_active, {}, states, head_fit=_head_solutions(fit, names))
        # refit on the materialized layer (always-on / input-off columns now regular)
        feats = self.coords(k + 1, x)
        fit = self._fit_head(feats, y)
        self.head_layer = Layer("dense", weight=fit.weight, bias=fit.bias)
        self.head_info = {"rows": int(len(x)), "loss": fit.loss, "train_agreement": fit.agreement,
                          "mode": self.oracle.config.output_mode}

    # -- driver ----------------------------------------------------------------------------

    def run(self) -> tuple[ModelGraph, ExtractionReport]:
        t0 = time.time()
        depth = len(self.segments) - 1
        for k in range(depth):
            self.stage1(k)
            if k > 0:
                self.stage3(k - 1)
            self.stage2(k)
        self.last_layer()
        head_seg = self.segments[-1]
        layers = self.prefix + list(head_seg.pre) + [self.head_layer]
        model = ModelGraph(layers, self.truth.input_shape, "binary64")
        if self.ledger.total() != self.oracle.counter.total:
            raise ExtractionError("query ledger does not match the oracle's counter")
        report = self._report(time.time() - t0)
        return model, report

    def _report(self, wall: float) -> ExtractionReport:
        layers = []
        for w in self.works:
            census = {v.value: 0 for v in NeuronKindValue}
            queries = {v.value: 0 for v in NeuronKindValue}
            for n, kd in zip(w.neurons, w.kinds):
                census[kd.value.value] += 1
                queries[kd.value.value] += self.ledger.neuron_total(n)
            resid = [w.est[i].residual for i in range(len(w.neurons)) if w.est[i] is not None]
            d = w.decision
            layers.append(LayerReport(
                w.k, w.seg.relu, w.seg.template.kind, len(w.neurons), census, queries,
                int(sum(len(p) for p in w.points.values())), float(max(resid, default=0.0)),
                None if d is None else bool(d.a_active),
                None if d is None else float(d.margin), 0 if d is None else d.probes,
                None if d is None else d.warning, list(w.failures)))
        return ExtractionReport(layers, dict(self.head_info), self.oracle.counter.total, self.stage3_queries,
                                self.ledger.rows(), wall)

    def _checkpoint(self, k: int) -> None:
        d = self.config.checkpoint_dir
        if not d:
            return
        Path(d).mkdir(parents=True, exist_ok=True)
        w = self.works[k]
        layers = self.prefix[:-1]  # drop the trailing relu; it is implied
        model = ModelGraph(layers, self.truth.input_shape, "binary64")
        meta = {"layer": k, "trailing_relu": True,
                "kinds": [kd.value.value for kd in w.kinds],
                "residuals": [None if e is None else e.residual for e in w.est],
                "sign_margin": None if w.decision is None else w.decision.margin,
                "queries": self.oracle.counter.snapshot()}
        save_model(model, Path(d) / f"checkpoint_layer{k}.scax", metadata=meta)


# -- head fits -----------------------------------------------------------------------------


@dataclass
class HeadFit:
    weight: np.ndarray
    bias: np.ndarray
    loss: float
    agreement: float


def fit_least_squares(f: np.ndarray, y: np.ndarray) -> HeadFit:
    """Affine least squares; loss is the residual norm relative to the centred targets."""
    y = np.asarray(y, np.float64).reshape(len(y), -1)
    design = np.hstack([f, np.ones((len(f), 1))])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = design @ coef - y
    scale = np.linalg.norm(y - y.mean(axis=0)) or 1.0
    loss = float(np.linalg.norm(resid) / scale)
    agree = float(np.mean(np.argmax(design @ coef, axis=1) == np.argmax(y, axis=1))) if y.shape[1] > 1 else 1.0
    return HeadFit(coef[:-1].T, coef[-1], loss, agree)


def fit_logistic(f: np.ndarray, labels: np.ndarray, n_classes: int, learning_rate: float = 0.1,
                 iterations: int = 2000) -> HeadFit:
    """Multinomial logistic regression by full-batch gradient descent.

    Features are standardized for the descent and the weights mapped back.
    The step is halved (and the step rejected) whenever the loss increases.
    """
    labels = np.asarray(labels, np.int64)
    missing = set(range(n_classes)) - set(np.unique(labels).tolist())
    if len(np.unique(labels)) < 2:
        raise ExtractionError("all labels identical; cannot fit the output head")
    if missing:
        log.warning("classes %s never observed in the head-fit data; consider more queries", sorted(missing))
    mu = f.mean(axis=0)
    sd = f.std(axis=0)
    sd[sd == 0] = 1.0
    z = (f - mu) / sd
    n = len(z)
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), labels] = 1.0
    w = np.zeros((n_classes, z.shape[1]))
    b = np.zeros(n_classes)

    def loss_grad(w, b):
        logits = z @ w.T + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        loss = -np.mean(np.log(p[np.arange(n), labels] + 1e-300))
        g = (p - onehot) / n
        return loss, g.T @ z, g.sum(axis=0)

    lr = learning_rate
    loss, gw, gb = loss_grad(w, b)
    for _ in range(iterations):
        nw, nb = w - lr * gw, b - lr * gb
        nloss, ngw, ngb = loss_grad(nw, nb)
        if nloss > loss:
            lr /= 2
            if lr < 1e-12:
                break
            continue
        w, b, loss, gw, gb = nw, nb, nloss, ngw, ngb
    weight = w / sd
    bias = b - weight @ mu
    agree = float(np.mean(np.argmax(f @ weight.T + bias, axis=1) == labels))
    return HeadFit(weight, bias, float(loss), agree)


@dataclass
class _HeadSolution:
    """Adapter exposing head-fit coefficients like a solved system (one per output unit)."""

    vector: np.ndarray
    slices: dict

    def block(self, name: str) -> np.ndarray:
        return self.vector[self.slices[name]]


def _head_solutions(fit: HeadFit, names) -> list:
    slices, start = {}, 0
    for name, width in names:
        slices[name] = slice(start, start + width)
        start += width
    return [_HeadSolution(np.append(row, b), slices) for row, b in zip(fit.weight, fit.bias)]


# -- public entry points ------------------------------------------------------------------


def extract_model(config: ExperimentConfig, victim: ModelGraph | None = None
                  ) -> tuple[ModelGraph, ExtractionReport]:
    """Run the full attack and evaluate the result against the victim."""
    ex = Extractor(config, victim)
    model, report = ex.run()
    attach_evaluation(ex, model, report)
    report.config = config_to_dict(config)
    if config.report_path:
        from .report import save_report
        save_report(report, config.report_path)
    return model, report


def attach_evaluation(ex: Extractor, model: ModelGraph, report: ExtractionReport) -> None:
    cfg = ex.config
    victim = ex.truth
    if cfg.perfect_prefix:
        for w, lr in zip(ex.works, report.layers):
            pinned = np.array([e.kind == NeuronKindValue.ALWAYS_OFF for e in w.final])
            err = row_errors(victim, w.seg.relu, w.layer.weight, w.layer.bias, pinned)
            lr.max_weight_error, lr.max_bias_error = err.max_weight_error, err.max_bias_error
            lr.sign_correct = err.negative_scales == 0
        return
    if cfg.dataset_path:
        from .evaluate import load_dataset
        x, labels = load_dataset(cfg.dataset_path)
    else:
        rng = np.random.default_rng(cfg.eval_seed)
        x, labels = cfg.search.sample(rng, cfg.eval_samples, victim.input_size), None
    aligned = align_scales(victim, model)
    ev = evaluate(victim, model, x, labels, aligned=aligned)
    for lr, err, act, sc in zip(report.layers, ev.layer_errors, ev.mean_activation_error, ev.sign_correct):
        lr.max_weight_error, lr.max_bias_error = err.max_weight_error, err.max_bias_error
        lr.mean_activation_error, lr.sign_correct = act, sc
    head = ev.layer_errors[-1]
    report.head.update({"max_weight_error": head.max_weight_error, "max_bias_error": head.max_bias_error})
    report.evaluation = ev.to_dict()


def config_to_dict(config: ExperimentConfig) -> dict:
    return dataclasses.asdict(config)
