"""Stage 2: per-neuron linear systems, special-neuron systems and layer assembly.

A neuron's critical points, mapped to its layer-input coordinates A, satisfy
w . A + b = 0.  The system [A | 1] z = 0 is solved by the right singular
vector of the smallest singular value (after scaling every column to unit
norm), so no coefficient has to be assumed non-zero.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import Layer, ModelGraph, apply_layer
from .search import DEAD_COLUMN, NeuronKindValue

RANK_TOL = 1e-8


class SignatureError(RuntimeError):
    pass


class TooFewPoints(SignatureError):
    pass


class RankDeficient(SignatureError):
    def __init__(self, message: str, dead: np.ndarray | None = None):
        super().__init__(message)
        self.dead = dead


@dataclass
class SystemSolution:
    vector: np.ndarray            # nullspace vector over all columns (dead ones 0), constant last
    slices: dict[str, slice]
    singular_values: np.ndarray   # of the column-scaled live matrix
    dead: np.ndarray              # dead-column mask (constant excluded)

    @property
    def residual(self) -> float:
        return float(self.singular_values[-1])

    @property
    def relative_residual(self) -> float:
        s = self.singular_values
        return float(s[-1] / s[0]) if s[0] > 0 else float("inf")

    @property
    def rank_ok(self) -> bool:
        s = self.singular_values
        return len(s) < 2 or bool(s[-2] > RANK_TOL * s[0])

    def block(self, name: str) -> np.ndarray:
        return self.vector[self.slices[name]]

    @property
    def constant(self) -> float:
        return float(self.vector[-1])


@dataclass
class LinearSystem:
    """Named column blocks plus a constant column; rows are critical points."""

    blocks: list[tuple[str, np.ndarray]] = field(default_factory=list)

    def add(self, name: str, columns) -> "LinearSystem":
        c = np.asarray(columns, np.float64)
        self.blocks.append((name, c.reshape(len(c), -1)))
        return self

    @property
    def n_rows(self) -> int:
        return len(self.blocks[0][1]) if self.blocks else 0

    def matrix(self) -> np.ndarray:
        return np.hstack([b for _, b in self.blocks] + [np.ones((self.n_rows, 1))])

    @property
    def n_unknowns(self) -> int:
        return sum(b.shape[1] for _, b in self.blocks) + 1

    def solve(self, drop_dead: bool = True) -> SystemSolution:
        """Nullspace vector of the column-scaled system.

        With ``drop_dead`` columns that never leave zero are removed (their
        coefficients are unidentifiable); otherwise they are kept and an
        all-zero column becomes an exact nullspace direction.
        """
        m = self.matrix()
        slices, start = {}, 0
        for name, b in self.blocks:
            slices[name] = slice(start, start + b.shape[1])
            start += b.shape[1]
        dead = np.zeros(m.shape[1], bool)
        if drop_dead:
            dead[:-1] = np.max(np.abs(m[:, :-1]), axis=0, initial=0.0) < DEAD_COLUMN
        live = m[:, ~dead]
        if live.shape[0] < live.shape[1]:
            raise TooFewPoints(f"{live.shape[0]} equations for {live.shape[1]} unknowns")
        norms = np.linalg.norm(live, axis=0)
        norms[norms == 0] = 1.0
        _, s, vt = np.linalg.svd(live / norms, full_matrices=False)
        z = vt[-1] / norms
        vec = np.zeros(m.shape[1])
        vec[~dead] = z
        return SystemSolution(vec, slices, s, dead[:-1])


@dataclass
class SignatureEstimate:
    weights: np.ndarray
    bias: float
    scale_sign: int = 0           # +1 / -1 once oriented, 0 while unknown
    residual: float = 0.0
    kind: NeuronKindValue = NeuronKindValue.NORMAL
    dead: np.ndarray | None = None

    def oriented(self, sign: int) -> "SignatureEstimate":
        return dataclasses.replace(self, weights=sign * self.weights, bias=sign * self.bias, scale_sign=+1)

    def preactivation(self, a: np.ndarray) -> np.ndarray:
        return np.asarray(a) @ self.weights + self.bias


def _canonical(w: np.ndarray, b: float) -> tuple[np.ndarray, float]:
    """Unit weight norm; largest-magnitude weight positive (sign still unknown)."""
    n = np.linalg.norm(w)
    if n == 0:
        raise SignatureError("zero signature")
    s = np.sign(w[np.argmax(np.abs(w))]) or 1.0
    return w * (s / n), b * (s / n)


def map_to_layer_input(prefix: Sequence[Layer], x, input_shape: Sequence[int]) -> np.ndarray:
    """Flattened output of an extracted prefix in binary64 (the input itself for an empty prefix)."""
    h = np.asarray(x, np.float64)
    h = h.reshape((len(h),) + tuple(input_shape))
    for layer in prefix:
        h = apply_layer(layer.astype(np.float64), h)
    return h.reshape(len(h), -1)


def solve_signature(a: np.ndarray, allow_dead: bool = False, drop_dead: bool = True) -> SignatureEstimate:
    """Hyperplane through the points ``a`` (rows in layer-input coordinates).

    Dead columns (never non-zero) raise ``RankDeficient`` unless
    ``allow_dead``, in which case their weights are reported as 0 and
    flagged in ``dead``.  ``drop_dead=False`` treats near-zero columns as
    ordinary data, which is right for raw inputs rather than relu outputs.
    """
    a = np.asarray(a, np.float64)
    if len(a) < a.shape[1] + 1:
        raise TooFewPoints(f"{len(a)} points for {a.shape[1]} weights and a bias")
    sol = LinearSystem().add("w", a).solve(drop_dead)
    if np.any(sol.dead) and not allow_dead:
        raise RankDeficient(f"{int(sol.dead.sum())} dead input column(s)", sol.dead)
    if not sol.rank_ok:
        raise RankDeficient("numerically rank-deficient system", sol.dead)
    w, b = _canonical(sol.block("w"), sol.constant)
    return SignatureEstimate(w, b, 0, sol.residual, NeuronKindValue.NORMAL, sol.dead)


def solve_signature_pivot(a: np.ndarray, pivot: int = 0) -> SignatureEstimate:
    """Pivoted least-squares form: fix the pivot weight to 1 and regress its column on the rest."""
    a = np.asarray(a, np.float64)
    rest = np.delete(a, pivot, axis=1)
    design = np.hstack([rest, np.ones((len(a), 1))])
    u, res, *_ = np.linalg.lstsq(design, a[:, pivot], rcond=None)
    w = np.insert(-u[:-1], pivot, 1.0)
    w, b = _canonical(w, -u[-1])
    r = float(np.sqrt(res[0])) if len(res) else 0.0
    return SignatureEstimate(w, b, 0, r)


def recover_bias(weights: np.ndarray, point_layer_input: np.ndarray) -> float:
    """Bias placing the critical point on the hyperplane."""
    return float(-np.dot(weights, point_layer_input))


@dataclass
class SpecialRecovery:
    estimate: SignatureEstimate
    solution: SystemSolution
    gamma_share: float            # |eta block| relative to the whole weight vector of lambda


def _gamma_share(sol: SystemSolution, name: str) -> float:
    total = np.linalg.norm(sol.vector[:-1])
    return float(np.linalg.norm(sol.block(name)) / total) if total > 0 else 0.0


def recover_always_on(others: np.ndarray, eta_inputs: np.ndarray, min_share: float = 1e-6) -> SpecialRecovery:
    """Signature of an always-on neuron from a next-layer neuron's critical points.

    ``others`` are the other layer activations seen by lambda, ``eta_inputs``
    the layer input of eta at the same points; eta's relu is the identity
    there, so its weights appear scaled in lambda's solution.  The bias is
    left undetermined (only the aggregate with lambda's bias is solved).
    """
    sys = LinearSystem().add("others", others).add("eta", eta_inputs)
    sol = sys.solve()
    if not sol.rank_ok:
        raise RankDeficient("always-on system is rank-deficient")
    share = _gamma_share(sol, "eta")
    if share < min_share:
        raise SignatureError("lambda is insensitive to the always-on neuron; pick another lambda")
    w = sol.block("eta")
    w, _ = _canonical(w, 0.0)
    est = SignatureEstimate(w, float("nan"), 0, sol.residual, NeuronKindValue.ALWAYS_ON)
    return SpecialRecovery(est, sol, share)


def recover_input_off(others: np.ndarray, eta_inputs: np.ndarray, eta_active: np.ndarray,
                      min_share: float = 1e-6) -> SpecialRecovery:
    """Signature of an input-off neuron through a next-layer neuron.

    Eta contributes its affine map where ``eta_active`` and
    nothing elsewhere, so the system carries the masked block
    ``eta_active * [A, 1]``.  Its bias comes out with the weights.
    """
    s = np.asarray(eta_active, bool)
    if not np.any(s):
        est = SignatureEstimate(np.zeros(eta_inputs.shape[1]), -1.0, 1, 0.0, NeuronKindValue.ALWAYS_OFF)
        return SpecialRecovery(est, None, 0.0)
    sf = s.astype(np.float64)
    sys = LinearSystem().add("others", others).add("eta", eta_inputs * sf[:, None]).add("eta_bias", sf)
    sol = sys.solve()
    if np.any(sol.dead[sol.slices["eta"]]):
        raise TooFewPoints("too few active-state equations to cover the neuron's inputs")
    if not sol.rank_ok:
        raise RankDeficient("input-off system is rank-deficient")
    share = _gamma_share(sol, "eta")
    if share < min_share:
        raise SignatureError("lambda is insensitive to the input-off neuron; pick another lambda")
    w, b = _canonical(sol.block("eta"), float(sol.block("eta_bias")[0]))
    est = SignatureEstimate(w, b, 0, sol.residual, NeuronKindValue.INPUT_OFF)
    return SpecialRecovery(est, sol, share)


# -- layer assembly ------------------------------------------------------------------


PINNED_BIAS = -1.0


def pinned_estimate(n_weights: int) -> SignatureEstimate:
    """Always-off neuron: zero weights and a negative bias keep the output at 0."""
    return SignatureEstimate(np.zeros(n_weights), PINNED_BIAS, 1, 0.0, NeuronKindValue.ALWAYS_OFF)


def assemble_layer(estimates: Sequence[SignatureEstimate], template: Layer,
                   weight_index: Sequence[Sequence[tuple[int, ...]]] | None = None) -> Layer:
    """Materialize a weighted layer (binary64, with bias) from oriented signatures.

    ``template`` supplies the op kind and geometry; for conv layers
    ``weight_index[i]`` maps the entries of estimate ``i`` into the weight
    tensor (the structural receptive field of the channel's neuron).
    Rows keep unit norm: each neuron's scale is absorbed by the next
    layer's own solve.
    """
    bias = np.array([e.bias for e in estimates], np.float64)
    if template.kind == "dense":
        w = np.vstack([e.weights for e in estimates]).astype(np.float64)
        if w.shape != template.weight.shape:
            raise SignatureError(f"assembled weight {w.shape} does not match {template.weight.shape}")
        return Layer("dense", weight=w, bias=bias)
    if template.kind == "conv2d":
        w = np.zeros(template.weight.shape)
        for e, idx in zip(estimates, weight_index):
            if e.kind == NeuronKindValue.ALWAYS_OFF and not np.any(e.weights):
                continue
            for v, ix in zip(e.weights, idx):
                w[ix] = v
        return Layer("conv2d", weight=w, bias=bias, stride=template.stride, padding=template.padding,
                     groups=template.groups)
    raise SignatureError(f"cannot assemble a {template.kind} layer")


def single_neuron_model(weights: np.ndarray, bias: float) -> ModelGraph:
    """Helper victim: one relu neuron followed by an identity readout."""
    w = np.asarray(weights, np.float64)[None, :]
    return ModelGraph([Layer("dense", weight=w, bias=np.array([bias])), Layer("relu"),
                       Layer("dense", weight=np.ones((1, 1)), bias=np.zeros(1))], (w.shape[1],))
