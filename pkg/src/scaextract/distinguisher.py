"""Unsupervised state distinguisher over leakage traces.

Two-cluster Lloyd k-means, nearest-centroid classification, majority vote,
per-sample SNR and cross-neuron label alignment.  States are carried as
booleans: ``True`` is the A-side label, ``False`` the B-side label.  Which
side is "active" is unknown until sign recovery.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.stats import binom


class StateLabel(enum.Enum):
    A = "A-side"
    B = "B-side"


class DistinguisherError(ValueError):
    pass


@dataclass(frozen=True)
class ClusterModel:
    centroid_a: np.ndarray
    centroid_b: np.ndarray
    inertia: float

    @property
    def separation(self) -> float:
        return float(np.linalg.norm(self.centroid_a - self.centroid_b))

    def swapped(self) -> "ClusterModel":
        return ClusterModel(self.centroid_b, self.centroid_a, self.inertia)


def _lloyd(x: np.ndarray, c: np.ndarray, max_iter: int):
    assign = None
    for _ in range(max_iter):
        d = ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)
        new = np.argmin(d, axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for k in range(2):
            if np.any(assign == k):
                c[k] = x[assign == k].mean(axis=0)
    d = ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)
    assign = np.argmin(d, axis=1)
    return c, assign, float(d[np.arange(len(x)), assign].sum())


def fit_two_clusters(traces, seed: int = 0, restarts: int = 8, max_iter: int = 100) -> ClusterModel:
    """k=2 Lloyd iterations, best of ``restarts`` k-means++ seeded starts by inertia.

    The A-side label goes to the cluster holding the first trace.
    """
    x = np.asarray(traces, np.float64)
    x = x.reshape(len(x), -1)
    if len(x) < 2:
        raise DistinguisherError("need at least two traces")
    if np.all(x == x[0]):
        raise DistinguisherError("degenerate clustering: all traces identical")
    gen = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        i = gen.integers(len(x))
        d = ((x - x[i]) ** 2).sum(axis=1)
        j = gen.choice(len(x), p=d / d.sum())
        c, assign, inertia = _lloyd(x, np.stack([x[i], x[j]]).copy(), max_iter)
        if best is None or inertia < best[2]:
            best = (c, assign, inertia)
    c, assign, inertia = best
    if np.array_equal(c[0], c[1]):
        raise DistinguisherError("degenerate clustering: identical centroids")
    a = assign[0]
    return ClusterModel(c[a].copy(), c[1 - a].copy(), inertia)


def classify(traces, model: ClusterModel) -> np.ndarray | StateLabel:
    """Nearest centroid; an exact tie goes to the A side.

    A single trace of shape (T,) returns a StateLabel; a batch (..., T)
    returns booleans (True = A-side).
    """
    t = np.asarray(traces, np.float64)
    da = ((t - model.centroid_a) ** 2).sum(axis=-1)
    db = ((t - model.centroid_b) ** 2).sum(axis=-1)
    is_a = da <= db
    if t.ndim == 1:
        return StateLabel.A if is_a else StateLabel.B
    return is_a


def classify_majority(traces, model: ClusterModel) -> np.ndarray | StateLabel:
    """Majority vote over an odd number of traces (axis -2)."""
    t = np.asarray(traces, np.float64)
    n = t.shape[-2]
    if n % 2 == 0:
        raise DistinguisherError("majority vote needs an odd number of traces")
    wins = classify(t, model).sum(axis=-1) * 2 > n
    if t.ndim == 2:
        return StateLabel.A if wins else StateLabel.B
    return wins


def majority_success_rate(p: float, n: int) -> float:
    """P(majority of n independent votes is right) for per-vote accuracy p."""
    if n < 1 or n % 2 == 0:
        raise DistinguisherError("n must be a positive odd integer")
    return float(binom.sf(n // 2, n, p))


def snr(traces, labels) -> np.ndarray:
    """Variance of class means over mean class variance, per sample index.

    Zero within-class variance gives +inf where the means differ and 0 where
    they do not.
    """
    t = np.asarray(traces, np.float64)
    t = t.reshape(len(t), -1)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise DistinguisherError("SNR needs at least two classes")
    means, variances = [], []
    for c in classes:
        sel = t[labels == c]
        if len(sel) < 2:
            raise DistinguisherError(f"class {c!r} has fewer than two traces")
        means.append(sel.mean(axis=0))
        variances.append(sel.var(axis=0))
    signal = np.var(np.stack(means), axis=0)
    noise = np.mean(np.stack(variances), axis=0)
    out = np.zeros_like(signal)
    pos = noise > 0
    out[pos] = signal[pos] / noise[pos]
    out[~pos & (signal > 0)] = np.inf
    return out


def align_layer(models: list[ClusterModel]) -> list[bool]:
    """Swap flags putting every neuron's A label on the reference (first) neuron's A side."""
    if not models:
        return []
    ref = models[0]
    flags = []
    for m in models:
        keep = np.linalg.norm(m.centroid_a - ref.centroid_a) + np.linalg.norm(m.centroid_b - ref.centroid_b)
        swap = np.linalg.norm(m.centroid_a - ref.centroid_b) + np.linalg.norm(m.centroid_b - ref.centroid_a)
        flags.append(bool(keep > swap))
    return flags
