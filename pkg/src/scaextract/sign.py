"""Stage 3: pick which aligned cluster label means "active" for a whole layer.

After alignment only two hypotheses remain per layer.  Each one fixes the
layer's weights (the complementary mapping negates every row); the right
one is the mapping under which a next-layer neuron's critical points are
coplanar, i.e. the least-squares residual is smallest.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .signature import LinearSystem, SignatureError

log = logging.getLogger(__name__)

LOW_MARGIN = 1.0      # decades
_FLOOR = 1e-300


class SignTie(SignatureError):
    pass


@dataclass
class SignHypothesis:
    a_active: bool        # True: A-side label means active
    residual: float


@dataclass
class SignDecision:
    a_active: bool
    margin: float                 # log10 of the residual ratio
    hypotheses: tuple[SignHypothesis, SignHypothesis]
    probes: int = 1
    warning: str | None = None
    votes: list[bool] = field(default_factory=list)


def block_rank_excess(blocks: Sequence[np.ndarray], rank: int) -> float:
    """sigma_{rank+1} / sigma_1 of stacked skip blocks (0 when not enough blocks to tell)."""
    if rank <= 0 or len(blocks) < rank + 2:
        return 0.0
    s = np.linalg.svd(np.vstack(blocks), compute_uv=False)
    return float(s[rank] / s[0]) if s[0] > 0 and len(s) > rank else 0.0


def test_hypothesis(systems: Sequence[LinearSystem], skip_block: str | None = None, skip_rank: int = 0,
                    known_directions: np.ndarray | None = None) -> float:
    """Score of one hypothesis from the probe systems built under it.

    The score is the median relative residual over probes with a
    full-rank system.  When the hypothesis routes constant-state neurons
    through a skip block, the stacked blocks must also have rank
    ``skip_rank``; the excess rank is added as a second criterion.
    Rows of ``known_directions`` (weights of neurons folded into the skip
    block) are projected out of every block first.
    """
    residuals, blocks = [], []
    for sys in systems:
        sol = sys.solve()
        if not sol.rank_ok:
            continue
        residuals.append(sol.relative_residual)
        if skip_block is not None:
            w = sol.vector[:-1]
            norm = np.linalg.norm(w)
            if norm > 0:
                blocks.append(sol.block(skip_block) / norm)
    if not residuals:
        return float("nan")
    score = float(np.median(residuals))
    if skip_block is not None and blocks and known_directions is not None and len(known_directions):
        q, _ = np.linalg.qr(np.asarray(known_directions, np.float64).T)
        blocks = [b - q @ (q.T @ b) for b in blocks]
    if skip_block is not None:
        score = max(score, block_rank_excess(blocks, skip_rank))
    return score


def select_sign(residual_a: float, residual_b: float) -> SignDecision:
    """Adopt the hypothesis with the strictly lower residual."""
    ra, rb = float(residual_a), float(residual_b)
    if math.isnan(ra) or math.isnan(rb):
        raise SignatureError("hypothesis residual is undefined (no usable probe)")
    if ra == rb:
        raise SignTie(f"both hypotheses give residual {ra:g}")
    margin = abs(math.log10(max(ra, _FLOOR) / max(rb, _FLOOR)))
    hyps = (SignHypothesis(True, ra), SignHypothesis(False, rb))
    dec = SignDecision(ra < rb, margin, hyps)
    if margin < LOW_MARGIN:
        dec.warning = f"low sign margin ({margin:.2f} decades)"
        log.warning(dec.warning)
    return dec


def vote(decisions: Sequence[SignDecision]) -> SignDecision:
    """Majority over several probes; ties go to the decision with the largest margin."""
    votes = [d.a_active for d in decisions]
    n_a = sum(votes)
    if 2 * n_a == len(votes):
        best = max(decisions, key=lambda d: d.margin)
        choice = best.a_active
    else:
        choice = 2 * n_a > len(votes)
    agreeing = [d for d in decisions if d.a_active == choice]
    ref = max(agreeing, key=lambda d: d.margin)
    warn = None if ref.margin >= LOW_MARGIN else f"low sign margin after {len(decisions)} probes"
    return SignDecision(choice, ref.margin, ref.hypotheses, len(decisions), warn, votes)
