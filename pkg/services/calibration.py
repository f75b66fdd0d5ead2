"""Empirical probes for top-K calibration.

A probe compares the minimum conditional risk over a cubic grid of score
vectors with the minimum over the grid points that are NOT top-K preserving
with respect to pi. A strictly positive gap is consistent with calibration;
a gap of zero on the grid is evidence against it, never a proof.
"""
import dataclasses
import logging
from typing import Callable, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd

from services.errors import InvalidArgumentError
from services.scores import as_scores, batch_top_k, check_k, top_k

logger = logging.getLogger(__name__)

DEFAULT_GRID_RADIUS = 3.0
DEFAULT_GRID_STEPS = 61
MAX_PROBE_CLASSES = 4
MAX_GRID_POINTS = 20_000_000
GRID_CHUNK = 50_000


@dataclasses.dataclass(frozen=True)
class ConditionalDistribution:
    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size < 2:
            raise InvalidArgumentError(f"pi must be a 1-D vector of length >= 2, got shape {p.shape}")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise InvalidArgumentError("pi has negative or non-finite entries")
        if abs(p.sum() - 1.0) > 1e-12:
            raise InvalidArgumentError(f"pi must sum to 1, sums to {p.sum()!r}")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def L(self) -> int:
        return self.probs.shape[0]


def as_distribution(pi) -> ConditionalDistribution:
    return pi if isinstance(pi, ConditionalDistribution) else ConditionalDistribution(pi)


@dataclasses.dataclass(frozen=True)
class ProbeReport:
    loss: str
    K: int
    pi: np.ndarray
    unrestricted_min: float
    restricted_min: float
    gap: float
    unrestricted_argmin: np.ndarray
    restricted_argmin: np.ndarray


# ======================
# PREDICATE AND RISK
# ======================

def batch_top_k_preserving(S, y_ref, K: int) -> np.ndarray:
    """Row-wise top-K preserving test of each row of S with respect to y_ref."""
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    y_ref = np.asarray(y_ref, dtype=np.float64)
    L = y_ref.shape[0]
    if S.shape[-1] != L:
        raise InvalidArgumentError(f"length mismatch: {S.shape[-1]} vs {L}")
    K = check_k(K, L, high=L - 1)
    above_ref = y_ref > top_k(y_ref, K + 1)
    below_ref = y_ref < top_k(y_ref, K)
    above = S > batch_top_k(S, K + 1)[:, None]
    below = S < batch_top_k(S, K)[:, None]
    return np.all((~above_ref | above) & (~below_ref | below), axis=1)


def top_k_preserving(y_vec, y_ref, K: int) -> bool:
    y_vec = as_scores(y_vec)
    y_ref = as_scores(y_ref)
    if y_vec.shape != y_ref.shape:
        raise InvalidArgumentError(f"length mismatch: {y_vec.shape[0]} vs {y_ref.shape[0]}")
    return bool(batch_top_k_preserving(y_vec, y_ref, K)[0])


def _scalar(out) -> float:
    if hasattr(out, "value"):
        return float(out.value)
    arr = np.asarray(out, dtype=np.float64)
    if arr.size != 1:
        raise InvalidArgumentError(f"loss returned {arr.size} values for one score vector")
    return float(arr.reshape(()))


def conditional_risk(loss: Callable, s, pi) -> float:
    """E_{y ~ pi} loss(s, y), summed exactly over the labels with pi_y > 0."""
    s = as_scores(s)
    pi = as_distribution(pi)
    if pi.L != s.shape[0]:
        raise InvalidArgumentError(f"pi has {pi.L} classes, scores have {s.shape[0]}")
    return float(sum(p * _scalar(loss(s, y)) for y, p in enumerate(pi.probs) if p > 0))


# ======================
# GRID PROBES
# ======================

def simplex_grid(L: int, steps: int) -> np.ndarray:
    """All pi in the simplex whose entries are multiples of 1/steps."""
    if L < 2 or steps < 1:
        raise InvalidArgumentError(f"need L >= 2 and steps >= 1, got L={L}, steps={steps}")
    points = []

    def rec(prefix: List[int], remaining: int, slots: int):
        if slots == 1:
            points.append(prefix + [remaining])
            return
        for v in range(remaining, -1, -1):
            rec(prefix + [v], remaining - v, slots - 1)

    rec([], steps, L)
    return np.asarray(points, dtype=np.float64) / steps


def _grid_chunks(L: int, radius: float, steps: int) -> Iterable[np.ndarray]:
    axis = np.linspace(-radius, radius, steps)
    total = steps ** L
    for start in range(0, total, GRID_CHUNK):
        idx = np.unravel_index(np.arange(start, min(start + GRID_CHUNK, total)), (steps,) * L)
        yield axis[np.stack(idx, axis=1)]


def _label_values(loss: Callable, S: np.ndarray) -> np.ndarray:
    """(N, L) matrix of loss(S_n, y) for every label y."""
    return np.stack([np.asarray(loss(S, y), dtype=np.float64) for y in range(S.shape[1])], axis=1)


def _scan(
    loss: Callable,
    pis: Sequence[ConditionalDistribution],
    K: int,
    radius: float,
    steps: int,
    name: Optional[str] = None,
) -> List[ProbeReport]:
    L = pis[0].L
    if L > MAX_PROBE_CLASSES:
        raise InvalidArgumentError(f"probe grid is exhaustive; L={L} exceeds {MAX_PROBE_CLASSES}")
    if steps < 2 or steps ** L > MAX_GRID_POINTS:
        raise InvalidArgumentError(f"grid of {steps}^{L} points is infeasible (limit {MAX_GRID_POINTS})")
    if not radius > 0:
        raise InvalidArgumentError(f"grid radius must be > 0, got {radius}")
    K = check_k(K, L, high=L - 1)
    n = len(pis)
    best_all = np.full(n, np.inf)
    best_bad = np.full(n, np.inf)
    arg_all = np.full((n, L), np.nan)
    arg_bad = np.full((n, L), np.nan)
    P = np.stack([pi.probs for pi in pis])
    for S in _grid_chunks(L, radius, steps):
        V = _label_values(loss, S)
        with np.errstate(invalid="ignore"):
            risks = np.where(P[None, :, :] > 0, V[:, None, :] * P[None, :, :], 0.0).sum(axis=2)
        for i, pi in enumerate(pis):
            r = risks[:, i]
            j = int(np.argmin(r))
            if r[j] < best_all[i]:
                best_all[i], arg_all[i] = r[j], S[j]
            bad = ~batch_top_k_preserving(S, pi.probs, K)
            if bad.any():
                rb = np.where(bad, r, np.inf)
                j = int(np.argmin(rb))
                if rb[j] < best_bad[i]:
                    best_bad[i], arg_bad[i] = rb[j], S[j]
    name = name or getattr(loss, "name", getattr(loss, "__name__", "loss"))
    return [
        ProbeReport(
            loss=name,
            K=K,
            pi=pi.probs,
            unrestricted_min=float(best_all[i]),
            restricted_min=float(best_bad[i]),
            gap=float(best_bad[i] - best_all[i]),
            unrestricted_argmin=arg_all[i],
            restricted_argmin=arg_bad[i],
        )
        for i, pi in enumerate(pis)
    ]


def calibration_probe(
    loss: Callable,
    pi,
    K: int,
    grid_radius: float = DEFAULT_GRID_RADIUS,
    grid_steps: int = DEFAULT_GRID_STEPS,
    name: Optional[str] = None,
) -> ProbeReport:
    """`loss` is a batched value function loss(S, y) -> values; Loss objects qualify."""
    report = _scan(loss, [as_distribution(pi)], K, grid_radius, grid_steps, name)[0]
    logger.info("probe %s K=%d pi=%s gap=%.6g", report.loss, K, np.round(report.pi, 4).tolist(), report.gap)
    return report


def search_witness(
    loss: Callable,
    L: int,
    K: int,
    pi_steps: int = 10,
    grid_radius: float = DEFAULT_GRID_RADIUS,
    grid_steps: int = DEFAULT_GRID_STEPS,
    name: Optional[str] = None,
) -> List[ProbeReport]:
    """Probes every pi on a simplex grid; reports sorted by gap (smallest first).

    Distributions for which every grid point is top-K preserving (ties in pi)
    have an empty restricted set and an infinite gap.
    """
    pis = [ConditionalDistribution(p) for p in simplex_grid(L, pi_steps)]
    reports = _scan(loss, pis, K, grid_radius, grid_steps, name)
    reports.sort(key=lambda r: r.gap)
    logger.info("witness search %s: %d distributions, smallest gap %.6g", reports[0].loss, len(reports), reports[0].gap)
    return reports


def probe_frame(reports: Sequence[ProbeReport]) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "loss": [r.loss for r in reports],
            "K": [r.K for r in reports],
            "pi": [" ".join(f"{p:.6g}" for p in r.pi) for r in reports],
            "unrestricted_min": [r.unrestricted_min for r in reports],
            "restricted_min": [r.restricted_min for r in reports],
            "gap": [r.gap for r in reports],
        }
    )
