"""Gaussian perturbed-optimizer smoothing of topsum_K and top_K.

The smoothed operators are expectations over s + epsilon * Z with Z standard
normal. They are estimated by Monte Carlo over an explicit NoiseBatch so that
callers own resampling and several estimates can share one batch (common
random numbers).

Generator: numpy ``Generator(Philox(seed))`` (counter-based) drawing with
``standard_normal`` (ziggurat). The same (seed, B, L) always reproduces the
same batch within this codebase; cross-codebase checks inject noise with
``NoiseBatch.from_array``.
"""
import dataclasses
import logging
from typing import Callable, Optional, Tuple

import numpy as np

from services.errors import InvalidArgumentError
from services.rng import make_rng
from services.scores import (
    as_scores,
    batch_argtop_k,
    batch_argtops_k,
    batch_top_k,
    batch_topsum_k,
    check_k,
    descending_order,
)

logger = logging.getLogger(__name__)

MIN_ORACLE_SAMPLES = 100_000
ORACLE_CHUNK = 20_000


@dataclasses.dataclass(frozen=True)
class NoiseBatch:
    samples: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64)
        if samples.ndim not in (2, 3) or samples.shape[-1] < 2 or samples.shape[-2] < 1:
            raise InvalidArgumentError(f"noise must have shape (B, L) or (N, B, L), got {samples.shape}")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    @property
    def B(self) -> int:
        return self.samples.shape[-2]

    @property
    def L(self) -> int:
        return self.samples.shape[-1]

    @classmethod
    def from_array(cls, samples) -> "NoiseBatch":
        return cls(samples=samples, seed=None)


@dataclasses.dataclass(frozen=True)
class SmoothingParams:
    epsilon: float
    K: int
    B: int

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise InvalidArgumentError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.B < 1:
            raise InvalidArgumentError(f"B must be >= 1, got {self.B}")
        if self.K < 0:
            raise InvalidArgumentError(f"K must be >= 0, got {self.K}")


def sample_noise(L: int, B: int, seed: int, rows: Optional[int] = None) -> NoiseBatch:
    """B x L standard normal draws (or rows x B x L when `rows` is given)."""
    if L < 2 or B < 1:
        raise InvalidArgumentError(f"need L >= 2 and B >= 1, got L={L}, B={B}")
    shape = (B, L) if rows is None else (rows, B, L)
    return NoiseBatch(samples=make_rng(seed).standard_normal(shape), seed=int(seed))


def _check_epsilon(epsilon: float) -> float:
    if not np.isfinite(epsilon) or epsilon < 0:
        raise InvalidArgumentError(f"epsilon must be finite and >= 0, got {epsilon}")
    return float(epsilon)


def perturb(S: np.ndarray, epsilon: float, noise: NoiseBatch) -> np.ndarray:
    """All perturbed copies S + epsilon * Z_b, shape (..., B, L)."""
    if noise.L != S.shape[-1]:
        raise InvalidArgumentError(f"noise width {noise.L} does not match L={S.shape[-1]}")
    Z = noise.samples
    if Z.ndim == 3 and (S.ndim != 2 or S.shape[0] != Z.shape[0]):
        raise InvalidArgumentError(f"per-row noise {Z.shape} needs scores of shape ({Z.shape[0]}, L), got {S.shape}")
    return S[..., None, :] + epsilon * Z


# ======================
# BATCH ESTIMATORS
# ======================

def batch_mc_topsum(S, K: int, epsilon: float, noise: NoiseBatch) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    K = check_k(K, S.shape[-1], low=0)
    if _check_epsilon(epsilon) == 0.0:
        return batch_topsum_k(S, K)
    return batch_topsum_k(perturb(S, epsilon, noise), K).mean(axis=-1)


def batch_mc_top(S, K: int, epsilon: float, noise: NoiseBatch) -> np.ndarray:
    # Same batch for topsum_K and topsum_{K-1}: the difference is the mean of pathwise top_K.
    S = np.asarray(S, dtype=np.float64)
    K = check_k(K, S.shape[-1])
    if _check_epsilon(epsilon) == 0.0:
        return batch_top_k(S, K)
    return batch_top_k(perturb(S, epsilon, noise), K).mean(axis=-1)


def batch_mc_grad_top(S, K: int, epsilon: float, noise: NoiseBatch) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    K = check_k(K, S.shape[-1])
    if _check_epsilon(epsilon) == 0.0:
        return batch_argtop_k(S, K)
    return batch_argtop_k(perturb(S, epsilon, noise), K).sum(axis=-2) / noise.B


def batch_mc_top_with_grad(S, K: int, epsilon: float, noise: NoiseBatch) -> Tuple[np.ndarray, np.ndarray]:
    """``batch_mc_top`` and ``batch_mc_grad_top`` from a single sort of the perturbed scores."""
    S = np.asarray(S, dtype=np.float64)
    K = check_k(K, S.shape[-1])
    exact = _check_epsilon(epsilon) == 0.0
    P = S if exact else perturb(S, epsilon, noise)
    idx = descending_order(P)[..., K - 1:K]
    values = np.take_along_axis(P, idx, axis=-1)[..., 0]
    indicators = np.zeros_like(P)
    np.put_along_axis(indicators, idx, 1.0, axis=-1)
    if exact:
        return values, indicators
    return values.mean(axis=-1), indicators.sum(axis=-2) / noise.B


def batch_mc_grad_topsum(S, K: int, epsilon: float, noise: NoiseBatch) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    K = check_k(K, S.shape[-1])
    if _check_epsilon(epsilon) == 0.0:
        return batch_argtops_k(S, K)
    return batch_argtops_k(perturb(S, epsilon, noise), K).sum(axis=-2) / noise.B


# ======================
# SINGLE VECTOR
# ======================

def _check_noise(s: np.ndarray, noise: NoiseBatch) -> None:
    if noise.samples.ndim != 2:
        raise InvalidArgumentError("a single score vector takes a (B, L) noise batch")
    if noise.L != s.shape[0]:
        raise InvalidArgumentError(f"noise width {noise.L} does not match L={s.shape[0]}")


def mc_topsum(s, K: int, epsilon: float, noise: NoiseBatch) -> float:
    """(1/B) sum_b topsum_K(s + epsilon Z_b); exact topsum_K when epsilon == 0."""
    s = as_scores(s)
    _check_noise(s, noise)
    return float(batch_mc_topsum(s, K, epsilon, noise))


def mc_top(s, K: int, epsilon: float, noise: NoiseBatch) -> float:
    s = as_scores(s)
    _check_noise(s, noise)
    return float(batch_mc_top(s, K, epsilon, noise))


def mc_grad_top(s, K: int, epsilon: float, noise: NoiseBatch) -> np.ndarray:
    """Mean of the argtop_K indicators over the perturbed vectors."""
    s = as_scores(s)
    _check_noise(s, noise)
    return batch_mc_grad_top(s, K, epsilon, noise)


def mc_grad_topsum(s, K: int, epsilon: float, noise: NoiseBatch) -> np.ndarray:
    s = as_scores(s)
    _check_noise(s, noise)
    return batch_mc_grad_topsum(s, K, epsilon, noise)


# ======================
# HIGH-PRECISION ORACLES (tests)
# ======================

def _oracle(
    s: np.ndarray,
    stat: Callable[[np.ndarray], np.ndarray],
    epsilon: float,
    B_big: int,
    seed: int,
) -> Tuple[float, float]:
    if B_big < MIN_ORACLE_SAMPLES:
        raise InvalidArgumentError(f"oracle needs B_big >= {MIN_ORACLE_SAMPLES}, got {B_big}")
    if _check_epsilon(epsilon) == 0.0:
        return float(stat(s)), 0.0
    rng = make_rng(seed)
    values = np.empty(B_big)
    for start in range(0, B_big, ORACLE_CHUNK):
        stop = min(start + ORACLE_CHUNK, B_big)
        Z = rng.standard_normal((stop - start, s.shape[0]))
        values[start:stop] = stat(s + epsilon * Z)
    stderr = values.std(ddof=1) / np.sqrt(B_big)
    logger.debug("oracle over %d draws: mean=%.6f stderr=%.2e", B_big, values.mean(), stderr)
    return float(values.mean()), float(stderr)


def oracle_smoothed_topsum(s, K: int, epsilon: float, B_big: int, seed: int) -> Tuple[float, float]:
    """Monte Carlo mean and standard error of topsum_K(s + epsilon Z)."""
    s = as_scores(s)
    K = check_k(K, s.shape[0], low=0)
    return _oracle(s, lambda X: batch_topsum_k(X, K), epsilon, B_big, seed)


def oracle_smoothed_top(s, K: int, epsilon: float, B_big: int, seed: int) -> Tuple[float, float]:
    """Monte Carlo mean and standard error of top_K(s + epsilon Z)."""
    s = as_scores(s)
    K = check_k(K, s.shape[0])
    return _oracle(s, lambda X: batch_top_k(X, K), epsilon, B_big, seed)
