"""Exact top-K order statistics and their indicator vectors.

Tie rule, used everywhere in the package: among equal values the lower index
ranks higher. The batch_* functions work row-wise on the last axis of an
array of score vectors; the 1-D functions validate and delegate to them.
"""
import numpy as np

from services.errors import InvalidArgumentError


def as_scores(s) -> np.ndarray:
    """Validates a single score vector and returns it as float64."""
    arr = np.asarray(s, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidArgumentError(f"score vector must be 1-D, got shape {arr.shape}")
    if arr.shape[0] < 2:
        raise InvalidArgumentError(f"score vector needs at least 2 classes, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError("score vector has non-finite entries")
    return arr


def as_score_rows(S) -> np.ndarray:
    arr = np.asarray(S, dtype=np.float64)
    if arr.ndim < 1 or arr.shape[-1] < 2:
        raise InvalidArgumentError(f"score rows need a last axis of length >= 2, got shape {arr.shape}")
    return arr


def check_k(K: int, L: int, low: int = 1, high: int = None) -> int:
    high = L if high is None else high
    if isinstance(K, bool) or int(K) != K:
        raise InvalidArgumentError(f"K must be an integer, got {K!r}")
    K = int(K)
    if not low <= K <= high:
        raise InvalidArgumentError(f"K={K} out of range [{low}, {high}] for L={L}")
    return K


def descending_order(S: np.ndarray) -> np.ndarray:
    """Indices sorting each row from largest to smallest, ties to the lowest index."""
    return np.argsort(-S, axis=-1, kind="stable")


# ======================
# BATCH (last axis)
# ======================

def batch_top_k(S, K: int) -> np.ndarray:
    S = as_score_rows(S)
    L = S.shape[-1]
    K = check_k(K, L)
    return np.partition(S, L - K, axis=-1)[..., L - K]


def batch_topsum_k(S, K: int) -> np.ndarray:
    S = as_score_rows(S)
    L = S.shape[-1]
    K = check_k(K, L, low=0)
    if K == 0:
        return np.zeros(S.shape[:-1])
    return np.partition(S, L - K, axis=-1)[..., L - K:].sum(axis=-1)


def batch_argtop_index(S, K: int) -> np.ndarray:
    """Index of the K-th largest coordinate of each row."""
    S = as_score_rows(S)
    K = check_k(K, S.shape[-1])
    return descending_order(S)[..., K - 1]


def batch_argtop_k(S, K: int) -> np.ndarray:
    S = as_score_rows(S)
    idx = batch_argtop_index(S, K)
    out = np.zeros_like(S)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def batch_argtops_k(S, K: int) -> np.ndarray:
    S = as_score_rows(S)
    K = check_k(K, S.shape[-1])
    idx = descending_order(S)[..., :K]
    out = np.zeros_like(S)
    np.put_along_axis(out, idx, 1.0, axis=-1)
    return out


def batch_rank(S, Y) -> np.ndarray:
    """Number of coordinates ranked strictly above the label in each row."""
    S = as_score_rows(S)
    Y = np.asarray(Y, dtype=np.int64)
    L = S.shape[-1]
    if np.any((Y < 0) | (Y >= L)):
        raise InvalidArgumentError(f"labels must lie in [0, {L})")
    sy = np.take_along_axis(S, Y[..., None], axis=-1)
    above = (S > sy).sum(axis=-1)
    before = (S == sy) & (np.arange(L) < Y[..., None])
    return above + before.sum(axis=-1)


# ======================
# SINGLE VECTOR
# ======================

def top_k(s, K: int) -> float:
    """K-th largest entry of s."""
    s = as_scores(s)
    return float(batch_top_k(s, check_k(K, s.shape[0])))


def topsum_k(s, K: int) -> float:
    """Sum of the K largest entries; topsum_0 = 0."""
    s = as_scores(s)
    return float(batch_topsum_k(s, check_k(K, s.shape[0], low=0)))


def argtop_k(s, K: int) -> np.ndarray:
    s = as_scores(s)
    return batch_argtop_k(s, check_k(K, s.shape[0]))


def argtops_k(s, K: int) -> np.ndarray:
    s = as_scores(s)
    return batch_argtops_k(s, check_k(K, s.shape[0]))


def rank_of(s, y: int) -> int:
    s = as_scores(s)
    return int(batch_rank(s, y))
