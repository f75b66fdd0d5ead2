"""Top-K classification losses: value and gradient with respect to the scores.

Every loss has one batched implementation taking scores S of shape (N, L)
and integer labels Y of shape (N,) and returning (values[N], grads[N, L]).
The ``loss_*`` functions are the single-sample front ends and ``make_loss``
builds the uniform ``Loss`` object the trainer and the CLI work with.

Labels are 0-based. Hinge-family subgradients use the ">=" activation: at the
kink (value exactly 0) the descent direction is still returned.
"""
import dataclasses
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.special import log_softmax, logsumexp, softmax

from services.errors import InvalidArgumentError
from services.scores import (
    as_score_rows,
    as_scores,
    batch_argtops_k,
    batch_top_k,
    batch_topsum_k,
    check_k,
    descending_order,
)
from services.smoothing import NoiseBatch, SmoothingParams, batch_mc_top_with_grad

Batch = Tuple[np.ndarray, Optional[np.ndarray]]


@dataclasses.dataclass(frozen=True)
class LossEval:
    value: float
    grad: np.ndarray


@dataclasses.dataclass(frozen=True)
class MarginTable:
    """Per-class margins m_y = C / n_y^(1/4)."""

    margins: np.ndarray
    C: float
    counts: np.ndarray

    @property
    def max_margin(self) -> float:
        return float(self.margins.max())

    def __len__(self) -> int:
        return self.margins.shape[0]


def build_margin_table(counts: Sequence[int], C: float) -> MarginTable:
    counts = np.asarray(counts)
    if counts.ndim != 1 or counts.size == 0:
        raise InvalidArgumentError("counts must be a non-empty 1-D sequence")
    if np.any(counts < 1) or np.any(counts != np.round(counts)):
        raise InvalidArgumentError(f"counts must be positive integers, got {counts.tolist()}")
    if not C > 0:
        raise InvalidArgumentError(f"C must be > 0, got {C}")
    counts = counts.astype(np.int64)
    margins = C / counts.astype(np.float64) ** 0.25
    margins.setflags(write=False)
    counts.setflags(write=False)
    return MarginTable(margins=margins, C=float(C), counts=counts)


def margin_table_from_max(counts: Sequence[int], max_margin: float) -> MarginTable:
    """Chooses C so that the rarest class gets exactly `max_margin`."""
    counts = np.asarray(counts)
    if counts.size == 0 or np.any(counts < 1):
        raise InvalidArgumentError(f"counts must be positive integers, got {counts.tolist()}")
    return build_margin_table(counts, max_margin * float(counts.min()) ** 0.25)


# ======================
# HELPERS
# ======================

def _labels(Y, N: int, L: int) -> np.ndarray:
    Y = np.broadcast_to(np.asarray(Y), (N,))
    if Y.dtype.kind not in "iu" and not np.all(Y == np.round(Y)):
        raise InvalidArgumentError("labels must be integers")
    Y = Y.astype(np.int64)
    if np.any((Y < 0) | (Y >= L)):
        raise InvalidArgumentError(f"labels must lie in [0, {L})")
    return Y


def _rows(S) -> np.ndarray:
    S = as_score_rows(S)
    if S.ndim != 2:
        raise InvalidArgumentError(f"batched scores must be 2-D (N, L), got shape {S.shape}")
    return S


def _onehot(Y: np.ndarray, L: int) -> np.ndarray:
    out = np.zeros((Y.shape[0], L))
    out[np.arange(Y.shape[0]), Y] = 1.0
    return out


def _true_scores(S: np.ndarray, Y: np.ndarray) -> np.ndarray:
    return S[np.arange(S.shape[0]), Y]


def _hinge(t: np.ndarray, direction: np.ndarray) -> Batch:
    active = (t >= 0.0).astype(np.float64)
    return np.maximum(t, 0.0), active[:, None] * direction


def _margins_for(margins: MarginTable, Y: np.ndarray, L: int) -> np.ndarray:
    if margins is None:
        raise InvalidArgumentError("this loss needs a MarginTable")
    if len(margins) != L:
        raise InvalidArgumentError(f"margin table has {len(margins)} classes, scores have {L}")
    return margins.margins[Y]


# ======================
# BATCHED LOSSES
# ======================

def batch_topk_01(S, Y, K: int) -> Batch:
    S = _rows(S)
    N, L = S.shape
    Y = _labels(Y, N, L)
    K = check_k(K, L)
    return (batch_top_k(S, K) > _true_scores(S, Y)).astype(np.float64), None


def batch_ce(S, Y) -> Batch:
    S = _rows(S)
    N, L = S.shape
    Y = _labels(Y, N, L)
    logp = log_softmax(S, axis=1)
    values = np.maximum(-logp[np.arange(N), Y], 0.0)
    return values, softmax(S, axis=1) - _onehot(Y, L)


def batch_ldam(S, Y, margins: MarginTable) -> Batch:
    S = _rows(S)
    N, L = S.shape
    Y = _labels(Y, N, L)
    m = _margins_for(margins, Y, L)
    # ds'/ds is the identity, so the CE gradient at s' is the gradient at s.
    return batch_ce(S - m[:, None] * _onehot(Y, L), Y)


def batch_focal(S, Y, gamma: float, literal: bool = False) -> Batch:
    if not gamma >= 0:
        raise InvalidArgumentError(f"gamma must be >= 0, got {gamma}")
    ce, g = batch_ce(S, Y)
    if gamma == 0:
        return ce, g
    if literal:
        # (1 - ln ce)^gamma * ce, only defined while ce <= e
        if np.any(ce > np.e):
            raise InvalidArgumentError(
                f"literal focal loss is undefined for cross-entropy above e, got {float(ce.max()):.4g}"
            )
        with np.errstate(divide="ignore", invalid="ignore"):
            base = 1.0 - np.log(ce)
            values = np.where(ce > 0, base ** gamma * ce, 0.0)
            factor = np.where(ce > 0, base ** gamma - gamma * base ** (gamma - 1.0), 0.0)
        return values, factor[:, None] * g
    p = np.exp(-ce)
    one_minus_p = -np.expm1(-ce)
    # ce / (1 - p) -> 1 as p -> 1
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(one_minus_p > 0, ce / one_minus_p, 1.0)
    weight = one_minus_p ** gamma
    factor = weight + gamma * p * ratio * weight
    return weight * ce, factor[:, None] * g


def batch_hinge_topk(S, Y, K: int) -> Batch:
    """(1 + top_K(s without y) - s_y)_+."""
    S = _rows(S)
    N, L = S.shape
    Y = _labels(Y, N, L)
    K = check_k(K, L, high=L - 1)
    masked = S.copy()
    masked[np.arange(N), Y] = -np.inf
    j = descending_order(masked)[:, K - 1]
    rows = np.arange(N)
    t = 1.0 + masked[rows, j] - S[rows, Y]
    direction = -_onehot(Y, L)
    direction[rows, j] += 1.0
    return _hinge(t, direction)


def batch_cvx_hinge_topk(S, Y, K: int) -> Batch:
    """((1/K) topsum_K(1 - delta_y + s) - s_y)_+."""
    S = _rows(S)
    N, L = S.shape
    Y = _labels(Y, N, L)
    K = check_k(K, L)
    onehot = _onehot(Y, L)
    V = S + 1.0 - onehot
    t = batch_topsum_k(V, K) / K - _true_scores(S, Y)
    return _hinge(t, batch_argtops_k(V, K) / K - onehot)


def _smoothed_top_hinge(S, Y, K: int, epsilon: float, noise: Optional[NoiseBatch], margin: np.ndarray) -> Batch:
    """(m_y + top_{K+1,eps}(s) - s_y)_+ and its Monte Carlo gradient."""
    S = _rows(S)
    N, L = S.shape
    Y = _labels(Y, N, L)
    K = check_k(K, L, high=L - 1)
    if epsilon > 0 and noise is None:
        raise InvalidArgumentError("noised losses with epsilon > 0 need a NoiseBatch")
    top, grad = batch_mc_top_with_grad(S, K + 1, epsilon, noise)
    return _hinge(margin + top - _true_scores(S, Y), grad - _onehot(Y, L))


def batch_cal_hinge_topk(S, Y, K: int) -> Batch:
    """(1 + top_{K+1}(s) - s_y)_+."""
    return _smoothed_top_hinge(S, Y, K, 0.0, None, 1.0)


def batch_noised_balanced(S, Y, K: int, epsilon: float, noise: Optional[NoiseBatch]) -> Batch:
    return _smoothed_top_hinge(S, Y, K, epsilon, noise, 1.0)


def batch_noised_imbalanced(S, Y, K: int, epsilon: float, noise: Optional[NoiseBatch], margins: MarginTable) -> Batch:
    S = _rows(S)
    N, L = S.shape
    Y = _labels(Y, N, L)
    return _smoothed_top_hinge(S, Y, K, epsilon, noise, _margins_for(margins, Y, L))


# ======================
# K-SUBSET LOG-SUM-EXP
# ======================

def _forward_table(x: np.ndarray, K: int) -> np.ndarray:
    """F[..., i, a] = log e_a(exp(x_0), ..., exp(x_{i-1}))."""
    L = x.shape[-1]
    F = np.full(x.shape[:-1] + (L + 1, K + 1), -np.inf)
    F[..., :, 0] = 0.0
    for i in range(L):
        F[..., i + 1, 1:] = np.logaddexp(F[..., i, 1:], F[..., i, :-1] + x[..., i, None])
    return F


def log_esp(x, K: int) -> np.ndarray:
    """log of the K-th elementary symmetric polynomial of exp(x), last axis."""
    x = np.asarray(x, dtype=np.float64)
    K = check_k(K, x.shape[-1], low=0)
    return _forward_table(x, K)[..., -1, K]


def log_esp_marginals(x, K: int) -> Tuple[np.ndarray, np.ndarray]:
    """log e_K(exp(x)) and P(j in A) for A drawn with weight prod_{j in A} exp(x_j), |A| = K."""
    x = np.asarray(x, dtype=np.float64)
    L = x.shape[-1]
    K = check_k(K, L)
    F = _forward_table(x, K)
    G = _forward_table(x[..., ::-1], K)[..., ::-1, :]  # G[..., i, b] = log e_b(exp(x_i), ..., exp(x_{L-1}))
    log_z = F[..., L, K]
    with np.errstate(divide="ignore", invalid="ignore"):
        # sum over a + b = K - 1 of F[j, a] + G[j + 1, b]
        pairs = F[..., :L, :K] + G[..., 1:, :K][..., ::-1]
        log_marg = x + logsumexp(pairs, axis=-1) - log_z[..., None]
    return log_z, np.exp(log_marg)


def batch_smoothed_hinge(S, Y, K: int, tau: float) -> Batch:
    """Log-sum-exp smoothing over K-subsets of the top-K hinge, temperature tau.

    tau*LSE1 - tau*LSE2 with LSE2 = log sum_A exp(sum_{j in A} s_j / (K tau)) and
    LSE1 adding 1{y not in A}/tau inside. Shifting x_y by -1/tau turns LSE1 into
    1/tau + LSE2 of the shifted vector, so one O(L K) recursion serves both.
    """
    if not tau > 0:
        raise InvalidArgumentError(f"tau must be > 0, got {tau}")
    S = _rows(S)
    N, L = S.shape
    Y = _labels(Y, N, L)
    K = check_k(K, L, high=L - 1)
    onehot = _onehot(Y, L)
    x = S / (K * tau)
    log_z, marg = log_esp_marginals(x, K)
    log_z_y, marg_y = log_esp_marginals(x - onehot / tau, K)
    values = np.maximum(1.0 + tau * (log_z_y - log_z), 0.0)
    return values, (marg_y - marg) / K


# ======================
# LOSS OBJECT
# ======================

NOISED = ("noised_balanced", "noised_imbalanced")

_IMPLS: Dict[str, Callable[..., Batch]] = {
    "topk_01": lambda loss, S, Y, noise: batch_topk_01(S, Y, loss.K),
    "ce": lambda loss, S, Y, noise: batch_ce(S, Y),
    "ldam": lambda loss, S, Y, noise: batch_ldam(S, Y, loss.margins),
    "focal": lambda loss, S, Y, noise: batch_focal(S, Y, loss.gamma, loss.literal),
    "hinge": lambda loss, S, Y, noise: batch_hinge_topk(S, Y, loss.K),
    "cvx_hinge": lambda loss, S, Y, noise: batch_cvx_hinge_topk(S, Y, loss.K),
    "cal_hinge": lambda loss, S, Y, noise: batch_cal_hinge_topk(S, Y, loss.K),
    "smoothed_hinge": lambda loss, S, Y, noise: batch_smoothed_hinge(S, Y, loss.K, loss.tau),
    "noised_balanced": lambda loss, S, Y, noise: batch_noised_balanced(S, Y, loss.K, loss.epsilon, noise),
    "noised_imbalanced": lambda loss, S, Y, noise: batch_noised_imbalanced(
        S, Y, loss.K, loss.epsilon, noise, loss.margins
    ),
}

LOSS_NAMES = tuple(_IMPLS)


@dataclasses.dataclass(frozen=True)
class Loss:
    name: str
    K: int = 1
    epsilon: float = 0.0
    B: int = 1
    tau: float = 1.0
    gamma: float = 0.0
    margins: Optional[MarginTable] = None
    literal: bool = False

    @property
    def has_gradient(self) -> bool:
        return self.name != "topk_01"

    @property
    def needs_noise(self) -> bool:
        return self.name in NOISED and self.epsilon > 0

    def evaluate_batch(self, S, Y, noise: Optional[NoiseBatch] = None) -> Batch:
        if self.needs_noise and noise is None:
            raise InvalidArgumentError(f"loss {self.name!r} needs a NoiseBatch")
        return _IMPLS[self.name](self, S, Y, noise)

    def evaluate(self, s, y: int, noise: Optional[NoiseBatch] = None) -> LossEval:
        s = as_scores(s)
        values, grads = self.evaluate_batch(s[None, :], [y], noise)
        grad = grads[0] if grads is not None else None
        return LossEval(value=float(values[0]), grad=grad)

    def __call__(self, S, y, noise: Optional[NoiseBatch] = None) -> np.ndarray:
        """Batched values only; the shape calibration probes expect."""
        S = np.atleast_2d(np.asarray(S, dtype=np.float64))
        return self.evaluate_batch(S, y, noise)[0]


def make_loss(name: str, **params) -> Loss:
    if name not in _IMPLS:
        raise InvalidArgumentError(f"unknown loss {name!r}; choose from {', '.join(LOSS_NAMES)}")
    if name in ("ldam", "noised_imbalanced") and params.get("margins") is None:
        raise InvalidArgumentError(f"loss {name!r} needs margins")
    try:
        loss = Loss(name=name, **params)
    except TypeError as e:
        raise InvalidArgumentError(f"bad parameters for loss {name!r}: {e}") from e
    if loss.K < 1:
        raise InvalidArgumentError(f"K must be >= 1 for {name!r}, got {loss.K}")
    SmoothingParams(epsilon=loss.epsilon, K=loss.K, B=loss.B)
    return loss


# ======================
# SINGLE-SAMPLE FRONT ENDS
# ======================

def loss_topk_01(s, y: int, K: int) -> float:
    return make_loss("topk_01", K=K).evaluate(s, y).value


def loss_ce(s, y: int) -> LossEval:
    return make_loss("ce").evaluate(s, y)


def loss_ldam(s, y: int, margins: MarginTable) -> LossEval:
    return make_loss("ldam", margins=margins).evaluate(s, y)


def loss_focal(s, y: int, gamma: float, literal: bool = False) -> LossEval:
    return make_loss("focal", gamma=gamma, literal=literal).evaluate(s, y)


def loss_hinge_topk(s, y: int, K: int) -> LossEval:
    return make_loss("hinge", K=K).evaluate(s, y)


def loss_cvx_hinge_topk(s, y: int, K: int) -> LossEval:
    return make_loss("cvx_hinge", K=K).evaluate(s, y)


def loss_cal_hinge_topk(s, y: int, K: int) -> LossEval:
    return make_loss("cal_hinge", K=K).evaluate(s, y)


def loss_smoothed_hinge_berrada(s, y: int, K: int, tau: float) -> LossEval:
    return make_loss("smoothed_hinge", K=K, tau=tau).evaluate(s, y)


def loss_noised_balanced(s, y: int, K: int, epsilon: float, noise: NoiseBatch) -> LossEval:
    return make_loss("noised_balanced", K=K, epsilon=epsilon, B=noise.B).evaluate(s, y, noise)


def loss_noised_imbalanced(s, y: int, K: int, epsilon: float, noise: NoiseBatch, margins: MarginTable) -> LossEval:
    return make_loss("noised_imbalanced", K=K, epsilon=epsilon, B=noise.B, margins=margins).evaluate(s, y, noise)
