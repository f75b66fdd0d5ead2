"""Linear (optionally one-hidden-layer) scorer with analytic gradients.

With ``normalize`` on, the representation fed to the last layer and the rows
of the last weight matrix are both L2-normalized, and the cosine logits are
multiplied by ``score_scale``. The gradient goes through the normalization:
d(v/|v|)/dv = (I - v_hat v_hat^T) / |v|. With ``fit_bias`` off the last-layer bias
gets a zero gradient and stays at its initial zero.
"""
import dataclasses
import logging
from typing import Dict, Optional, Tuple

import numpy as np
from sklearn.preprocessing import normalize as l2_rows

from services.errors import InvalidArgumentError

logger = logging.getLogger(__name__)

CHECKPOINT_KEYS = ("W", "b", "W1", "b1")


def _project_out(grad_hat: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Row-wise pullback of a gradient on v/|v| to a gradient on v (zero rows stay zero)."""
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    v_hat = np.divide(v, norms, out=np.zeros_like(v), where=norms > 0)
    radial = np.sum(grad_hat * v_hat, axis=1, keepdims=True) * v_hat
    return np.divide(grad_hat - radial, norms, out=np.zeros_like(v), where=norms > 0)


@dataclasses.dataclass
class Scorer:
    W: np.ndarray
    b: np.ndarray
    W1: Optional[np.ndarray] = None
    b1: Optional[np.ndarray] = None
    normalize: bool = False
    score_scale: float = 1.0
    fit_bias: bool = True

    @property
    def L(self) -> int:
        return self.W.shape[0]

    @property
    def hidden(self) -> int:
        return 0 if self.W1 is None else self.W1.shape[0]

    @classmethod
    def init(
        cls,
        dim: int,
        L: int,
        rng: np.random.Generator,
        hidden: int = 0,
        normalize: bool = False,
        score_scale: float = 1.0,
        fit_bias: bool = True,
    ) -> "Scorer":
        if dim < 1 or L < 2 or hidden < 0:
            raise InvalidArgumentError(f"bad scorer shape: dim={dim}, L={L}, hidden={hidden}")
        if not score_scale > 0:
            raise InvalidArgumentError(f"score_scale must be > 0, got {score_scale}")
        W1 = b1 = None
        width = dim
        if hidden:
            W1 = rng.standard_normal((hidden, dim)) * np.sqrt(2.0 / dim)
            b1 = np.zeros(hidden)
            width = hidden
        W = rng.standard_normal((L, width)) / np.sqrt(width)
        return cls(
            W=W, b=np.zeros(L), W1=W1, b1=b1, normalize=normalize, score_scale=float(score_scale), fit_bias=fit_bias
        )

    def params(self) -> Dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in CHECKPOINT_KEYS if getattr(self, k) is not None}

    def copy(self) -> "Scorer":
        return dataclasses.replace(self, **{k: v.copy() for k, v in self.params().items()})

    def forward(self, X) -> Tuple[np.ndarray, dict]:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != (self.W1 if self.W1 is not None else self.W).shape[1]:
            raise InvalidArgumentError(f"features of shape {X.shape} do not fit this scorer")
        cache = {"X": X}
        h = X
        if self.W1 is not None:
            z = X @ self.W1.T + self.b1
            h = np.maximum(z, 0.0)
            cache["z"] = z
        cache["h"] = h
        if self.normalize:
            h_hat = l2_rows(h)
            W_hat = l2_rows(self.W)
            cache["h_hat"], cache["W_hat"] = h_hat, W_hat
            S = self.score_scale * (h_hat @ W_hat.T)
        else:
            S = self.score_scale * (h @ self.W.T + self.b)
        return S, cache

    def scores(self, X) -> np.ndarray:
        return self.forward(X)[0]

    def backward(self, cache: dict, G: np.ndarray) -> Dict[str, np.ndarray]:
        """Gradients of sum(G * scores) with respect to every parameter."""
        G = self.score_scale * G
        grads: Dict[str, np.ndarray] = {}
        if self.normalize:
            h_hat, W_hat = cache["h_hat"], cache["W_hat"]
            grads["W"] = _project_out(G.T @ h_hat, self.W)
            grads["b"] = np.zeros_like(self.b)
            dh = _project_out(G @ W_hat, cache["h"]) if self.W1 is not None else None
        else:
            grads["W"] = G.T @ cache["h"]
            grads["b"] = G.sum(axis=0) if self.fit_bias else np.zeros_like(self.b)
            dh = G @ self.W if self.W1 is not None else None
        if self.W1 is not None:
            dz = dh * (cache["z"] > 0)
            grads["W1"] = dz.T @ cache["X"]
            grads["b1"] = dz.sum(axis=0)
        return grads


# ======================
# CHECKPOINTS
# ======================

def save_checkpoint(model: Scorer, path: str) -> str:
    """``.npz`` with arrays W, b (and W1, b1 for a hidden layer) plus normalize, score_scale and fit_bias."""
    np.savez(
        path,
        normalize=np.array(model.normalize),
        score_scale=np.array(model.score_scale),
        fit_bias=np.array(model.fit_bias),
        **model.params(),
    )
    return path if path.endswith(".npz") else path + ".npz"


def load_checkpoint(path: str) -> Scorer:
    try:
        with np.load(path) as data:
            arrays = {k: data[k].copy() for k in CHECKPOINT_KEYS if k in data}
            fit_bias = bool(data["fit_bias"]) if "fit_bias" in data else True
            return Scorer(
                normalize=bool(data["normalize"]), score_scale=float(data["score_scale"]), fit_bias=fit_bias, **arrays
            )
    except (OSError, KeyError) as e:
        raise InvalidArgumentError(f"cannot read checkpoint {path}: {e}") from e
