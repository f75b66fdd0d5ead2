"""Top-K accuracy, its macro average over classes and the shot-group breakdown."""
import dataclasses
from typing import Dict, Optional, Sequence

import numpy as np

from services.errors import InvalidArgumentError
from services.scores import batch_rank, check_k

FEW_SHOT_BELOW = 20
MANY_SHOT_ABOVE = 100
SHOT_GROUPS = ("few", "medium", "many")


def shot_group(count: int, few_below: int = FEW_SHOT_BELOW, many_above: int = MANY_SHOT_ABOVE) -> str:
    if count < few_below:
        return "few"
    if count > many_above:
        return "many"
    return "medium"


@dataclasses.dataclass(frozen=True)
class MetricsReport:
    K: int
    n: int
    top_k_accuracy: float
    macro_top_k_accuracy: float
    per_shot_group: Dict[str, Optional[float]]
    per_class: np.ndarray  # nan for classes absent from the split

    def as_row(self) -> Dict[str, Optional[float]]:
        row = {"top_k_accuracy": self.top_k_accuracy, "macro_top_k_accuracy": self.macro_top_k_accuracy}
        row.update({f"{g}_macro_top_k": self.per_shot_group.get(g) for g in SHOT_GROUPS})
        return row


def top_k_hits(scores, labels, K: int) -> np.ndarray:
    """True where the label ranks among the K highest scores (lowest index wins ties)."""
    scores = np.asarray(scores, dtype=np.float64)
    K = check_k(K, scores.shape[-1])
    return batch_rank(scores, labels) < K


def compute_metrics(
    scores,
    labels,
    K: int,
    train_counts: Optional[Sequence[int]] = None,
) -> MetricsReport:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] == 0:
        raise InvalidArgumentError("cannot evaluate an empty split")
    if labels.shape != (scores.shape[0],):
        raise InvalidArgumentError(f"{labels.shape[0]} labels for {scores.shape[0]} score rows")
    L = scores.shape[1]
    hits = top_k_hits(scores, labels, K).astype(np.float64)
    support = np.bincount(labels, minlength=L)
    per_class = np.full(L, np.nan)
    present = support > 0
    per_class[present] = np.bincount(labels, weights=hits, minlength=L)[present] / support[present]

    groups: Dict[str, Optional[float]] = {g: None for g in SHOT_GROUPS}
    if train_counts is not None:
        train_counts = np.asarray(train_counts)
        if train_counts.shape != (L,):
            raise InvalidArgumentError(f"train_counts must have {L} entries")
        names = np.array([shot_group(int(c)) for c in train_counts])
        for g in SHOT_GROUPS:
            members = present & (names == g)
            if members.any():
                groups[g] = float(per_class[members].mean())
    return MetricsReport(
        K=K,
        n=int(scores.shape[0]),
        top_k_accuracy=float(hits.mean()),
        macro_top_k_accuracy=float(per_class[present].mean()),
        per_shot_group=groups,
        per_class=per_class,
    )


def evaluate(model, split, K: int, train_counts: Optional[Sequence[int]] = None) -> MetricsReport:
    """`split` is an (X, y) pair; `model` anything with a ``scores(X)`` method."""
    X, y = split
    if len(y) == 0:
        raise InvalidArgumentError("cannot evaluate an empty split")
    return compute_metrics(model.scores(X), y, K, train_counts)
