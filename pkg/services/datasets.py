"""Synthetic long-tailed classification data, superclass label noise and CSV I/O."""
import dataclasses
import logging
import os
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.preprocessing import normalize

from services.errors import InvalidArgumentError
from services.rng import make_rng

logger = logging.getLogger(__name__)

MAX_FEATURE_VALUES = 50_000_000
SPLITS = ("train", "val", "test")


@dataclasses.dataclass(frozen=True)
class LongTailSpec:
    counts: Tuple[int, ...]
    dim: int = 16
    superclasses: Optional[Tuple[int, ...]] = None
    class_separation: float = 3.0
    noise_std: float = 1.0
    val_per_class: int = 20
    test_per_class: int = 20
    orthogonal_means: bool = False
    seed: int = 0

    @property
    def L(self) -> int:
        return len(self.counts)

    def validate(self) -> None:
        if self.L < 2:
            raise InvalidArgumentError("need at least 2 classes")
        if any(int(c) != c or c < 1 for c in self.counts):
            raise InvalidArgumentError(f"train counts must be integers >= 1, got {list(self.counts)}")
        if self.dim < 1 or self.val_per_class < 1 or self.test_per_class < 1:
            raise InvalidArgumentError("dim, val_per_class and test_per_class must be >= 1")
        if self.superclasses is not None and len(self.superclasses) != self.L:
            raise InvalidArgumentError(f"superclass map has {len(self.superclasses)} entries for {self.L} classes")
        if self.orthogonal_means and self.dim < self.L:
            raise InvalidArgumentError(f"orthogonal means need dim >= L, got dim={self.dim} for {self.L} classes")
        if self.noise_std < 0:
            raise InvalidArgumentError(f"noise_std must be >= 0, got {self.noise_std}")
        total = sum(self.counts) + self.L * (self.val_per_class + self.test_per_class)
        if total * self.dim > MAX_FEATURE_VALUES:
            raise InvalidArgumentError(f"{total} samples x {self.dim} features exceeds {MAX_FEATURE_VALUES} values")


@dataclasses.dataclass(frozen=True)
class LongTailDataset:
    X_train: np.ndarray
    y_train: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    superclasses: np.ndarray

    @property
    def L(self) -> int:
        return self.superclasses.shape[0]

    @property
    def dim(self) -> int:
        return self.X_train.shape[1]

    @property
    def train_counts(self) -> np.ndarray:
        return np.bincount(self.y_train, minlength=self.L)

    def split(self, name: str) -> Tuple[np.ndarray, np.ndarray]:
        if name not in SPLITS:
            raise InvalidArgumentError(f"unknown split {name!r}; choose from {SPLITS}")
        return getattr(self, f"X_{name}"), getattr(self, f"y_{name}")


# ======================
# COUNT SCHEDULES
# ======================

def exponential_counts(L: int, n_max: int, n_min: int) -> Tuple[int, ...]:
    """Counts decaying geometrically from n_max (class 0) to n_min (class L-1)."""
    if L < 2 or n_min < 1 or n_max < n_min:
        raise InvalidArgumentError(f"need L >= 2 and n_max >= n_min >= 1, got {L}, {n_max}, {n_min}")
    ratio = (n_min / n_max) ** (np.arange(L) / (L - 1))
    return tuple(int(c) for c in np.maximum(np.round(n_max * ratio), 1))


def contiguous_superclasses(L: int, group_size: int) -> Tuple[int, ...]:
    if group_size < 1:
        raise InvalidArgumentError(f"group_size must be >= 1, got {group_size}")
    return tuple(c // group_size for c in range(L))


# ======================
# GENERATION
# ======================

def _draw(rng: np.random.Generator, means: np.ndarray, counts: Sequence[int], noise_std: float):
    labels = np.repeat(np.arange(means.shape[0]), counts)
    X = means[labels] + noise_std * rng.standard_normal((labels.shape[0], means.shape[1]))
    return X, labels


def generate_longtail(spec: LongTailSpec) -> LongTailDataset:
    """Class-conditional Gaussians around means of norm `class_separation`.

    With `orthogonal_means` the means are mutually orthogonal (needs dim >= L);
    a bias-free linear scorer then sees each class on its own direction.
    """
    spec.validate()
    rng = make_rng(spec.seed)
    L = spec.L
    if spec.orthogonal_means:
        q, _ = np.linalg.qr(rng.standard_normal((spec.dim, L)))
        means = q.T * spec.class_separation
    else:
        means = normalize(rng.standard_normal((L, spec.dim))) * spec.class_separation
    X_train, y_train = _draw(rng, means, spec.counts, spec.noise_std)
    X_val, y_val = _draw(rng, means, [spec.val_per_class] * L, spec.noise_std)
    X_test, y_test = _draw(rng, means, [spec.test_per_class] * L, spec.noise_std)
    superclasses = np.arange(L) if spec.superclasses is None else np.asarray(spec.superclasses)
    logger.info("generated %d classes: %d train / %d val / %d test samples", L, len(y_train), len(y_val), len(y_test))
    return LongTailDataset(X_train, y_train, X_val, y_val, X_test, y_test, superclasses.astype(np.int64))


def apply_superclass_noise(ds: LongTailDataset, p: float, seed: int) -> LongTailDataset:
    """Resamples each training label uniformly within its superclass with probability p."""
    if not 0.0 <= p <= 1.0:
        raise InvalidArgumentError(f"p must lie in [0, 1], got {p}")
    if p == 0.0:
        return ds
    rng = make_rng(seed)
    y = ds.y_train.copy()
    flip = rng.random(y.shape[0]) < p
    groups: Dict[int, np.ndarray] = {g: np.flatnonzero(ds.superclasses == g) for g in np.unique(ds.superclasses)}
    group_of = ds.superclasses[y]
    for g, members in groups.items():
        idx = np.flatnonzero(flip & (group_of == g))
        y[idx] = members[rng.integers(0, members.shape[0], size=idx.shape[0])]
    logger.info("superclass noise p=%.2f changed %d of %d training labels", p, int((y != ds.y_train).sum()), y.shape[0])
    return dataclasses.replace(ds, y_train=y)


# ======================
# CSV
# ======================

def _split_frame(X: np.ndarray, y: np.ndarray) -> pd.DataFrame:
    df = pd.DataFrame(X, columns=[f"x{i}" for i in range(X.shape[1])])
    df.insert(0, "label", y)
    return df


def save_dataset(ds: LongTailDataset, directory: str) -> List[str]:
    """One CSV per split (label, then the feature columns) plus classes.csv."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for name in SPLITS:
        path = os.path.join(directory, f"{name}.csv")
        _split_frame(*ds.split(name)).to_csv(path, index=False)
        paths.append(path)
    path = os.path.join(directory, "classes.csv")
    pd.DataFrame(
        {"class": np.arange(ds.L), "superclass": ds.superclasses, "train_count": ds.train_counts}
    ).to_csv(path, index=False)
    paths.append(path)
    return paths


def load_dataset(directory: str) -> LongTailDataset:
    try:
        classes = pd.read_csv(os.path.join(directory, "classes.csv"))
        frames = {name: pd.read_csv(os.path.join(directory, f"{name}.csv"), float_precision="round_trip") for name in SPLITS}
    except FileNotFoundError as e:
        raise InvalidArgumentError(f"incomplete dataset directory {directory}: {e}") from e
    arrays = {}
    for name, df in frames.items():
        arrays[f"X_{name}"] = df.drop(columns=["label"]).to_numpy(dtype=np.float64)
        arrays[f"y_{name}"] = df["label"].to_numpy(dtype=np.int64)
    return LongTailDataset(superclasses=classes["superclass"].to_numpy(dtype=np.int64), **arrays)
