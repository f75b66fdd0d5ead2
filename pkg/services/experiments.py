"""Sweeps behind the command-line subcommands.

Each function returns a pandas DataFrame ready to be written as CSV; none of
them writes files or prints. Randomness comes from ``spawn_rngs(seed, ...)``
so every sweep except the timing one is reproducible from its seed.
"""
import contextlib
import dataclasses
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Collection, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats
from sklearn.linear_model import LinearRegression
from threadpoolctl import threadpool_limits

from services.datasets import LongTailDataset, LongTailSpec, contiguous_superclasses, exponential_counts
from services.errors import InvalidArgumentError
from services.losses import LOSS_NAMES, Loss, make_loss, margin_table_from_max
from services.metrics import evaluate
from services.rng import make_rng
from services.settings import coerce_fields
from services.smoothing import NoiseBatch
from services.training import EPSILON_GRID, GAMMA_GRID, MAX_MARGIN_GRID, TAU_GRID, TrainConfig, train
from utils.numerics import finite_differences

logger = logging.getLogger(__name__)

GRADCHECK_TOL = 1e-4
SMOOTH_TOL = 1e-8
EXACT_SMOOTH_LOSSES = ("ce", "ldam", "focal")
SMOOTH_LOSSES = EXACT_SMOOTH_LOSSES + ("smoothed_hinge",)
TIMED_LOSSES = ("noised_balanced", "smoothed_hinge", "ce")
SIMPLEX_COLUMNS = ("s1", "s2", "s3")


def zoo_loss(
    name: str,
    L: int,
    K: int = 1,
    epsilon: float = 0.0,
    B: int = 1,
    tau: float = 1.0,
    gamma: float = 2.0,
    counts: Optional[Sequence[int]] = None,
    max_margin: float = 0.5,
) -> Loss:
    """Any loss of the zoo with margins filled in from `counts` (default: 100 -> 10 decay)."""
    margins = None
    if name in ("ldam", "noised_imbalanced"):
        counts = exponential_counts(L, 100, 10) if counts is None else counts
        if len(counts) != L:
            raise InvalidArgumentError(f"{len(counts)} class counts for L={L}")
        margins = margin_table_from_max(counts, max_margin)
    return make_loss(name, K=K, epsilon=epsilon, B=B, tau=tau, gamma=gamma, margins=margins)


# ======================
# GRADIENT CHECK
# ======================

def gradcheck_trials(
    loss_name: str,
    L: int = 10,
    K: int = 3,
    epsilon: float = 0.5,
    B: int = 5,
    trials: int = 100,
    seed: int = 0,
    h: float = 1e-5,
    max_resamples: int = 50,
) -> pd.DataFrame:
    """Analytic gradient against central differences at random points with fixed noise.

    Piecewise-linear losses are only checked where forward and backward
    differences agree, i.e. with no kink or tie within h of the point; other
    points are redrawn (counted in the `resamples` column).
    """
    if loss_name not in LOSS_NAMES:
        raise InvalidArgumentError(f"unknown loss {loss_name!r}; choose from {', '.join(LOSS_NAMES)}")
    if trials < 1:
        raise InvalidArgumentError(f"trials must be >= 1, got {trials}")
    loss = zoo_loss(loss_name, L, K=K, epsilon=epsilon, B=B)
    if not loss.has_gradient:
        raise InvalidArgumentError(f"loss {loss_name!r} has no gradient to check")
    tol = SMOOTH_TOL if loss_name in EXACT_SMOOTH_LOSSES else GRADCHECK_TOL
    rng = make_rng(seed)
    rows = []
    for trial in range(trials):
        for resamples in range(max_resamples + 1):
            s = rng.standard_normal(L)
            y = int(rng.integers(L))
            noise = NoiseBatch.from_array(rng.standard_normal((B, L))) if loss.needs_noise else None
            central, forward, backward = finite_differences(lambda P: loss(P, y, noise), s, h)
            if loss_name in SMOOTH_LOSSES or np.max(np.abs(forward - backward)) <= tol:
                break
        err = float(np.max(np.abs(loss.evaluate(s, y, noise).grad - central)))
        rows.append(
            {"trial": trial, "y": y, "max_abs_err": err, "tolerance": tol, "passed": err <= tol, "resamples": resamples}
        )
    df = pd.DataFrame(rows)
    logger.info("gradcheck %s: %d/%d trials within %.0e", loss_name, int(df["passed"].sum()), trials, tol)
    return df


# ======================
# GRADIENT SPARSITY
# ======================

def sparsity_sweep(
    L: int = 100,
    K: int = 5,
    epsilon_grid: Sequence[float] = (0.0, 0.01, 0.1, 1.0, 10.0),
    B: int = 3,
    samples: int = 1000,
    seed: int = 0,
) -> pd.DataFrame:
    """Non-zero coordinates of the noised balanced gradient for standard normal scores.

    The same scores, labels and noise are reused at every epsilon.
    """
    if len(epsilon_grid) == 0:
        raise InvalidArgumentError("epsilon grid is empty")
    if samples < 2:
        raise InvalidArgumentError(f"samples must be >= 2, got {samples}")
    rng = make_rng(seed)
    S = rng.standard_normal((samples, L))
    Y = rng.integers(L, size=samples)
    noise = NoiseBatch.from_array(rng.standard_normal((samples, B, L)))
    rows = []
    for eps in epsilon_grid:
        loss = make_loss("noised_balanced", K=K, epsilon=float(eps), B=B)
        _, grads = loss.evaluate_batch(S, Y, noise)
        nnz = np.count_nonzero(grads, axis=1)
        rows.append({"epsilon": float(eps), "mean_nnz": float(nnz.mean()), "std_nnz": float(nnz.std(ddof=1))})
        logger.info("sparsity eps=%g mean_nnz=%.3f", eps, nnz.mean())
    return pd.DataFrame(rows)


# ======================
# SIMPLEX LEVEL SETS
# ======================

def simplex_points(mesh_steps: int, scale: float = 2.0) -> np.ndarray:
    """Barycentric mesh of scale * simplex in R^3."""
    if mesh_steps < 1:
        raise InvalidArgumentError(f"mesh_steps must be >= 1, got {mesh_steps}")
    points = []
    for i in range(mesh_steps, -1, -1):
        for j in range(mesh_steps - i, -1, -1):
            points.append((i, j, mesh_steps - i - j))
    return scale * np.asarray(points, dtype=np.float64) / mesh_steps


def simplex_mesh(
    loss_name: str,
    K: int = 1,
    y: int = 0,
    mesh_steps: int = 30,
    replications: int = 100,
    epsilon: float = 0.3,
    B: int = 1,
    counts: Sequence[int] = (100, 20, 5),
    max_margin: float = 0.5,
    tau: float = 1.0,
    gamma: float = 2.0,
    seed: int = 0,
    L: int = 3,
) -> pd.DataFrame:
    """Loss values over 2 * simplex for L=3, min-max rescaled to [0, 1].

    Noised losses are averaged over `replications` independent noise batches,
    each shared by every mesh point.
    """
    if L != 3:
        raise InvalidArgumentError(f"level sets are drawn for L=3 only, got L={L}")
    if not 0 <= y < 3:
        raise InvalidArgumentError(f"label must lie in [0, 3), got {y}")
    loss = zoo_loss(loss_name, 3, K=K, epsilon=epsilon, B=B, tau=tau, gamma=gamma, counts=counts, max_margin=max_margin)
    P = simplex_points(mesh_steps)
    if loss.needs_noise:
        if replications < 1:
            raise InvalidArgumentError(f"replications must be >= 1, got {replications}")
        rng = make_rng(seed)
        raw = np.zeros(P.shape[0])
        for _ in range(replications):
            raw += loss(P, y, NoiseBatch.from_array(rng.standard_normal((B, 3))))
        raw /= replications
    else:
        raw = loss(P, y)
    span = raw.max() - raw.min()
    scaled = (raw - raw.min()) / span if span > 0 else np.zeros_like(raw)
    df = pd.DataFrame(P, columns=list(SIMPLEX_COLUMNS))
    df["loss_value"] = scaled
    df["raw_value"] = raw
    return df


def mesh_roughness(frame: pd.DataFrame, column: str = "raw_value") -> float:
    """Largest |value difference| between adjacent cells of a simplex mesh frame."""
    P = frame[list(SIMPLEX_COLUMNS)].to_numpy()
    steps = frame["s1"].nunique() - 1
    if steps < 1:
        raise InvalidArgumentError("mesh has a single point")
    idx = np.rint(P * steps / P[0].sum()).astype(int)
    grid = np.full((steps + 1, steps + 1), np.nan)
    grid[idx[:, 0], idx[:, 1]] = frame[column].to_numpy()
    diffs = [
        np.abs(np.diff(grid, axis=0)),
        np.abs(np.diff(grid, axis=1)),
        np.abs(grid[1:, :-1] - grid[:-1, 1:]),
    ]
    return float(max(np.nanmax(d) for d in diffs))


# ======================
# TIMING
# ======================

def timing_sweep(
    K_grid: Sequence[int] = (1, 5, 10, 20),
    L: int = 100,
    B: int = 3,
    batch: int = 4096,
    repeats: int = 5,
    warmup: int = 2,
    epsilon: float = 0.1,
    tau: float = 1.0,
    seed: int = 0,
    losses: Sequence[str] = TIMED_LOSSES,
    blas_threads: Optional[int] = 1,
) -> pd.DataFrame:
    """Wall-clock time of one batched loss evaluation (value and gradient) per K.

    All losses see the same scores, labels and noise. Warmup calls are not timed.
    Repeats go round-robin over the K grid. BLAS is held to `blas_threads`
    threads (None leaves it alone).
    """
    if len(K_grid) == 0 or repeats < 1 or batch < 1:
        raise InvalidArgumentError("need a non-empty K grid, repeats >= 1 and batch >= 1")
    if blas_threads is not None and blas_threads < 1:
        raise InvalidArgumentError(f"blas_threads must be >= 1, got {blas_threads}")
    rng = make_rng(seed)
    S = rng.standard_normal((batch, L))
    Y = rng.integers(L, size=batch)
    noise = NoiseBatch.from_array(rng.standard_normal((B, L)))
    cells = [(int(K), name, zoo_loss(name, L, K=K, epsilon=epsilon, B=B, tau=tau)) for K in K_grid for name in losses]
    times = np.empty((len(cells), repeats))
    pinned = threadpool_limits(limits=blas_threads) if blas_threads is not None else contextlib.nullcontext()
    with pinned:
        for _, _, loss in cells:
            for _ in range(warmup):
                loss.evaluate_batch(S, Y, noise)
        for r in range(repeats):
            for c, (_, _, loss) in enumerate(cells):
                start = time.perf_counter()
                loss.evaluate_batch(S, Y, noise)
                times[c, r] = time.perf_counter() - start
    rows = []
    for (K, name, _), t in zip(cells, times):
        rows.append(
            {
                "K": K,
                "loss": name,
                "mean_eval_time": float(t.mean()),
                "std_eval_time": float(t.std(ddof=1)) if repeats > 1 else 0.0,
                "median_eval_time": float(np.median(t)),
            }
        )
        logger.info("timing K=%d %s median %.3g s", K, name, np.median(t))
    return pd.DataFrame(rows)


def timing_slope(
    frame: pd.DataFrame, loss: str, column: str = "mean_eval_time", level: float = 0.95
) -> Tuple[float, float, float]:
    """Least-squares slope of time against K with a Student-t confidence interval."""
    sub = frame[frame["loss"] == loss]
    n = sub.shape[0]
    if n < 3:
        raise InvalidArgumentError(f"need at least 3 K values to fit a slope for {loss!r}, got {n}")
    X = sub[["K"]].to_numpy(dtype=np.float64)
    t = sub[column].to_numpy(dtype=np.float64)
    reg = LinearRegression().fit(X, t)
    slope = float(reg.coef_[0])
    resid = t - reg.predict(X)
    sxx = float(np.sum((X[:, 0] - X[:, 0].mean()) ** 2))
    if sxx == 0:
        raise InvalidArgumentError("all K values are equal")
    se = np.sqrt(np.sum(resid ** 2) / (n - 2) / sxx)
    half = stats.t.ppf(0.5 + level / 2, n - 2) * se
    return slope, slope - half, slope + half


# ======================
# TRAINING SWEEPS
# ======================

@dataclasses.dataclass(frozen=True)
class SweepRecipe:
    """A parameter grid with the losses, toy task and training settings it is run with."""

    param: str
    values: Tuple[float, ...]
    losses: Tuple[str, ...]
    task: str = "orthogonal20"
    overrides: Mapping[str, object] = dataclasses.field(default_factory=dict)

    def config(self, base: TrainConfig, keep: Collection[str] = ()) -> TrainConfig:
        """`base` with the recipe's training settings, except the keys listed in `keep`."""
        values = {k: v for k, v in self.overrides.items() if k not in keep}
        return dataclasses.replace(base, **coerce_fields(TrainConfig, values))


# Bias-free scorer on orthogonal classes: at epsilon = 0 a class climbing from
# below stops at rank K+1, where the calibrated hinge has a zero gradient.
_STALL = {"bias": False, "lr": 0.003, "epochs": 100, "lr_drop_epochs": (), "K": 5, "B": 3, "eval_K": 5}
_SEPARATED = {"bias": False, "K": 5, "eval_K": 5}

SWEEP_RECIPES: Dict[str, SweepRecipe] = {
    "epsilon": SweepRecipe("epsilon", (0.0, 1e-3, 1e-1, 1.0), ("noised_balanced",), "orthogonal100", _STALL),
    "label_noise": SweepRecipe(
        "label_noise", (0.0, 0.2, 0.4), ("ce", "noised_balanced"), overrides=dict(_SEPARATED, epsilon=0.2, B=10)
    ),
    "B": SweepRecipe("B", (1, 5, 10, 50), ("noised_balanced",), overrides=_SEPARATED),
    "imbalanced_epsilon": SweepRecipe("epsilon", EPSILON_GRID, ("noised_imbalanced",), overrides=_SEPARATED),
    "max_margin": SweepRecipe("max_margin", MAX_MARGIN_GRID, ("noised_imbalanced", "ldam"), overrides=_SEPARATED),
    "tau": SweepRecipe("tau", TAU_GRID, ("smoothed_hinge",), overrides=_SEPARATED),
    "gamma": SweepRecipe("gamma", GAMMA_GRID, ("focal",), overrides=_SEPARATED),
}

TOY_TASKS = ("longtail100", "longtail20", "orthogonal100", "orthogonal20")


def toy_task(name: str, seed: int = 0) -> LongTailSpec:
    """Named desk-scale tasks.

    ``longtail100`` (100 -> 10 per class) and ``longtail20`` (200 -> 5) draw
    overlapping Gaussian classes. The ``orthogonal`` variants use the same
    counts with orthogonal unit means and almost no within-class spread.
    """
    if name == "longtail100":
        return LongTailSpec(
            counts=exponential_counts(100, 100, 10),
            dim=32,
            superclasses=contiguous_superclasses(100, 5),
            seed=seed,
        )
    if name == "longtail20":
        return LongTailSpec(
            counts=exponential_counts(20, 200, 5),
            dim=16,
            superclasses=contiguous_superclasses(20, 5),
            seed=seed,
        )
    if name == "orthogonal100":
        return LongTailSpec(
            counts=exponential_counts(100, 100, 10),
            dim=128,
            superclasses=contiguous_superclasses(100, 5),
            class_separation=1.0,
            noise_std=1e-4,
            orthogonal_means=True,
            seed=seed,
        )
    if name == "orthogonal20":
        return LongTailSpec(
            counts=exponential_counts(20, 200, 5),
            dim=32,
            superclasses=contiguous_superclasses(20, 5),
            class_separation=1.0,
            noise_std=1e-4,
            orthogonal_means=True,
            seed=seed,
        )
    raise InvalidArgumentError(f"unknown toy task {name!r}; choose from {', '.join(TOY_TASKS)}")


def _run_one(ds: LongTailDataset, cfg: TrainConfig, param: str, value) -> Dict[str, object]:
    result = train(ds, cfg)
    row: Dict[str, object] = {"loss": cfg.loss, "param": param, "value": value, "seed": cfg.seed}
    row["best_epoch"] = result.best_epoch
    counts = ds.train_counts
    for split in ("val", "test"):
        report = evaluate(result.model, ds.split(split), cfg.eval_K, counts)
        row.update({f"{split}_{k}": v for k, v in report.as_row().items()})
    logger.info("sweep %s %s=%s seed=%d val macro %.4f", cfg.loss, param, value, cfg.seed, row["val_macro_top_k_accuracy"])
    return row


def run_sweep(
    ds: LongTailDataset,
    base: TrainConfig,
    param: str,
    values: Sequence,
    losses: Sequence[str],
    seeds: Sequence[int] = (0, 1, 2),
    jobs: int = 1,
) -> pd.DataFrame:
    """Trains every (loss, value, seed) combination and reports best-model metrics.

    Runs are independent and deterministic, so `jobs > 1` only changes the
    wall-clock time; row order is always loss, value, seed.
    """
    if len(values) == 0 or len(losses) == 0 or len(seeds) == 0:
        raise InvalidArgumentError("sweep needs at least one value, loss and seed")
    if param in ("loss", "seed"):
        raise InvalidArgumentError(f"{param!r} is set by the sweep itself and cannot be swept as a parameter")
    configs = []
    for loss in losses:
        for value in values:
            typed = coerce_fields(TrainConfig, {param: str(value)})[param]
            for seed in seeds:
                cfg = dataclasses.replace(base, loss=loss, seed=int(seed), **{param: typed})
                cfg.validate()
                configs.append((cfg, typed))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(lambda c: _run_one(ds, c[0], param, c[1]), configs))
    else:
        rows = [_run_one(ds, cfg, param, typed) for cfg, typed in configs]
    return pd.DataFrame(rows)
