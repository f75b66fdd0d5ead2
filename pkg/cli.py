"""Command-line front door: every subcommand writes one provenance-stamped CSV.

Parameters come from dataclass defaults, then a flat key=value ``--config``
file, then explicit flags and ``--set key=value`` overrides (last wins).

Exit codes: 0 success, 1 usage error, 2 a check failed (tolerance exceeded or
training diverged).
"""
import argparse
import dataclasses
import functools
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd

from services.calibration import calibration_probe, probe_frame, search_witness
from services.datasets import generate_longtail, load_dataset, save_dataset
from services.errors import InvalidArgumentError, ToleranceError, TrainingError
from services.experiments import (
    SWEEP_RECIPES,
    gradcheck_trials,
    run_sweep,
    simplex_mesh,
    sparsity_sweep,
    timing_slope,
    timing_sweep,
    toy_task,
    zoo_loss,
)
from services.metrics import evaluate, shot_group
from services.model import load_checkpoint, save_checkpoint
from services.settings import coerce_fields, configure_logging, get_settings, read_config_file
from services.smoothing import sample_noise
from services.training import TrainConfig, metrics_history_frame, train
from utils.csv_io import write_csv

logger = logging.getLogger("cli")

EXIT_OK, EXIT_USAGE, EXIT_FAILED = 0, 1, 2


# ======================
# SUBCOMMAND CONFIGS
# ======================

@dataclasses.dataclass(frozen=True)
class GradcheckConfig:
    loss: str = "noised_balanced"
    L: int = 10
    K: int = 3
    epsilon: float = 0.5
    B: int = 5
    trials: int = 100
    seed: int = 0


@dataclasses.dataclass(frozen=True)
class SparsityConfig:
    L: int = 100
    K: int = 5
    epsilon_grid: Tuple[float, ...] = (0.0, 0.01, 0.1, 1.0, 10.0)
    B: int = 3
    samples: int = 1000
    seed: int = 0


@dataclasses.dataclass(frozen=True)
class SimplexConfig:
    loss: str = "noised_balanced"
    K: int = 1
    y: int = 0
    L: int = 3
    mesh_steps: int = 30
    replications: int = 100
    epsilon: float = 0.3
    B: int = 1
    counts: Tuple[int, ...] = (100, 20, 5)
    max_margin: float = 0.5
    tau: float = 1.0
    gamma: float = 2.0
    seed: int = 0


@dataclasses.dataclass(frozen=True)
class TimingConfig:
    K_grid: Tuple[int, ...] = (1, 5, 10, 20)
    L: int = 100
    B: int = 3
    batch: int = 4096
    repeats: int = 5
    warmup: int = 2
    epsilon: float = 0.1
    tau: float = 1.0
    seed: int = 0
    blas_threads: Optional[int] = 1


@dataclasses.dataclass(frozen=True)
class DataConfig:
    task: str = "longtail20"
    data_dir: Optional[str] = None
    dataset_seed: int = 0
    save_data: Optional[str] = None


@dataclasses.dataclass(frozen=True)
class EvalConfig:
    checkpoint: str = "model.npz"
    split: str = "test"
    eval_K: int = 5


@dataclasses.dataclass(frozen=True)
class SweepConfig:
    recipe: Optional[str] = None
    param: str = "epsilon"
    values: Tuple[str, ...] = ()
    losses: Tuple[str, ...] = ("noised_balanced",)
    seeds: Tuple[int, ...] = (0, 1, 2)
    jobs: int = 1


@dataclasses.dataclass(frozen=True)
class ProbeConfig:
    loss: str = "ce"
    K: int = 1
    L: int = 3
    pi: Optional[Tuple[float, ...]] = None
    search_steps: int = 10
    radius: float = 3.0
    steps: int = 61
    epsilon: float = 0.0
    B: int = 1
    tau: float = 1.0
    gamma: float = 2.0
    max_margin: float = 0.5
    seed: int = 0


SCHEMAS = {
    "gradcheck": "trial, y, max_abs_err, tolerance, passed, resamples",
    "sparsity": "epsilon, mean_nnz, std_nnz",
    "simplex": "s1, s2, s3, loss_value (rescaled to [0, 1]), raw_value",
    "timing": "K, loss, mean_eval_time, std_eval_time, median_eval_time (seconds)",
    "train": "epoch, split, lr, train_loss, top_k_accuracy, macro_top_k_accuracy, few/medium/many_macro_top_k",
    "eval": "class, train_count, shot_group, top_k_accuracy (one row per class)",
    "sweep": "loss, param, value, seed, best_epoch, val_* and test_* metrics",
    "probe": "loss, K, pi, unrestricted_min, restricted_min, gap",
}


# ======================
# CONFIG RESOLUTION
# ======================

def _field_names(cls) -> List[str]:
    return [f.name for f in dataclasses.fields(cls)]


def resolve(classes: Sequence[type], file_values: Dict[str, str], flags: Dict[str, str]) -> Tuple[object, ...]:
    """Instantiates each class from defaults < env settings < config file < flags."""
    settings = get_settings()
    merged: Dict[str, str] = {}
    merged.update(file_values)
    merged.update(flags)
    known = {name for cls in classes for name in _field_names(cls)}
    unknown = sorted(set(merged) - known)
    if unknown:
        raise InvalidArgumentError(f"unknown configuration keys: {', '.join(unknown)}")
    out = []
    for cls in classes:
        names = _field_names(cls)
        values = {k: v for k, v in merged.items() if k in names}
        if "seed" in names and "seed" not in values:
            values["seed"] = str(settings.seed)
        if "workers" in names and "workers" not in values:
            values["workers"] = str(settings.workers)
        try:
            out.append(cls(**coerce_fields(cls, values)))
        except TypeError as e:
            raise InvalidArgumentError(f"bad configuration for {cls.__name__}: {e}") from e
    return tuple(out)


def _parse_sets(pairs: Sequence[str]) -> Dict[str, str]:
    out = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise InvalidArgumentError(f"--set expects key=value, got {pair!r}")
        out[key.strip()] = value.strip()
    return out


def _provenance(command: str, *configs) -> Dict[str, object]:
    out: Dict[str, object] = {"command": command}
    for cfg in configs:
        out.update(dataclasses.asdict(cfg))
    return out


def _output_path(args, command: str) -> str:
    return args.out or os.path.join(get_settings().output_dir, f"{command}.csv")


def _dataset(data: DataConfig):
    if data.data_dir:
        ds = load_dataset(data.data_dir)
    else:
        ds = generate_longtail(toy_task(data.task, data.dataset_seed))
    if data.save_data:
        save_dataset(ds, data.save_data)
    return ds


# ======================
# COMMANDS
# ======================

def cmd_gradcheck(args, cfg: GradcheckConfig) -> int:
    df = gradcheck_trials(cfg.loss, cfg.L, cfg.K, cfg.epsilon, cfg.B, cfg.trials, cfg.seed)
    write_csv(df, _output_path(args, "gradcheck"), _provenance("gradcheck", cfg))
    failed = int((~df["passed"]).sum())
    if failed:
        raise ToleranceError(f"{failed} of {cfg.trials} trials exceeded tolerance {df['tolerance'].iloc[0]:.0e}")
    return EXIT_OK


def cmd_sparsity(args, cfg: SparsityConfig) -> int:
    df = sparsity_sweep(cfg.L, cfg.K, cfg.epsilon_grid, cfg.B, cfg.samples, cfg.seed)
    write_csv(df, _output_path(args, "sparsity"), _provenance("sparsity", cfg))
    return EXIT_OK


def cmd_simplex(args, cfg: SimplexConfig) -> int:
    df = simplex_mesh(
        cfg.loss,
        K=cfg.K,
        y=cfg.y,
        mesh_steps=cfg.mesh_steps,
        replications=cfg.replications,
        epsilon=cfg.epsilon,
        B=cfg.B,
        counts=cfg.counts,
        max_margin=cfg.max_margin,
        tau=cfg.tau,
        gamma=cfg.gamma,
        seed=cfg.seed,
        L=cfg.L,
    )
    write_csv(df, _output_path(args, "simplex"), _provenance("simplex", cfg))
    return EXIT_OK


def cmd_timing(args, cfg: TimingConfig) -> int:
    df = timing_sweep(
        cfg.K_grid, cfg.L, cfg.B, cfg.batch, cfg.repeats, cfg.warmup, cfg.epsilon, cfg.tau, cfg.seed,
        blas_threads=cfg.blas_threads,
    )
    write_csv(df, _output_path(args, "timing"), _provenance("timing", cfg))
    if len(cfg.K_grid) >= 3:
        for name in df["loss"].unique():
            slope, low, high = timing_slope(df, name, column="median_eval_time")
            logger.info("%s: slope %.3g s per unit K (95%% CI %.3g .. %.3g)", name, slope, low, high)
    return EXIT_OK


def cmd_train(args, data: DataConfig, cfg: TrainConfig) -> int:
    ds = _dataset(data)
    result = train(ds, cfg)
    path = _output_path(args, "train")
    write_csv(metrics_history_frame(result.history), path, _provenance("train", data, cfg))
    checkpoint = save_checkpoint(result.model, os.path.splitext(path)[0] + ".npz")
    test = evaluate(result.model, ds.split("test"), cfg.eval_K, ds.train_counts)
    logger.info(
        "best epoch %d; test top-%d %.4f macro %.4f; checkpoint %s",
        result.best_epoch, cfg.eval_K, test.top_k_accuracy, test.macro_top_k_accuracy, checkpoint,
    )
    return EXIT_OK


def cmd_eval(args, data: DataConfig, cfg: EvalConfig) -> int:
    ds = _dataset(data)
    model = load_checkpoint(cfg.checkpoint)
    counts = ds.train_counts
    report = evaluate(model, ds.split(cfg.split), cfg.eval_K, counts)
    rows = [
        {"class": c, "train_count": int(counts[c]), "shot_group": shot_group(int(counts[c])), "top_k_accuracy": acc}
        for c, acc in enumerate(report.per_class)
    ]
    summary = dict(_provenance("eval", data, cfg))
    summary.update(report.as_row())
    write_csv(pd.DataFrame(rows), _output_path(args, "eval"), summary)
    logger.info("%s top-%d %.4f macro %.4f", cfg.split, cfg.eval_K, report.top_k_accuracy, report.macro_top_k_accuracy)
    return EXIT_OK


def cmd_sweep(args, sweep: SweepConfig, data: DataConfig, cfg: TrainConfig, explicit=()) -> int:
    param, values, losses = sweep.param, sweep.values, sweep.losses
    if sweep.recipe is not None:
        if sweep.recipe not in SWEEP_RECIPES:
            raise InvalidArgumentError(f"unknown recipe {sweep.recipe!r}; choose from {', '.join(SWEEP_RECIPES)}")
        recipe = SWEEP_RECIPES[sweep.recipe]
        param = param if "param" in explicit else recipe.param
        values = values if "values" in explicit else tuple(str(v) for v in recipe.values)
        losses = losses if "losses" in explicit else recipe.losses
        if "task" not in explicit:
            data = dataclasses.replace(data, task=recipe.task)
        cfg = recipe.config(cfg, keep=explicit)
    ds = _dataset(data)
    df = run_sweep(ds, cfg, param, values, losses, sweep.seeds, sweep.jobs)
    resolved = dataclasses.replace(sweep, param=param, values=tuple(values), losses=tuple(losses))
    write_csv(df, _output_path(args, "sweep"), _provenance("sweep", resolved, data, cfg))
    return EXIT_OK


def cmd_probe(args, cfg: ProbeConfig) -> int:
    loss = zoo_loss(
        cfg.loss, cfg.L, K=cfg.K, epsilon=cfg.epsilon, B=cfg.B, tau=cfg.tau, gamma=cfg.gamma, max_margin=cfg.max_margin
    )
    fn = loss
    if loss.needs_noise:
        # one fixed batch: the probe scans a deterministic surrogate
        fn = functools.partial(loss, noise=sample_noise(cfg.L, cfg.B, cfg.seed))
    if cfg.pi is not None:
        if len(cfg.pi) != cfg.L:
            raise InvalidArgumentError(f"pi has {len(cfg.pi)} entries for L={cfg.L}")
        reports = [calibration_probe(fn, cfg.pi, cfg.K, cfg.radius, cfg.steps, name=cfg.loss)]
    else:
        reports = search_witness(fn, cfg.L, cfg.K, cfg.search_steps, cfg.radius, cfg.steps, name=cfg.loss)
    write_csv(probe_frame(reports), _output_path(args, "probe"), _provenance("probe", cfg))
    return EXIT_OK


COMMANDS = {
    "gradcheck": ("Finite-difference check of a loss gradient", (GradcheckConfig,), cmd_gradcheck),
    "sparsity": ("Non-zero gradient coordinates vs epsilon", (SparsityConfig,), cmd_sparsity),
    "simplex": ("Loss level sets on 2 x simplex (L=3)", (SimplexConfig,), cmd_simplex),
    "timing": ("Batched loss evaluation time vs K", (TimingConfig,), cmd_timing),
    "train": ("Train a scorer on a toy long-tailed task", (DataConfig, TrainConfig), cmd_train),
    "eval": ("Evaluate a saved checkpoint", (DataConfig, EvalConfig), cmd_eval),
    "sweep": ("Training grid over one parameter, losses and seeds", (SweepConfig, DataConfig, TrainConfig), cmd_sweep),
    "probe": ("Calibration probe or witness search", (ProbeConfig,), cmd_probe),
}


# ======================
# PARSER
# ======================

class UsageParser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; this CLI reserves 2 for failed checks."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = UsageParser(prog="topk", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, ... (default: TOPK_LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (help_text, classes, _) in COMMANDS.items():
        p = sub.add_parser(
            name,
            help=help_text,
            description=help_text,
            epilog=f"CSV columns: {SCHEMAS[name]}",
            argument_default=argparse.SUPPRESS,
        )
        p.add_argument("--config", help="flat key=value file")
        p.add_argument("--out", help="output CSV path (default: $TOPK_OUTPUT_DIR/<command>.csv)")
        p.add_argument("--set", action="append", dest="overrides", metavar="KEY=VALUE", help="override any key")
        seen = set()
        for cls in classes:
            for f in dataclasses.fields(cls):
                if f.name in seen:
                    continue
                seen.add(f.name)
                default = f.default if f.default is not None else "unset"
                if isinstance(default, tuple):
                    default = ",".join(str(v) for v in default) or "empty"
                p.add_argument(
                    f"--{f.name.replace('_', '-')}",
                    dest=f"field_{f.name}",
                    metavar="VALUE",
                    help=f"default: {default}",
                )
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.config = getattr(args, "config", None)
    args.out = getattr(args, "out", None)
    configure_logging(args.log_level)
    _, classes, handler = COMMANDS[args.command]
    try:
        file_values = read_config_file(args.config) if args.config else {}
        flags = {k[len("field_"):]: v for k, v in vars(args).items() if k.startswith("field_")}
        flags.update(_parse_sets(getattr(args, "overrides", None)))
        configs = resolve(classes, file_values, flags)
        if handler is cmd_sweep:
            return handler(args, *configs, explicit=set(file_values) | set(flags))
        return handler(args, *configs)
    except InvalidArgumentError as e:
        logger.error("usage error: %s", e)
        return EXIT_USAGE
    except (ToleranceError, TrainingError) as e:
        logger.error("check failed: %s", e)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
