import dataclasses
import logging
import os
import typing
from functools import lru_cache
from typing import Any, Dict, Mapping, Optional

from dotenv import dotenv_values, load_dotenv

from services.errors import InvalidArgumentError

load_dotenv()

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


@dataclasses.dataclass(frozen=True)
class Settings:
    output_dir: str = "results"
    log_level: str = "INFO"
    seed: int = 0
    workers: int = 1


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    """Reads the process-wide settings from the environment (.env included)."""
    try:
        seed = int(os.getenv("TOPK_SEED", "0"))
        workers = int(os.getenv("TOPK_WORKERS", "1"))
    except ValueError as e:
        raise InvalidArgumentError(f"TOPK_SEED / TOPK_WORKERS must be integers: {e}") from e
    return Settings(
        output_dir=os.getenv("TOPK_OUTPUT_DIR", "results"),
        log_level=os.getenv("TOPK_LOG_LEVEL", "INFO").upper(),
        seed=seed,
        workers=max(1, workers),
    )


def configure_logging(level: Optional[str] = None) -> None:
    logging.basicConfig(level=(level or get_settings().log_level), format=LOG_FORMAT)


# ======================
# CONFIG FILES (key=value)
# ======================

def read_config_file(path: str) -> Dict[str, str]:
    """Loads a flat key=value file (same syntax as .env)."""
    if not os.path.isfile(path):
        raise InvalidArgumentError(f"config file not found: {path}")
    return {k.strip(): v for k, v in dotenv_values(path).items() if v is not None}


def _parse_value(raw: Any, annotation: Any, key: str) -> Any:
    if not isinstance(raw, str):
        return raw
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    if origin is typing.Union:
        # Optional[X]
        inner = [a for a in args if a is not type(None)]
        if raw.strip().lower() in ("", "none", "null"):
            return None
        return _parse_value(raw, inner[0], key)
    if origin in (tuple, list):
        item_type = args[0] if args else str
        items = [p.strip() for p in raw.split(",") if p.strip()]
        return tuple(_parse_value(p, item_type, key) for p in items)
    try:
        if annotation is bool:
            lowered = raw.strip().lower()
            if lowered not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return lowered in ("1", "true", "yes")
        if annotation is int:
            return int(raw)
        if annotation is float:
            return float(raw)
    except ValueError as e:
        raise InvalidArgumentError(f"bad value for {key!r}: {raw!r}") from e
    return raw


def coerce_fields(cls: type, values: Mapping[str, Any]) -> Dict[str, Any]:
    """Converts string values onto the field types of dataclass `cls`."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    out: Dict[str, Any] = {}
    for key, raw in values.items():
        if key not in names:
            raise InvalidArgumentError(f"unknown configuration key {key!r} for {cls.__name__}")
        out[key] = _parse_value(raw, hints[key], key)
    return out
