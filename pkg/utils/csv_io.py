"""CSV artifacts with a provenance header.

Every file starts with ``# key=value`` comment lines (the resolved
configuration plus the package and numpy versions), then a normal header row.
``read_csv`` returns the frame together with that provenance dict.
"""
import dataclasses
import io
import os
from typing import Any, Dict, Mapping, Tuple

import numpy as np
import pandas as pd

from services import __version__

COMMENT = "#"


def _format(value: Any) -> str:
    if isinstance(value, (list, tuple, np.ndarray)):
        return ",".join(_format(v) for v in value)
    return str(value).replace("\n", " ")


def provenance(config: Mapping[str, Any]) -> Dict[str, str]:
    if dataclasses.is_dataclass(config):
        config = dataclasses.asdict(config)
    meta = {"topk_version": __version__, "numpy_version": np.__version__}
    meta.update({str(k): _format(v) for k, v in config.items()})
    return meta


def write_csv(df: pd.DataFrame, path: str, config: Mapping[str, Any]) -> str:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for key, value in provenance(config).items():
            fh.write(f"{COMMENT} {key}={value}\n")
        df.to_csv(fh, index=False)
    return path


def read_csv(source) -> Tuple[pd.DataFrame, Dict[str, str]]:
    """`source` is a path or a file-like object (e.g. a Streamlit upload)."""
    if hasattr(source, "read"):
        text = source.read()
        text = text.decode("utf-8") if isinstance(text, bytes) else text
    else:
        with open(source, encoding="utf-8") as fh:
            text = fh.read()
    meta = {}
    for line in text.splitlines():
        if not line.startswith(COMMENT):
            break
        key, _, value = line[len(COMMENT):].strip().partition("=")
        meta[key] = value
    df = pd.read_csv(io.StringIO(text), comment=COMMENT, float_precision="round_trip")
    return df, meta
