"""
Report writers.

Bulk numeric tables go to CSV through pandas with 17 significant digits;
summaries go to JSON, where Python's shortest round-trip float repr is
lossless.
"""

import json
from pathlib import Path
from typing import Iterable, List, Mapping, Sequence, Union

import numpy as np
import pandas as pd
import structlog

from main.rates import CSV_COLUMNS, ApproximationRow, RateReport
from main.spectral import SpectralDecomposition

logger = structlog.get_logger(__name__)

FLOAT_FORMAT = "%.17g"

PathLike = Union[str, Path]


def _to_builtin(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def write_json(path: PathLike, document: Mapping) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(document, f, indent=2, sort_keys=True, default=_to_builtin)
        f.write("\n")
    logger.debug("json_written", path=str(path))
    return path


def write_table(path: PathLike, records: Iterable[Mapping], columns: Sequence[str]) -> Path:
    """CSV with a fixed header; an empty record list yields the header alone."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(list(records), columns=list(columns))
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.debug("csv_written", path=str(path), rows=len(frame))
    return path


def write_rate_report(report: RateReport, out_dir: PathLike) -> List[Path]:
    """``rate_trials.csv`` and ``rate_summary.json``."""
    out_dir = Path(out_dir)
    csv_path = write_table(out_dir / "rate_trials.csv", (row.csv_record() for row in report.rows), CSV_COLUMNS)
    json_path = write_json(out_dir / "rate_summary.json", report.to_summary())
    return [csv_path, json_path]


def write_eigenvalues(dec: SpectralDecomposition, path: PathLike) -> Path:
    records = ({"mode": index + 1, "eigenvalue": float(value)} for index, value in enumerate(dec.eigenvalues))
    return write_table(path, records, ("mode", "eigenvalue"))


def write_approximation_sweep(rows: Sequence[ApproximationRow], path: PathLike) -> Path:
    records = (
        {
            "r": row.r,
            "lambda": row.lam,
            "target": row.target,
            "err_K": row.err_k,
            "bound": row.bound,
            "violated": int(row.violated),
        }
        for row in rows
    )
    return write_table(path, records, ("r", "lambda", "target", "err_K", "bound", "violated"))


def write_predictions(node_indices: Sequence[int], values: np.ndarray, path: PathLike) -> Path:
    """Predictions as ``node_index, f_1..f_m``."""
    values = np.asarray(values, dtype=float)
    m = values.shape[1] if values.ndim == 2 else 1
    columns = ["node_index"] + [f"f_{p + 1}" for p in range(m)]
    records = (
        {"node_index": int(index), **{f"f_{p + 1}": float(row[p]) for p in range(m)}}
        for index, row in zip(node_indices, values.reshape(len(node_indices), m))
    )
    return write_table(path, records, columns)
