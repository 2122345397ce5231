"""CSV outputs: epoch log, metrics reports, per-user breakdowns, grid summaries."""

import logging
import os
from pathlib import Path
from typing import Any, Sequence, Union

import pyarrow as pa
import pyarrow.csv as pacsv

from prefrank.models import EpochStats, MetricsReport

logger = logging.getLogger(__name__)


def _write_table(path: Union[str, Path], columns: dict[str, list[Any]], types: dict[str, pa.DataType]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = pa.table({name: pa.array(values, types[name]) for name, values in columns.items()})
    tmp_path = path.with_name(path.name + ".tmp")
    pacsv.write_csv(table, str(tmp_path), write_options=pacsv.WriteOptions(include_header=True))
    os.replace(tmp_path, path)
    return path


def write_epoch_log(path: Union[str, Path], history: Sequence[EpochStats], n: int = 20) -> Path:
    """One row per epoch: epoch, total_loss, val_recall@N, val_ndcg@N, seconds."""
    recall_col = f"val_recall@{n}"
    ndcg_col = f"val_ndcg@{n}"
    columns = {
        "epoch": [s.epoch for s in history],
        "total_loss": [s.total_loss for s in history],
        recall_col: [s.val_recall for s in history],
        ndcg_col: [s.val_ndcg for s in history],
        "seconds": [round(s.seconds, 3) for s in history],
    }
    types = {
        "epoch": pa.int64(),
        "total_loss": pa.float64(),
        recall_col: pa.float64(),
        ndcg_col: pa.float64(),
        "seconds": pa.float64(),
    }
    return _write_table(path, columns, types)


def write_metrics_report(path: Union[str, Path], report: MetricsReport) -> Path:
    """Single-row summary of a metrics report."""
    columns = {
        "split": [report.split],
        "n": [report.n],
        "users": [report.num_users],
        f"recall@{report.n}": [report.recall_at_n],
        f"ndcg@{report.n}": [report.ndcg_at_n],
    }
    types = {
        "split": pa.string(),
        "n": pa.int64(),
        "users": pa.int64(),
        f"recall@{report.n}": pa.float64(),
        f"ndcg@{report.n}": pa.float64(),
    }
    logger.info(f"Writing metrics report to {path}")
    return _write_table(path, columns, types)


def write_per_user_report(
    path: Union[str, Path],
    report: MetricsReport,
    user_keys: Sequence[str]
) -> Path:
    """One row per evaluated user with the original user key."""
    if report.per_user is None:
        raise ValueError("report carries no per-user rows")
    columns = {
        "user": [user_keys[row.user] for row in report.per_user],
        "user_id": [row.user for row in report.per_user],
        f"recall@{report.n}": [row.recall for row in report.per_user],
        f"ndcg@{report.n}": [row.ndcg for row in report.per_user],
    }
    types = {
        "user": pa.string(),
        "user_id": pa.int64(),
        f"recall@{report.n}": pa.float64(),
        f"ndcg@{report.n}": pa.float64(),
    }
    return _write_table(path, columns, types)


def write_grid_summary(path: Union[str, Path], rows: Sequence[dict[str, Any]]) -> Path:
    """Rows of run settings and metrics; all values written as text or floats."""
    if not rows:
        raise ValueError("grid summary needs at least one row")
    names = list(rows[0])
    columns = {name: [row.get(name) for row in rows] for name in names}
    types = {
        name: pa.float64() if all(isinstance(v, float) or v is None for v in values) else pa.string()
        for name, values in columns.items()
    }
    for name, kind in types.items():
        if kind == pa.string():
            columns[name] = [None if v is None else str(v) for v in columns[name]]
    return _write_table(path, columns, types)
