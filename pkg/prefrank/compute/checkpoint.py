"""Checkpoint container backed by an Arrow IPC file.

Each record is one array: ``name``, ``kind`` (``param``/``adam_m``/``adam_v``),
``shape``, ``dtype`` (numpy little-endian code such as ``<f8``) and
``payload`` (raw little-endian bytes in C order). Schema metadata carries
``magic``, ``version``, ``config`` (the run config text), ``adam_step`` and
any caller-supplied keys.
"""

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np
import pyarrow as pa
import pyarrow.ipc as ipc

from prefrank.compute.params import ParamStore
from prefrank.errors import CheckpointError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "PREFRANK-CHECKPOINT"
CHECKPOINT_VERSION = "1"

_KINDS = ("param", "adam_m", "adam_v")

SCHEMA = pa.schema([
    pa.field("name", pa.string(), nullable=False),
    pa.field("kind", pa.string(), nullable=False),
    pa.field("shape", pa.list_(pa.int64()), nullable=False),
    pa.field("dtype", pa.string(), nullable=False),
    pa.field("payload", pa.binary(), nullable=False),
])


@dataclass
class Checkpoint:
    """A restored parameter store with the config and metadata saved beside it."""

    store: ParamStore
    config_text: str
    metadata: dict[str, str] = field(default_factory=dict)


def _little_endian(array: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<"))


def save_checkpoint(
    path: Union[str, Path],
    store: ParamStore,
    config_text: str,
    metadata: Union[dict[str, str], None] = None
) -> Path:
    """Atomically write ``store`` (parameters and Adam state) to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    names, kinds, shapes, dtypes, payloads = [], [], [], [], []
    for name in store.names:
        for kind, source in zip(_KINDS, (store.params, store.m, store.v)):
            array = _little_endian(source[name])
            names.append(name)
            kinds.append(kind)
            shapes.append(list(array.shape))
            dtypes.append(array.dtype.str)
            payloads.append(array.tobytes())

    meta = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "config": config_text,
        "adam_step": str(store.step),
    }
    for key, value in (metadata or {}).items():
        meta[key] = str(value)

    table = pa.Table.from_arrays(
        [
            pa.array(names, pa.string()),
            pa.array(kinds, pa.string()),
            pa.array(shapes, pa.list_(pa.int64())),
            pa.array(dtypes, pa.string()),
            pa.array(payloads, pa.binary()),
        ],
        schema=SCHEMA.with_metadata(meta)
    )

    tmp_path = path.with_name(path.name + ".tmp")
    with pa.OSFile(str(tmp_path), "wb") as sink:
        with ipc.new_file(sink, table.schema) as writer:
            writer.write_table(table)
    os.replace(tmp_path, path)
    logger.info(f"Saved checkpoint to {path} ({len(store.names)} parameters, step {store.step})")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Raises:
        CheckpointError: If the file is missing, not an Arrow IPC file, or
            carries the wrong magic or version.
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")

    try:
        with pa.memory_map(str(path), "r") as source:
            table = ipc.open_file(source).read_all()
    except (pa.ArrowInvalid, OSError) as e:
        raise CheckpointError(f"{path}: not a readable checkpoint ({e})") from e

    raw_meta = table.schema.metadata or {}
    meta = {k.decode("utf-8"): v.decode("utf-8") for k, v in raw_meta.items()}
    if meta.get("magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: missing {CHECKPOINT_MAGIC} marker")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {meta.get('version')}, expected {CHECKPOINT_VERSION}"
        )
    if table.schema.remove_metadata() != SCHEMA:
        raise CheckpointError(f"{path}: unexpected column layout")

    arrays: dict[str, dict[str, np.ndarray]] = {kind: {} for kind in _KINDS}
    for row in table.to_pylist():
        if row["kind"] not in arrays:
            raise CheckpointError(f"{path}: unknown record kind {row['kind']!r}")
        dtype = np.dtype(row["dtype"])
        array = np.frombuffer(row["payload"], dtype=dtype).reshape(row["shape"])
        arrays[row["kind"]][row["name"]] = array.astype(dtype.newbyteorder("="), copy=True)

    params = arrays["param"]
    if set(arrays["adam_m"]) != set(params) or set(arrays["adam_v"]) != set(params):
        raise CheckpointError(f"{path}: Adam state does not match parameters")

    store = ParamStore(params)
    for name in store.names:
        if arrays["adam_m"][name].shape != params[name].shape or arrays["adam_v"][name].shape != params[name].shape:
            raise CheckpointError(f"{path}: Adam moment shape mismatch for {name}")
        store.m[name] = arrays["adam_m"][name]
        store.v[name] = arrays["adam_v"][name]
    store.step = int(meta.get("adam_step", "0"))

    config_text = meta.pop("config", "")
    for key in ("magic", "version", "adam_step"):
        meta.pop(key, None)
    logger.info(f"Loaded checkpoint from {path} ({len(store.names)} parameters)")
    return Checkpoint(store=store, config_text=config_text, metadata=meta)
