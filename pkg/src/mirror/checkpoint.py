"""Versioned parameter container: named float tensors + a JSON descriptor.

Backed by .npz so round trips are bit-exact. Loaders validate every tensor
shape against the descriptor and reject mismatches.
"""

import io
import json
import zipfile
from pathlib import Path

import numpy as np

CONTAINER_SCHEMA = "mirror.params.v1"


class CheckpointError(RuntimeError):
    pass


def save_container(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"schema": CONTAINER_SCHEMA, **meta}
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    payload = {"__meta__": np.frombuffer(blob, dtype=np.uint8)}
    for name, arr in arrays.items():
        if name == "__meta__":
            raise CheckpointError("array name '__meta__' is reserved")
        payload[name] = arr
    # deterministic member order for byte-stable files
    buf = io.BytesIO()
    np.savez(buf, **dict(sorted(payload.items())))
    _strip_zip_timestamps(buf)
    path.write_bytes(buf.getvalue())


def _strip_zip_timestamps(buf: io.BytesIO) -> None:
    # np.savez stamps members with the current time; rewrite with a fixed
    # date so identical params give identical files.
    buf.seek(0)
    out = io.BytesIO()
    with zipfile.ZipFile(buf) as zin, zipfile.ZipFile(out, "w", zipfile.ZIP_STORED) as zout:
        for info in zin.infolist():
            data = zin.read(info.filename)
            fixed = zipfile.ZipInfo(info.filename, date_time=(1980, 1, 1, 0, 0, 0))
            zout.writestr(fixed, data)
    buf.seek(0)
    buf.truncate()
    buf.write(out.getvalue())


def load_container(path):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with np.load(path) as data:
        if "__meta__" not in data:
            raise CheckpointError("missing descriptor")
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        if meta.get("schema") != CONTAINER_SCHEMA:
            raise CheckpointError(f"unsupported container schema: {meta.get('schema')!r}")
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    return arrays, meta


def validate_shapes(arrays: dict[str, np.ndarray], expected: dict[str, tuple]) -> None:
    missing = expected.keys() - arrays.keys()
    extra = arrays.keys() - expected.keys()
    if missing or extra:
        raise CheckpointError(f"tensor set mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, shape in expected.items():
        if tuple(arrays[name].shape) != tuple(shape):
            raise CheckpointError(
                f"shape mismatch for {name}: file {arrays[name].shape}, expected {tuple(shape)}"
            )
