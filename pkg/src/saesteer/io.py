"""File formats and atomic writes.

Activation file layout (little endian)::

    b"SAEACT1" | u32 n_rows | u32 d_model | u8 dtype (1 = f32) | payload

followed by ``n_rows * d_model`` row-major float32 values. Metadata lives in a
sidecar CSV keyed by row index.

Checkpoints (LM, SAE, probe results) share one container::

    magic (8 bytes) | u16 version | u32 meta_len | meta JSON | arrays

Arrays are written in the order listed in ``meta["arrays"]`` as raw
little-endian bytes of the recorded dtype and shape.
"""

from __future__ import annotations

import contextlib
import csv
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

ACT_MAGIC = b"SAEACT1"
ACT_HEADER = struct.Struct("<7sIIB")
DTYPE_F32 = 1

BLOB_VERSION = 1
LM_MAGIC = b"SAELM\x00\x00\x01"
SAE_MAGIC = b"SAESAE\x00\x01"
PROBE_MAGIC = b"SAEPRB\x00\x01"


class FormatError(ValueError):
    """Raised for corrupt or mismatched artifact files."""


@contextlib.contextmanager
def atomic_path(path: Path | str) -> Iterator[Path]:
    """Yield a temp path next to ``path``; rename over it only on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    os.close(fd)
    tmp = Path(tmp)
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".10g")
    return str(x)


def write_csv(path: Path | str, header: Sequence[str], rows: Iterable[Sequence], comment: str = "") -> None:
    with atomic_path(path) as tmp:
        with open(tmp, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([fmt(v) for v in row])


def read_csv(path: Path | str) -> list[dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing file: {path}")
    with open(path, newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def write_json(path: Path | str, obj) -> None:
    with atomic_path(path) as tmp:
        tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

META_COLUMNS = ("row", "seq_id", "position", "region", "v_id", "j_id", "j_start")


@dataclass
class ActivationSet:
    """Token-aligned hidden states plus per-row labels.

    ``x`` is (n_rows, d_model) float32; the integer columns are aligned with it.
    ``region`` holds indices into :data:`saesteer.grammar.REGIONS`.
    """

    x: np.ndarray
    seq_id: np.ndarray
    position: np.ndarray
    region: np.ndarray
    v_id: np.ndarray
    j_id: np.ndarray
    j_start: np.ndarray

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def d_model(self) -> int:
        return self.x.shape[1]

    def subset(self, mask_or_index) -> "ActivationSet":
        return ActivationSet(
            self.x[mask_or_index],
            self.seq_id[mask_or_index],
            self.position[mask_or_index],
            self.region[mask_or_index],
            self.v_id[mask_or_index],
            self.j_id[mask_or_index],
            self.j_start[mask_or_index],
        )

    def for_sequences(self, seq_ids) -> "ActivationSet":
        return self.subset(np.isin(self.seq_id, np.asarray(seq_ids)))


def write_activations(path: Path | str, acts: ActivationSet, meta_path: Path | str, comment: str = "") -> None:
    x = np.ascontiguousarray(acts.x, dtype="<f4")
    n, d = x.shape
    with atomic_path(path) as tmp:
        with open(tmp, "wb") as fh:
            fh.write(ACT_HEADER.pack(ACT_MAGIC, n, d, DTYPE_F32))
            fh.write(x.tobytes())
    rows = zip(range(n), acts.seq_id, acts.position, acts.region, acts.v_id, acts.j_id, acts.j_start)
    write_csv(meta_path, META_COLUMNS, rows, comment)


def read_activation_matrix(path: Path | str, mmap: bool = True) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing activation file: {path}")
    with open(path, "rb") as fh:
        head = fh.read(ACT_HEADER.size)
    if len(head) < ACT_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, n, d, dtype = ACT_HEADER.unpack(head)
    if magic != ACT_MAGIC or dtype != DTYPE_F32:
        raise FormatError(f"{path}: not an activation file (magic {magic!r}, dtype {dtype})")
    expected = ACT_HEADER.size + 4 * n * d
    if path.stat().st_size != expected:
        raise FormatError(f"{path}: size {path.stat().st_size} != expected {expected}")
    if mmap:
        return np.memmap(path, dtype="<f4", mode="r", offset=ACT_HEADER.size, shape=(n, d))
    return np.fromfile(path, dtype="<f4", offset=ACT_HEADER.size).reshape(n, d)


def read_activations(path: Path | str, meta_path: Path | str, mmap: bool = False) -> ActivationSet:
    x = read_activation_matrix(path, mmap=mmap)
    meta_path = Path(meta_path)
    if not meta_path.exists():
        raise FileNotFoundError(f"missing activation metadata: {meta_path}")
    cols = np.loadtxt(meta_path, delimiter=",", dtype=np.int64, ndmin=2, skiprows=_header_lines(meta_path))
    if cols.shape[0] != x.shape[0]:
        raise FormatError(f"{meta_path}: {cols.shape[0]} metadata rows for {x.shape[0]} activations")
    return ActivationSet(x, *(cols[:, i] for i in range(1, len(META_COLUMNS))))


def _header_lines(path: Path) -> int:
    # comment lines plus the column header
    n = 0
    with open(path) as fh:
        for line in fh:
            n += 1
            if not line.startswith("#"):
                break
    return n


# ---------------------------------------------------------------------------
# Versioned blob container
# ---------------------------------------------------------------------------

_BLOB_HEAD = struct.Struct("<8sHI")


def write_blob(path: Path | str, magic: bytes, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    entries = []
    payload = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape)})
        payload.append(a.tobytes())
    meta = dict(meta, arrays=entries)
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    with atomic_path(path) as tmp:
        with open(tmp, "wb") as fh:
            fh.write(_BLOB_HEAD.pack(magic, BLOB_VERSION, len(meta_bytes)))
            fh.write(meta_bytes)
            for chunk in payload:
                fh.write(chunk)


def read_blob(path: Path | str, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    raw = path.read_bytes()
    if len(raw) < _BLOB_HEAD.size:
        raise FormatError(f"{path}: truncated header")
    got_magic, version, meta_len = _BLOB_HEAD.unpack_from(raw)
    if got_magic != magic:
        raise FormatError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if version != BLOB_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = _BLOB_HEAD.size
    try:
        meta = json.loads(raw[off : off + meta_len])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: corrupt metadata") from exc
    off += meta_len
    arrays = {}
    for e in meta["arrays"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        if off + nbytes > len(raw):
            raise FormatError(f"{path}: truncated array {e['name']}")
        arrays[e["name"]] = np.frombuffer(raw, dtype=dt, count=count, offset=off).reshape(e["shape"]).copy()
        off += nbytes
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    return meta, arrays
