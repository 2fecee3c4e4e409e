"""Dataset ingestion: synthetic Gaussian classes, CSV files and IDX files.

CSV: one sample per line, comma separated numbers, optional header line.
The last column is the integer label unless a separate label file (one
integer per line) is given.

IDX: big-endian header ``00 00 <dtype> <ndim>`` followed by ``ndim``
uint32 dimension sizes and the raw array. Images use magic 0x00000803
(count, rows, cols), labels 0x00000801 (count).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


class DataError(ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, offset: int, path=None):
        where = f"{path}: " if path else ""
        super().__init__(f"{where}byte {offset}: {message}")
        self.offset = offset


@dataclass
class Dataset:
    X: np.ndarray  # float32, (n, d)
    y: np.ndarray  # int64, (n,)
    num_classes: int

    def __len__(self):
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def shard(self, rank: int, world_size: int, seed: int = 0) -> "Dataset":
        """Contiguous block of a seeded global shuffle; the remainder is dropped."""
        perm = np.random.default_rng([seed, 0xDA7A]).permutation(len(self))
        size = len(self) // world_size
        if size == 0:
            raise DataError(f"{len(self)} samples cannot be split over {world_size} workers")
        idx = perm[rank * size:(rank + 1) * size]
        return Dataset(self.X[idx], self.y[idx], self.num_classes)

    def batches(self, batch_size: int, epoch: int, seed: int = 0, rank: int = 0):
        """Yield (X, y) batches of a per-epoch shuffle; the last partial batch is dropped."""
        order = np.random.default_rng([seed, epoch, rank]).permutation(len(self))
        for i in range(len(self) // batch_size):
            idx = order[i * batch_size:(i + 1) * batch_size]
            yield self.X[idx], self.y[idx]

    def num_batches(self, batch_size: int) -> int:
        return len(self) // batch_size


def normalize(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    return ((X - mu) / sd).astype(np.float32)


def synthetic_gaussian(classes: int = 2, d: int = 32, n: int = 4096, seed: int = 1,
                       separation: float = 2.0, draw: int = 0) -> Dataset:
    """Isotropic unit-variance Gaussian blobs, one per class.

    ``seed`` fixes the class means (random directions of norm
    ``separation / 2``); ``draw`` picks an independent sample from the same
    classes, e.g. ``draw=1`` for a held-out set.
    """
    means = np.random.default_rng([seed, 0x5EED]).standard_normal((classes, d))
    means *= separation / 2 / np.linalg.norm(means, axis=1, keepdims=True)
    rng = np.random.default_rng([seed, 0x5EED, draw])
    y = rng.integers(0, classes, size=n)
    X = means[y] + rng.standard_normal((n, d))
    # scale by the population std (1 per axis) so every draw shares one transform
    return Dataset(X.astype(np.float32), y.astype(np.int64), classes)


def parse_synthetic(spec: str) -> dict:
    """``synthetic:classes=2,d=32,n=4096,seed=1`` -> keyword arguments."""
    body = spec.split(":", 1)[1] if ":" in spec else ""
    out: dict = {}
    for part in filter(None, body.split(",")):
        key, _, val = part.partition("=")
        key = key.strip()
        if key not in ("classes", "d", "n", "seed", "separation", "draw"):
            raise DataError(f"unknown synthetic option {key!r}")
        out[key] = float(val) if key == "separation" else int(val)
    return out


def _csv_rows(path: Path):
    raw = path.read_bytes()
    offset = 0
    rows = []
    for lineno, line in enumerate(raw.split(b"\n")):
        text = line.decode("utf-8", errors="replace").strip()
        if text:
            try:
                rows.append((offset, [float(v) for v in text.split(",")]))
            except ValueError:
                if lineno != 0:
                    raise ParseError(f"non-numeric field in line {lineno + 1}", offset, path) from None
                # header
        offset += len(line) + 1
    return rows


def load_csv(path, labels=None) -> Dataset:
    path = Path(path)
    rows = _csv_rows(path)
    if not rows:
        raise ParseError("no data rows", 0, path)
    width = len(rows[0][1])
    for off, r in rows:
        if len(r) != width:
            raise ParseError(f"expected {width} fields, found {len(r)}", off, path)
    arr = np.array([r for _, r in rows], dtype=np.float64)
    if labels is None:
        if width < 2:
            raise ParseError("need at least one feature column and a label column", 0, path)
        X, y = arr[:, :-1], arr[:, -1]
    else:
        lab_rows = _csv_rows(Path(labels))
        if len(lab_rows) != len(rows):
            raise DataError(f"{path} has {len(rows)} rows but {labels} has {len(lab_rows)} labels")
        X, y = arr, np.array([r[0] for _, r in lab_rows])
    if np.any(y != np.round(y)) or np.any(y < 0):
        raise DataError("labels must be nonnegative integers")
    y = y.astype(np.int64)
    return Dataset(normalize(X), y, int(y.max()) + 1)


def read_idx(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4:
        raise ParseError("file shorter than the IDX magic", len(raw), path)
    zero, code, ndim = struct.unpack_from(">HBB", raw, 0)
    if zero != 0:
        raise ParseError(f"bad IDX magic 0x{int.from_bytes(raw[:4], 'big'):08x}", 0, path)
    if code not in IDX_DTYPES:
        raise ParseError(f"unknown IDX element type 0x{code:02x}", 2, path)
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise ParseError("truncated IDX dimension header", len(raw), path)
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    dt = IDX_DTYPES[code]
    need = head + int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(raw) != need:
        raise ParseError(f"expected {need} bytes for dims {dims}, file has {len(raw)}", min(len(raw), need), path)
    return np.frombuffer(raw, dtype=dt, offset=head).reshape(dims)


def write_idx(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    codes = {v.newbyteorder("="): k for k, v in IDX_DTYPES.items()}
    code = codes.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise DataError(f"dtype {arr.dtype} has no IDX code")
    header = struct.pack(">HBB", 0, code, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.astype(IDX_DTYPES[code]).tobytes())


def load_idx(images, labels) -> Dataset:
    X = read_idx(images)
    y = read_idx(labels)
    if y.ndim != 1:
        raise DataError(f"label file must be 1-D, got shape {y.shape}")
    if len(X) != len(y):
        raise DataError(f"{images} has {len(X)} samples but {labels} has {len(y)} labels")
    X = X.reshape(len(X), -1)
    y = y.astype(np.int64)
    return Dataset(normalize(X), y, int(y.max()) + 1)


def load_dataset(source, labels=None) -> Dataset:
    """Load from a synthetic spec string, a CSV file, or an IDX image/label pair."""
    if isinstance(source, Dataset):
        return source
    if isinstance(source, dict):
        return synthetic_gaussian(**source)
    text = str(source)
    if text.startswith("synthetic"):
        return synthetic_gaussian(**parse_synthetic(text))
    path = Path(text)
    if not path.exists():
        raise DataError(f"no such dataset file: {path}")
    if path.suffix.lower() == ".csv":
        return load_csv(path, labels)
    if labels is None:
        raise DataError("IDX input needs a label file")
    return load_idx(path, labels)
