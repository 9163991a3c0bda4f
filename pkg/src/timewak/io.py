"""Dataset ingestion, windowing, normalisation and the TWK1 tensor format."""
from __future__ import annotations

import csv
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import InvalidRangeError, TimeWakError, WatermarkKey, as_series

__all__ = [
    "Dataset",
    "DataError",
    "load_csv",
    "save_csv",
    "window",
    "save_tensor",
    "load_tensor",
    "atomic_write_bytes",
    "ar1_dataset",
]

TWK1_MAGIC = b"TWK1"
TWK1_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


class DataError(TimeWakError):
    pass


@dataclass
class Dataset:
    """Table of ``R`` rows by ``F`` features plus the fitted normalisation.

    ``rows`` is always stored in normalised units; :meth:`denormalize` maps
    values back to the original scale.
    """

    rows: np.ndarray
    feature_names: list[str]
    normalization: str = "none"
    stats: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows.shape

    def normalized(self, kind: str = "minmax") -> "Dataset":
        if self.normalization != "none":
            raise DataError("dataset is already normalised")
        x = self.rows
        if kind == "none":
            return Dataset(x.copy(), list(self.feature_names))
        if kind == "minmax":
            lo, hi = x.min(axis=0), x.max(axis=0)
            scale = np.where(hi > lo, hi - lo, 1.0)
            stats = {"offset": lo, "scale": scale}
        elif kind == "zscore":
            mu, sd = x.mean(axis=0), x.std(axis=0)
            stats = {"offset": mu, "scale": np.where(sd > 0, sd, 1.0)}
        else:
            raise InvalidRangeError(f"unknown normalisation {kind!r}")
        return Dataset((x - stats["offset"]) / stats["scale"], list(self.feature_names), kind, stats)

    def denormalize(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if self.normalization == "none":
            return values.copy()
        return values * self.stats["scale"] + self.stats["offset"]


def load_csv(path) -> Dataset:
    """Read a headed, all-numeric CSV ('.' decimal separator)."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        values = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} cells, found {len(row)}")
            parsed = []
            for col, cell in enumerate(row):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{path}:{lineno}: column {col + 1} ({header[col]!r}) is not numeric: "
                                    f"{cell!r}") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}:{lineno}: column {col + 1} ({header[col]!r}) is not finite")
                parsed.append(v)
            values.append(parsed)
    if not values:
        raise DataError(f"{path}: no data rows")
    return Dataset(np.asarray(values, dtype=np.float64), header)


def save_csv(rows, feature_names, path) -> None:
    rows = np.asarray(rows, dtype=np.float64)
    buf = [",".join(feature_names)]
    buf += [",".join(repr(float(v)) for v in r) for r in rows]
    atomic_write_bytes(path, ("\n".join(buf) + "\n").encode())


def window(ds: Dataset | np.ndarray, W: int, stride: int | None = None) -> np.ndarray:
    """Slice ``(R, F)`` rows into ``(B, W, F)`` windows, oldest first.

    ``stride`` defaults to ``W`` (non-overlapping).
    """
    rows = ds.rows if isinstance(ds, Dataset) else np.asarray(ds, dtype=np.float64)
    stride = W if stride is None else stride
    R = rows.shape[0]
    if W < 1 or stride < 1:
        raise InvalidRangeError("W and stride must be >= 1")
    if W > R:
        raise InvalidRangeError(f"window {W} exceeds the {R} available rows")
    starts = np.arange(0, R - W + 1, stride)
    return np.stack([rows[s:s + W] for s in starts])


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensor(x, path) -> None:
    x = as_series(x)
    B, W, F = x.shape
    atomic_write_bytes(path, _HEADER.pack(TWK1_MAGIC, TWK1_VERSION, B, W, F) + x.astype("<f8").tobytes())


def load_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, B, W, F = _HEADER.unpack_from(raw)
    if magic != TWK1_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}, expected {TWK1_MAGIC!r}")
    if version != TWK1_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    need = _HEADER.size + 8 * B * W * F
    if len(raw) != need:
        raise DataError(f"{path}: expected {need} bytes for {B}x{W}x{F}, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(B, W, F).astype(np.float64)


def ar1_dataset(rows: int = 4000, features: int = 6, phi: float = 0.8, coupling: float = 0.5,
                key: WatermarkKey | None = None) -> Dataset:
    """Stationary Gaussian VAR(1)-style series for desk-scale experiments.

    Each feature follows ``x_t = phi * x_{t-1} + innovation`` with innovations
    sharing a common factor of weight ``coupling``; features get distinct
    offsets and scales.  Returned un-normalised.
    """
    key = key or WatermarkKey.from_seed("ar1-dataset")
    prf = key.prf("dataset")
    common = prf.normal_block(("common",), (rows, 1))
    own = prf.normal_block(("own",), (rows, features))
    innov = math.sqrt(coupling) * common + math.sqrt(1.0 - coupling) * own
    x = np.empty((rows, features))
    x[0] = innov[0]
    scale = math.sqrt(1.0 - phi * phi)
    for t in range(1, rows):
        x[t] = phi * x[t - 1] + scale * innov[t]
    offsets = np.linspace(-1.0, 2.0, features)
    scales = np.linspace(0.5, 2.0, features)
    return Dataset(offsets + scales * x, [f"f{i}" for i in range(features)])
