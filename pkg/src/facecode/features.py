"""Per-frame feature CSV: header ``f000..f256``, one row per frame."""

from __future__ import annotations

import csv

import numpy as np

from .ingest import DataError
from .model import CODE_DIM

HEADER = [f"f{k:03d}" for k in range(CODE_DIM)]


class FeatureParseError(DataError):
    pass


def write_features(path, features) -> None:
    """Values are written as the shortest decimal that round-trips float32."""
    x = np.asarray(features, dtype=np.float32).reshape(-1, CODE_DIM)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER)
        for row in x:
            w.writerow([np.format_float_positional(v, unique=True, trim="-") if np.isfinite(v) else repr(float(v))
                        for v in row])


def parse_features(path) -> np.ndarray:
    """Returns an (F, 257) float32 array; a header-only file gives F = 0."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise FeatureParseError(f"{path}: {exc}") from exc
    rows = []
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise FeatureParseError(f"{path}:1: missing header")
        if len(header) != CODE_DIM:
            raise FeatureParseError(f"{path}:1: expected {CODE_DIM} columns, got {len(header)}")
        if [h.strip() for h in header] != HEADER:
            raise FeatureParseError(f"{path}:1: header must be f000..f{CODE_DIM - 1:03d}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != CODE_DIM:
                raise FeatureParseError(f"{path}:{lineno}: expected {CODE_DIM} columns, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise FeatureParseError(f"{path}:{lineno}: non-numeric value") from None
    if not rows:
        return np.zeros((0, CODE_DIM), dtype=np.float32)
    return np.asarray(rows, dtype=np.float32)
