"""Uncompressed counted run-length encoding for binary masks.

The stream is ``[start_value, run_1, run_2, ...]`` over row-major pixels,
with runs alternating value starting from ``start_value``.
"""
from typing import List, Sequence, Tuple

import numpy as np


class RLEError(ValueError):
    pass


def encode(mask: np.ndarray) -> List[int]:
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        raise RLEError("cannot encode an empty grid")
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds)
    return [int(flat[0])] + [int(r) for r in runs]


def decode(rle: Sequence[int], shape: Tuple[int, int]) -> np.ndarray:
    if len(rle) < 2:
        raise RLEError("stream must hold a start value and at least one run")
    start = rle[0]
    if start not in (0, 1):
        raise RLEError(f"start value must be 0 or 1, got {start!r}")
    runs = np.asarray(rle[1:], dtype=np.int64)
    if np.any(runs <= 0):
        raise RLEError("runs must be positive")
    total = int(shape[0]) * int(shape[1])
    if int(runs.sum()) != total:
        raise RLEError(f"runs sum to {int(runs.sum())}, expected {total}")
    values = (np.arange(runs.size) + start) % 2
    return np.repeat(values.astype(bool), runs).reshape(shape)
