"""Seeded synthetic weights for tests, benchmarks and the CLI."""
from __future__ import annotations

import numpy as np


def gaussian_weights(rows: int, cols: int, seed: int = 0, std: float = 1.0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return (rng.standard_normal((rows, cols)) * std).astype(np.float32)


def plant_outliers(weights: np.ndarray, ratio: float, scale: float = 10.0, seed: int = 0,
                   channels: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Multiply ``round(ratio * size)`` random entries by ``scale``.

    ``channels`` restricts the candidates to those input channels.  Returns the
    new matrix and the flat indices that were scaled.
    """
    w = np.array(weights, dtype=np.float32)
    rows, cols = w.shape
    allowed = np.arange(cols) if channels is None else np.asarray(channels)
    pool = (np.arange(rows)[:, None] * cols + allowed[None, :]).ravel()
    count = min(int(round(ratio * w.size)), pool.size)
    rng = np.random.default_rng(seed)
    picked = np.sort(rng.choice(pool, size=count, replace=False))
    # keep planted values clearly large even where the original entry is tiny
    base = w.flat[picked]
    w.flat[picked] = np.where(np.abs(base) < 1, np.sign(base + (base == 0)), base) * scale
    return w, picked
