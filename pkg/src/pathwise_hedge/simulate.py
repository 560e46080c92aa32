"""Seeded random streams and reference path simulators."""

from __future__ import annotations

import numpy as np

from .grids import SampledPath, TimeGrid


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based Philox generator for the sub-stream ``stream`` of ``seed``.

    Sub-streams are derived with SeedSequence spawn keys, so (seed, i) and
    (seed, j) never overlap and results do not depend on execution order.
    """
    if seed < 0 or seed >= 2**64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


def brownian_increments(grid: TimeGrid, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Independent N(0, dt) increments, shape (n-1,) or (size, n-1)."""
    shape = (len(grid) - 1,) if size is None else (size, len(grid) - 1)
    return rng.standard_normal(shape) * np.sqrt(grid.steps)


def gbm_path(S0: float, mu: float, sigma: float, grid: TimeGrid, seed: int, *stream: int) -> SampledPath:
    """Exact geometric Brownian motion sample on ``grid``."""
    if S0 <= 0 or sigma < 0:
        raise ValueError("need S0 > 0 and sigma >= 0")
    dw = brownian_increments(grid, make_rng(seed, *stream))
    logs = np.concatenate([[0.0], np.cumsum((mu - 0.5 * sigma**2) * grid.steps + sigma * dw)])
    return SampledPath(grid, S0 * np.exp(logs))
