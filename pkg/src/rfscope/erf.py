"""Effective receptive field measurement.

A gradient map is the mean, over a set of inputs, of the absolute input
gradient of one probe unit (channels reduced by summing absolute values).
Its time and frequency marginals give weighted moments; the ERF extent
along an axis is ``E = 4 * sigma``.  Statistics use 1-based pixel
coordinates, the engine and rf modules use 0-based ones.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .engine import backward_input, probe_center
from .graph import Dim2
from .rf import RFWindow


class DegenerateMapError(ValueError):
    """Raised when a gradient map carries no mass."""


@dataclass(frozen=True)
class GradientMap:
    grid: np.ndarray  # (F, T), nonnegative
    n_inputs: int
    probe_coord: Dim2

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape


@dataclass(frozen=True)
class ErfStats:
    mu_t: float
    sigma_t: float
    mu_f: float
    sigma_f: float
    marginal_t: np.ndarray
    marginal_f: np.ndarray

    @property
    def E_t(self) -> float:
        return 4.0 * self.sigma_t

    @property
    def E_f(self) -> float:
        return 4.0 * self.sigma_f

    def box(self, dim: str) -> tuple[float, float]:
        """``[mu - 2 sigma, mu + 2 sigma]`` along ``dim`` (1-based)."""
        mu, sigma = (self.mu_f, self.sigma_f) if dim == "freq" else (self.mu_t, self.sigma_t)
        return mu - 2 * sigma, mu + 2 * sigma


def gradient_map(graph, weights, inputs: Sequence[np.ndarray], probe="center",
                 identity_nonlinearity: bool = False, workers: int = 1) -> GradientMap:
    inputs = list(inputs)
    if not inputs:
        raise ValueError("gradient_map needs at least one input")
    coord = probe_center(graph) if probe == "center" else Dim2.of(probe)

    def one(x):
        g = backward_input(graph, weights, x, coord, identity_nonlinearity)
        return np.abs(g).sum(axis=0)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_input = list(pool.map(one, inputs))
    else:
        per_input = [one(x) for x in inputs]
    # accumulate in input order so the result does not depend on scheduling
    total = np.zeros_like(per_input[0])
    for g in per_input:
        total += g
    return GradientMap(total / len(inputs), len(inputs), coord)


def _moments(marginal: np.ndarray) -> tuple[float, float]:
    pos = np.arange(1, marginal.size + 1, dtype=np.float64)
    mass = marginal.sum()
    mu = float((pos * marginal).sum() / mass)
    var = float(((pos - mu) ** 2 * marginal).sum() / mass)
    return mu, math.sqrt(max(var, 0.0))


def erf_stats(gmap: GradientMap | np.ndarray) -> ErfStats:
    grid = gmap.grid if isinstance(gmap, GradientMap) else np.asarray(gmap, dtype=np.float64)
    if grid.ndim != 2:
        raise ValueError(f"gradient map must be 2-D (F, T), got shape {grid.shape}")
    if not np.all(np.isfinite(grid)) or np.any(grid < 0):
        raise ValueError("gradient map must be finite and nonnegative")
    if grid.sum() <= 0:
        raise DegenerateMapError("gradient map is all zero")
    marginal_t = grid.sum(axis=0)
    marginal_f = grid.sum(axis=1)
    mu_t, sigma_t = _moments(marginal_t)
    mu_f, sigma_f = _moments(marginal_f)
    return ErfStats(mu_t, sigma_t, mu_f, sigma_f, marginal_t, marginal_f)


def mass_fraction(gmap, dim: str, interval) -> float:
    """Share of the ``dim`` marginal inside a 1-based closed interval.

    Accepts a GradientMap, a 2-D grid, or a 1-D marginal.  Only integer
    positions inside the interval count; the interval is cut to ``[1, size]``.
    """
    if isinstance(gmap, GradientMap):
        gmap = gmap.grid
    arr = np.asarray(gmap, dtype=np.float64)
    if arr.ndim == 2:
        if dim not in ("freq", "time"):
            raise ValueError(f"dim must be 'freq' or 'time', got {dim!r}")
        arr = arr.sum(axis=1) if dim == "freq" else arr.sum(axis=0)
    lo, hi = interval
    lo_i = max(math.ceil(lo), 1)
    hi_i = min(math.floor(hi), arr.size)
    if lo_i > hi_i:
        raise ValueError(f"interval [{lo}, {hi}] contains no pixel of 1..{arr.size}")
    total = arr.sum()
    if total <= 0:
        raise DegenerateMapError("marginal has no mass")
    return float(arr[lo_i - 1: hi_i].sum() / total)


# --- export ----------------------------------------------------------------

def write_pgm(grid: np.ndarray, path) -> None:
    """ASCII P2, rows = frequency index, linear scaling of the grid to 0..255."""
    F, T = grid.shape
    peak = float(grid.max()) if grid.size else 0.0
    scaled = np.zeros(grid.shape, dtype=np.int64) if peak <= 0 else np.rint(grid / peak * 255).astype(np.int64)
    lines = ["P2", f"{T} {F}", "255"]
    lines.extend(" ".join(str(v) for v in row) for row in scaled)
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_pgm(path) -> np.ndarray:
    tokens = []
    for line in Path(path).read_text(encoding="ascii").splitlines():
        tokens.extend(line.split("#", 1)[0].split())
    if tokens[0] != "P2":
        raise ValueError("not an ASCII PGM (P2) file")
    w, h = int(tokens[1]), int(tokens[2])  # tokens[3] is maxval
    return np.array([int(t) for t in tokens[4:]], dtype=np.int64).reshape(h, w)


def write_csv(grid: np.ndarray, path) -> None:
    """F rows by T columns, 17 significant digits (lossless for float64)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in np.atleast_2d(grid):
            fh.write(",".join(format(float(v), ".17g") for v in row) + "\n")


def read_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)


def sidecar(gmap: GradientMap, window: RFWindow | None = None, seed=None) -> dict:
    """Everything needed to redraw the heatmap overlay.

    All boxes are 1-based inclusive pixel coordinates; ``max_rf_box`` is the
    clipped Max-RF window of the probe unit.
    """
    stats = erf_stats(gmap)
    out = {
        "mu": [stats.mu_f, stats.mu_t],
        "sigma": [stats.sigma_f, stats.sigma_t],
        "E": [stats.E_f, stats.E_t],
        "erf_box": [list(stats.box("freq")), list(stats.box("time"))],
        "max_rf_box": None,
        "n_inputs": gmap.n_inputs,
        "probe": [int(gmap.probe_coord.freq), int(gmap.probe_coord.time)],
        "seed": seed,
    }
    if window is not None:
        out["max_rf_box"] = [
            [window.clipped_freq.lo + 1, window.clipped_freq.hi + 1],
            [window.clipped_time.lo + 1, window.clipped_time.hi + 1],
        ]
    return out


def export_heatmap(gmap: GradientMap, window: RFWindow | None, path, fmt: str = "pgm",
                   seed=None) -> Path:
    """Write the map as PGM or CSV plus a ``<path>.json`` sidecar; returns the sidecar path."""
    path = Path(path)
    if fmt == "pgm":
        write_pgm(gmap.grid, path)
    elif fmt == "csv":
        write_csv(gmap.grid, path)
    else:
        raise ValueError(f"format must be 'pgm' or 'csv', got {fmt!r}")
    meta_path = path.with_name(path.name + ".json")
    meta_path.write_text(json.dumps(sidecar(gmap, window, seed), indent=2, sort_keys=True) + "\n",
                         encoding="utf-8")
    return meta_path


def noise_inputs(shape, n: int, seed: int) -> list[np.ndarray]:
    """Seeded standard-normal inputs, the default probe data."""
    rng = np.random.default_rng(seed)
    return [rng.standard_normal(shape) for _ in range(n)]
