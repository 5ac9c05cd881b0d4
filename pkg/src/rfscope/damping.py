"""Filter damping: scale conv kernels by a fixed spatial factor grid.

The factor at time index ``t`` and frequency index ``f`` of a ``T x F`` kernel
is::

    c[t, f] = (1 - m_t * |t - T/2| / (T/2)) * (1 - m_f * |f - F/2| / (F/2))

with zero-based indices (``mode="literal"``).  ``mode="centered"`` measures the
distance from ``(T-1)/2`` against the half-width ``(T-1)/2`` instead, which
gives a symmetric grid with a unit centre.  Axes of size 1 always get
factor 1, so pointwise kernels are never damped.

Kernels in this package are stored frequency first, ``(C_out, C_in/g, F, T)``;
:attr:`DampingMatrix.grid` is the matching ``F x T`` view of the factors.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

MODES = ("literal", "centered")


def axis_factors(size: int, m: float, mode: str = "literal") -> np.ndarray:
    """Damping profile along one axis."""
    if size < 1:
        raise ValueError(f"axis size must be >= 1, got {size}")
    if not 0.0 <= m < 1.0:
        raise ValueError(f"damping factor must lie in [0, 1), got {m}")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if size == 1:
        return np.ones(1)
    idx = np.arange(size, dtype=np.float64)
    centre = size / 2 if mode == "literal" else (size - 1) / 2
    return 1.0 - m * np.abs(idx - centre) / centre


@dataclass(frozen=True)
class DampingMatrix:
    factors: np.ndarray  # shape (T, F)
    m_t: float
    m_f: float
    mode: str = "literal"

    @property
    def shape(self) -> tuple[int, int]:
        return self.factors.shape

    @property
    def grid(self) -> np.ndarray:
        """Factors laid out (F, T), rows indexed by frequency."""
        return self.factors.T

    def to_json_dict(self) -> dict:
        T, F = self.factors.shape
        return {"T": T, "F": F, "m_t": self.m_t, "m_f": self.m_f, "mode": self.mode}


def damping_matrix(T: int, F: int, m_t: float, m_f: float, mode: str = "literal") -> DampingMatrix:
    ft = axis_factors(T, m_t, mode)
    ff = axis_factors(F, m_f, mode)
    factors = np.outer(ft, ff)
    factors.setflags(write=False)
    return DampingMatrix(factors, float(m_t), float(m_f), mode)


def for_node(node) -> DampingMatrix | None:
    """Damping matrix of a conv node, or None when it is undamped."""
    if node.kind != "conv" or node.damping is None:
        return None
    m_t, m_f = node.damping
    return damping_matrix(node.kernel.time, node.kernel.freq, m_t, m_f, node.damping_mode or "literal")


def damp_weights(W: np.ndarray, C: DampingMatrix) -> np.ndarray:
    """Multiply every (F, T) kernel slice of ``W`` by the factor grid."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 4 or W.shape[2:] != C.grid.shape:
        raise ValueError(
            f"weight block {W.shape} does not match damping grid (F, T) = {C.grid.shape}"
        )
    return W * C.grid


def bake(graph, weights):
    """Fold every conv's damping into its weights.

    Returns ``(undamped_graph, baked_weights)``; the pair computes exactly what
    the damped graph computes with the original weights.
    """
    baked = dict(weights)
    for node in graph.nodes.values():
        C = for_node(node)
        if C is not None:
            key = f"{node.id}.weight"
            baked[key] = damp_weights(weights[key], C)

    def clear(node):
        if node.kind == "conv" and node.damping is not None:
            return replace(node, damping=None, damping_mode=None)
        return node

    return graph.map_nodes(clear), baked
