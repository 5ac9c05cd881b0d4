"""Maximum receptive field arithmetic over architecture graphs.

Per dimension and in topological order::

    rf_n     = rf_{n-1} + (k*_n - 1) * S_{n-1}
    S_n      = S_{n-1} * s_n
    k*_n     = d_n * (k_n - 1) + 1

Merge nodes take the largest branch RF and require equal cumulative strides.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping

from .graph import ArchError, ArchGraph, Dim2, check_valid, infer_shapes, topo_order


class RFError(ArchError):
    pass


def effective_kernel(k: int, d: int) -> int:
    """Extent of a dilated kernel: ``d * (k - 1) + 1``."""
    if k < 1 or d < 1:
        raise ValueError(f"kernel and dilation must be >= 1, got k={k}, d={d}")
    return d * (k - 1) + 1


@dataclass(frozen=True)
class NodeRF:
    rf: Dim2
    cum_stride: Dim2
    # input coordinate of the first pixel seen by output coordinate 0 (may be < 0)
    window_offset: tuple[int, int]
    # input coordinate of the last pixel seen by output coordinate 0
    window_end: tuple[int, int]

    def to_dict(self) -> dict:
        return {
            "rf": list(self.rf),
            "cum_stride": list(self.cum_stride),
            "window_offset": list(self.window_offset),
        }


@dataclass(frozen=True)
class RFReport:
    nodes: Mapping[str, NodeRF]
    probe_id: str

    def __getitem__(self, node_id: str) -> NodeRF:
        return self.nodes[node_id]

    @property
    def max_rf(self) -> Dim2:
        return self.nodes[self.probe_id].rf

    def to_dict(self) -> dict:
        return {nid: entry.to_dict() for nid, entry in self.nodes.items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def _axis(node, axis: int):
    k_star = node.effective_kernel[axis]
    return k_star, node.stride[axis], node.pad_before()[axis]


def max_rf(graph: ArchGraph) -> RFReport:
    check_valid(graph)
    out: dict[str, NodeRF] = {}
    for nid in topo_order(graph):
        node = graph.nodes[nid]
        if node.kind == "input":
            out[nid] = NodeRF(Dim2(1, 1), Dim2(1, 1), (0, 0), (0, 0))
            continue
        preds = [out[p] for p in node.predecessors]
        if node.kind in ("conv", "maxpool"):
            prev = preds[0]
            rf, cs, lo, hi = [], [], [], []
            for axis in (0, 1):
                k_star, s, pad = _axis(node, axis)
                S = prev.cum_stride[axis]
                rf.append(prev.rf[axis] + (k_star - 1) * S)
                cs.append(S * s)
                lo.append(prev.window_offset[axis] - pad * S)
                hi.append(prev.window_end[axis] + (k_star - 1 - pad) * S)
            out[nid] = NodeRF(Dim2(*rf), Dim2(*cs), tuple(lo), tuple(hi))
        elif node.kind in ("add", "concat"):
            strides = {p.cum_stride for p in preds}
            if len(strides) != 1:
                raise RFError(
                    f"merge node {nid!r} joins branches with unequal cumulative strides "
                    f"{sorted(strides)}"
                )
            out[nid] = NodeRF(
                Dim2(*(max(p.rf[a] for p in preds) for a in (0, 1))),
                preds[0].cum_stride,
                tuple(min(p.window_offset[a] for p in preds) for a in (0, 1)),
                tuple(max(p.window_end[a] for p in preds) for a in (0, 1)),
            )
        else:
            # relu, affine, coord_concat, output_probe are spatially pointwise
            out[nid] = preds[0]
    return RFReport(out, graph.probe_id)


@dataclass(frozen=True)
class Interval:
    lo: int
    hi: int

    @property
    def width(self) -> int:
        return self.hi - self.lo + 1

    def __contains__(self, x) -> bool:
        return self.lo <= x <= self.hi

    def as_list(self) -> list[int]:
        return [self.lo, self.hi]


@dataclass(frozen=True)
class RFWindow:
    """Input window of one unit; ``clipped`` versions are cut to the input extent."""

    freq: Interval
    time: Interval
    clipped_freq: Interval
    clipped_time: Interval

    def to_dict(self) -> dict:
        return {
            "freq": self.freq.as_list(),
            "time": self.time.as_list(),
            "clipped_freq": self.clipped_freq.as_list(),
            "clipped_time": self.clipped_time.as_list(),
        }


def rf_window(graph: ArchGraph, node_id: str, out_coord, report: RFReport | None = None) -> RFWindow:
    """Zero-based input window seen by unit ``out_coord`` of ``node_id``.

    Each conv/pool maps output index ``i`` to ``[i*s - p, i*s - p + k* - 1]`` on
    its input; composing these back to the input (hull over merge branches)
    gives ``[i*S + offset_lo, i*S + offset_hi]``.
    """
    if report is None:
        report = max_rf(graph)
    if node_id not in graph.nodes:
        raise KeyError(f"unknown node {node_id!r}")
    shape = infer_shapes(graph)[node_id]
    coord = Dim2.of(out_coord)
    for axis, name in ((0, "freq"), (1, "time")):
        if not 0 <= coord[axis] < shape[1 + axis]:
            raise ValueError(
                f"{name} coordinate {coord[axis]} outside node {node_id!r} extent {shape[1 + axis]}"
            )
    entry = report[node_id]
    _, F, T = graph.input_shape
    bounds = []
    clipped = []
    for axis, size in ((0, F), (1, T)):
        base = coord[axis] * entry.cum_stride[axis]
        iv = Interval(base + entry.window_offset[axis], base + entry.window_end[axis])
        bounds.append(iv)
        clipped.append(Interval(max(iv.lo, 0), min(iv.hi, size - 1)))
    return RFWindow(bounds[0], bounds[1], clipped[0], clipped[1])


def count_params(graph: ArchGraph) -> int:
    """Conv weights ``k_f*k_t*C_in*C_out/g`` plus biases, and two per affine channel."""
    shapes = infer_shapes(graph)
    total = 0
    for node in graph.nodes.values():
        if node.kind == "conv":
            total += conv_weight_count(node) + node.out_channels
        elif node.kind == "affine":
            total += 2 * shapes[node.id][0]
    return total


def conv_weight_count(node) -> int:
    k = node.kernel
    return k.freq * k.time * node.in_channels * node.out_channels // node.groups
