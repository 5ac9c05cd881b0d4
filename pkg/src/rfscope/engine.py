"""Float64 forward pass and input-gradient backward pass over an ArchGraph.

Activations are numpy arrays shaped ``(channels, freq, time)``; there is no
batch axis.  Convolution is cross-correlation (no kernel flip) computed with
an im2col matrix product per group.  Weights live in a flat ``dict`` keyed
``"<node>.weight"``, ``"<node>.bias"`` (conv) and ``"<node>.scale"``,
``"<node>.shift"`` (affine).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import damping
from .graph import ArchGraph, Dim2, check_valid, infer_shapes, topo_order

WeightSet = dict  # name -> np.ndarray


class EngineError(RuntimeError):
    pass


# --- weights ---------------------------------------------------------------

def conv_weight_shape(node) -> tuple[int, int, int, int]:
    return (node.out_channels, node.in_channels // node.groups, node.kernel.freq, node.kernel.time)


def _node_rng(seed: int, node_id: str) -> np.random.Generator:
    # Philox keyed by (seed, crc32(node id)): each node's stream is independent
    # of every other node, of graph edits elsewhere, and of the platform.
    seed &= (1 << 64) - 1
    key = [seed & 0xFFFFFFFF, seed >> 32, zlib.crc32(node_id.encode("utf-8"))]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def init_weights(graph: ArchGraph, seed: int) -> WeightSet:
    """He-normal conv weights (variance ``2 / fan_in``), zero biases, identity affines."""
    shapes = infer_shapes(check_valid(graph))
    weights: WeightSet = {}
    for nid in topo_order(graph):
        node = graph.nodes[nid]
        if node.kind == "conv":
            shape = conv_weight_shape(node)
            fan_in = shape[1] * shape[2] * shape[3]
            rng = _node_rng(seed, nid)
            weights[f"{nid}.weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
            weights[f"{nid}.bias"] = np.zeros(node.out_channels)
        elif node.kind == "affine":
            c = shapes[nid][0]
            weights[f"{nid}.scale"] = np.ones(c)
            weights[f"{nid}.shift"] = np.zeros(c)
    return weights


def check_weights(graph: ArchGraph, weights: WeightSet) -> None:
    shapes = infer_shapes(graph)
    expected: dict[str, tuple] = {}
    for node in graph.nodes.values():
        if node.kind == "conv":
            expected[f"{node.id}.weight"] = conv_weight_shape(node)
            expected[f"{node.id}.bias"] = (node.out_channels,)
        elif node.kind == "affine":
            c = shapes[node.id][0]
            expected[f"{node.id}.scale"] = (c,)
            expected[f"{node.id}.shift"] = (c,)
    missing = sorted(set(expected) - set(weights))
    if missing:
        raise EngineError(f"weights missing for: {', '.join(missing[:5])}")
    for name, shape in expected.items():
        arr = weights[name]
        if tuple(arr.shape) != shape:
            raise EngineError(f"weight {name!r} has shape {tuple(arr.shape)}, expected {shape}")
        if not np.all(np.isfinite(arr)):
            raise EngineError(f"weight {name!r} contains non-finite values")


# --- primitive ops ---------------------------------------------------------

def _same_pads(n: int, k: int, s: int) -> tuple[int, int]:
    out = -(-n // s)
    total = max((out - 1) * s + k - n, 0)
    before = (k - 1) // 2
    return before, max(total - before, 0)


def _pads(node, in_shape) -> tuple[tuple[int, int], tuple[int, int]]:
    if node.padding != "same":
        return (0, 0), (0, 0)
    k = node.effective_kernel
    return (
        _same_pads(in_shape[1], k.freq, node.stride.freq),
        _same_pads(in_shape[2], k.time, node.stride.time),
    )


def _out_len(n_padded: int, k_eff: int, s: int) -> int:
    return (n_padded - k_eff) // s + 1


def _taps(xp, kernel: Dim2, stride: Dim2, dilation: Dim2, fo: int, to: int):
    """Yield ``((i, j), view)`` for every kernel tap over a padded input."""
    for i in range(kernel.freq):
        f0 = i * dilation.freq
        for j in range(kernel.time):
            t0 = j * dilation.time
            yield (i, j), xp[
                :,
                f0: f0 + stride.freq * (fo - 1) + 1: stride.freq,
                t0: t0 + stride.time * (to - 1) + 1: stride.time,
            ]


def conv_forward(x, W, b, stride=Dim2(1, 1), dilation=Dim2(1, 1), groups=1, pads=((0, 0), (0, 0))):
    """Grouped, strided, dilated 2-D cross-correlation of a ``(C, F, T)`` map."""
    stride, dilation = Dim2.of(stride), Dim2.of(dilation)
    c_in = x.shape[0]
    c_out, cg, kf, kt = W.shape
    kernel = Dim2(kf, kt)
    xp = np.pad(x, ((0, 0), *pads)) if any(map(any, pads)) else x
    fo = _out_len(xp.shape[1], dilation.freq * (kf - 1) + 1, stride.freq)
    to = _out_len(xp.shape[2], dilation.time * (kt - 1) + 1, stride.time)
    if kf == kt == 1:
        cols = np.ascontiguousarray(xp[:, :: stride.freq, :: stride.time][:, :fo, :to])
        cols = cols.reshape(c_in, 1, fo * to)
    else:
        cols = np.empty((c_in, kf * kt, fo, to))
        for (i, j), view in _taps(xp, kernel, stride, dilation, fo, to):
            cols[:, i * kt + j] = view
        cols = cols.reshape(c_in, kf * kt, fo * to)
    og = c_out // groups
    y = np.empty((c_out, fo * to))
    for g in range(groups):
        Wg = np.ascontiguousarray(W[g * og: (g + 1) * og].reshape(og, cg * kf * kt))
        y[g * og: (g + 1) * og] = Wg @ cols[g * cg: (g + 1) * cg].reshape(cg * kf * kt, fo * to)
    y += b[:, None]
    return y.reshape(c_out, fo, to)


def conv_backward_input(dy, W, in_shape, stride=Dim2(1, 1), dilation=Dim2(1, 1), groups=1,
                        pads=((0, 0), (0, 0))):
    """Gradient of a conv output w.r.t. its input, given ``dL/dy``."""
    stride, dilation = Dim2.of(stride), Dim2.of(dilation)
    c_in, F, T = in_shape
    c_out, cg, kf, kt = W.shape
    _, fo, to = dy.shape
    og = c_out // groups
    dcols = np.empty((c_in, kf * kt, fo * to))
    dy2 = dy.reshape(c_out, fo * to)
    for g in range(groups):
        WgT = np.ascontiguousarray(W[g * og: (g + 1) * og].reshape(og, cg * kf * kt).T)
        dcols[g * cg: (g + 1) * cg] = (WgT @ dy2[g * og: (g + 1) * og]).reshape(cg, kf * kt, fo * to)
    dcols = dcols.reshape(c_in, kf, kt, fo, to)
    (pf0, pf1), (pt0, pt1) = pads
    dxp = np.zeros((c_in, F + pf0 + pf1, T + pt0 + pt1))
    for (i, j), view in _taps(dxp, Dim2(kf, kt), stride, dilation, fo, to):
        view += dcols[:, i, j]
    return dxp[:, pf0: pf0 + F, pt0: pt0 + T]


def maxpool_forward(x, kernel: Dim2, stride: Dim2, pads=((0, 0), (0, 0))):
    """Max pooling; returns ``(y, argmax)`` with ties going to the first tap
    in row-major order, i.e. the smallest flat input index."""
    xp = np.pad(x, ((0, 0), *pads), constant_values=-np.inf) if any(map(any, pads)) else x
    fo = _out_len(xp.shape[1], kernel.freq, stride.freq)
    to = _out_len(xp.shape[2], kernel.time, stride.time)
    y = None
    arg = np.zeros((x.shape[0], fo, to), dtype=np.int64)
    for (i, j), view in _taps(xp, kernel, stride, Dim2(1, 1), fo, to):
        tap = i * kernel.time + j
        if y is None:
            y = view.copy()
            continue
        better = view > y
        y[better] = view[better]
        arg[better] = tap
    return y, arg


def maxpool_backward(dy, arg, in_shape, kernel: Dim2, stride: Dim2, pads=((0, 0), (0, 0))):
    c, F, T = in_shape
    (pf0, pf1), (pt0, pt1) = pads
    _, fo, to = dy.shape
    dxp = np.zeros((c, F + pf0 + pf1, T + pt0 + pt1))
    for (i, j), view in _taps(dxp, kernel, stride, Dim2(1, 1), fo, to):
        view += np.where(arg == i * kernel.time + j, dy, 0.0)
    return dxp[:, pf0: pf0 + F, pt0: pt0 + T]


def coord_channel(F: int, T: int) -> np.ndarray:
    """Frequency positional code ``f / (F - 1)``, shape ``(1, F, T)``."""
    col = np.arange(F, dtype=np.float64) / (F - 1) if F > 1 else np.zeros(1)
    return np.broadcast_to(col[None, :, None], (1, F, T)).copy()


# --- graph passes ----------------------------------------------------------

@dataclass
class ActivationStore:
    """Per-node activations of one forward pass plus what backward needs."""

    values: dict[str, np.ndarray] = field(default_factory=dict)
    argmax: dict[str, np.ndarray] = field(default_factory=dict)
    identity_nonlinearity: bool = False

    def __getitem__(self, node_id: str) -> np.ndarray:
        return self.values[node_id]


def effective_conv_weight(node, weights: WeightSet) -> np.ndarray:
    W = weights[f"{node.id}.weight"]
    C = damping.for_node(node)
    return W if C is None else damping.damp_weights(W, C)


def forward(graph: ArchGraph, weights: WeightSet, x: np.ndarray,
            identity_nonlinearity: bool = False) -> ActivationStore:
    x = np.asarray(x, dtype=np.float64)
    if tuple(x.shape) != graph.input_shape:
        raise EngineError(f"input shape {x.shape} does not match graph input {graph.input_shape}")
    store = ActivationStore(identity_nonlinearity=identity_nonlinearity)
    vals = store.values
    for nid in topo_order(graph):
        node = graph.nodes[nid]
        ins = [vals[p] for p in node.predecessors]
        kind = node.kind
        if kind == "input":
            out = x
        elif kind == "conv":
            W = effective_conv_weight(node, weights)
            out = conv_forward(ins[0], W, weights[f"{nid}.bias"], node.stride, node.dilation,
                               node.groups, _pads(node, ins[0].shape))
        elif kind == "maxpool":
            out, store.argmax[nid] = maxpool_forward(ins[0], node.kernel, node.stride,
                                                     _pads(node, ins[0].shape))
        elif kind == "relu":
            out = ins[0] if identity_nonlinearity else np.maximum(ins[0], 0.0)
        elif kind == "affine":
            out = ins[0] * weights[f"{nid}.scale"][:, None, None] + weights[f"{nid}.shift"][:, None, None]
        elif kind == "add":
            out = ins[0].copy()
            for other in ins[1:]:
                out += other
        elif kind == "concat":
            out = np.concatenate(ins, axis=0)
        elif kind == "coord_concat":
            _, F, T = ins[0].shape
            out = np.concatenate([ins[0], coord_channel(F, T)], axis=0)
        elif kind == "output_probe":
            out = ins[0]
        else:  # pragma: no cover - validate() rejects unknown kinds
            raise EngineError(f"unknown node kind {kind!r}")
        if not np.all(np.isfinite(out)):
            raise EngineError(f"non-finite activation at node {nid!r}")
        vals[nid] = out
    return store


def _backward_node(node, dy, graph, weights, store):
    """Gradients for each predecessor of ``node`` given ``dL/d(node)``."""
    kind = node.kind
    ins = [store.values[p] for p in node.predecessors]
    if kind == "conv":
        W = effective_conv_weight(node, weights)
        return [conv_backward_input(dy, W, ins[0].shape, node.stride, node.dilation,
                                    node.groups, _pads(node, ins[0].shape))]
    if kind == "maxpool":
        return [maxpool_backward(dy, store.argmax[node.id], ins[0].shape, node.kernel,
                                 node.stride, _pads(node, ins[0].shape))]
    if kind == "relu":
        return [dy if store.identity_nonlinearity else dy * (ins[0] > 0)]
    if kind == "affine":
        return [dy * weights[f"{node.id}.scale"][:, None, None]]
    if kind == "add":
        return [dy] * len(ins)
    if kind == "concat":
        splits = np.cumsum([a.shape[0] for a in ins])[:-1]
        return np.split(dy, splits, axis=0)
    if kind == "coord_concat":
        return [dy[:-1]]
    if kind == "output_probe":
        return [dy]
    raise EngineError(f"cannot differentiate node kind {kind!r}")


def backward(graph: ArchGraph, weights: WeightSet, store: ActivationStore, seed_grad: np.ndarray):
    """Reverse-mode pass from a gradient on the probe to the graph input."""
    probe = graph.probe_id
    if probe not in store.values:
        raise EngineError("forward pass has not been run")
    if seed_grad.shape != store.values[probe].shape:
        raise EngineError(f"seed gradient {seed_grad.shape} does not match probe {store.values[probe].shape}")
    grads: dict[str, np.ndarray] = {probe: seed_grad}
    for nid in reversed(topo_order(graph)):
        dy = grads.pop(nid, None)
        node = graph.nodes[nid]
        if node.kind == "input":
            return dy if dy is not None else np.zeros(graph.input_shape)
        if dy is None:
            continue
        for p, g in zip(node.predecessors, _backward_node(node, dy, graph, weights, store)):
            if p in grads:
                grads[p] = grads[p] + g
            else:
                grads[p] = g
    raise EngineError("input node not reached")  # pragma: no cover


def probe_seed(shape, probe_coord) -> np.ndarray:
    """Unit gradient on every channel at one probe location."""
    coord = Dim2.of(probe_coord)
    _, F, T = shape
    if not (0 <= coord.freq < F and 0 <= coord.time < T):
        raise ValueError(f"probe coordinate {tuple(coord)} outside probe map {F}x{T}")
    seed = np.zeros(shape)
    seed[:, coord.freq, coord.time] = 1.0
    return seed


def probe_center(graph: ArchGraph) -> Dim2:
    _, F, T = infer_shapes(graph)[graph.probe_id]
    return Dim2(F // 2, T // 2)


def probe_loss(graph: ArchGraph, store: ActivationStore, probe_coord) -> float:
    coord = Dim2.of(probe_coord)
    return float(store.values[graph.probe_id][:, coord.freq, coord.time].sum())


def backward_input(graph: ArchGraph, weights: WeightSet, x: np.ndarray, probe_coord=None,
                   identity_nonlinearity: bool = False, store: ActivationStore | None = None):
    """Gradient of ``sum_c probe[c, probe_coord]`` with respect to the input."""
    if store is None:
        store = forward(graph, weights, x, identity_nonlinearity)
    if probe_coord is None:
        probe_coord = probe_center(graph)
    seed = probe_seed(store.values[graph.probe_id].shape, probe_coord)
    return backward(graph, weights, store, seed)


def grad_check(graph: ArchGraph, weights: WeightSet, x: np.ndarray, n_probes: int = 10,
               h: float = 1e-5, probe_coord=None, seed: int = 0,
               identity_nonlinearity: bool = False) -> float:
    """Largest relative error between the analytic input gradient and central
    differences at ``n_probes`` random input elements.

    Relative error is ``|a - n| / max(|a|, |n|, 1e-8 * max|grad|)``; the floor
    keeps elements with (near) zero gradient from dividing by zero.
    """
    x = np.asarray(x, dtype=np.float64)
    if probe_coord is None:
        probe_coord = probe_center(graph)
    analytic = backward_input(graph, weights, x, probe_coord, identity_nonlinearity)
    rng = np.random.default_rng(seed)
    picks = rng.choice(x.size, size=min(n_probes, x.size), replace=False)
    floor = 1e-8 * float(np.max(np.abs(analytic)))
    worst = 0.0
    for flat in picks:
        xp = x.copy()
        xp.flat[flat] += h
        up = probe_loss(graph, forward(graph, weights, xp, identity_nonlinearity), probe_coord)
        xp.flat[flat] = x.flat[flat] - h
        down = probe_loss(graph, forward(graph, weights, xp, identity_nonlinearity), probe_coord)
        num = (up - down) / (2 * h)
        a = float(analytic.flat[flat])
        denom = max(abs(a), abs(num), floor)
        if denom == 0.0:
            continue
        worst = max(worst, abs(a - num) / denom)
    return worst
