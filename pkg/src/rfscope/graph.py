"""Architecture graphs: node specs, validation, shape propagation and the
JSON architecture-file format.

All spatial pairs are stored frequency first, ``(freq, time)``.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Iterable, Mapping, NamedTuple, Optional

FORMAT_VERSION = 1

KINDS = (
    "input",
    "conv",
    "maxpool",
    "relu",
    "affine",
    "add",
    "concat",
    "coord_concat",
    "output_probe",
)
SINGLE_INPUT_KINDS = {"conv", "maxpool", "relu", "affine", "coord_concat", "output_probe"}
MERGE_KINDS = {"add", "concat"}
PADDINGS = ("same", "none")


class Dim2(NamedTuple):
    """A (freq, time) pair."""

    freq: int
    time: int

    @classmethod
    def of(cls, value) -> "Dim2":
        if isinstance(value, int):
            return cls(value, value)
        f, t = value
        return cls(int(f), int(t))


class ArchError(ValueError):
    """Base class for malformed architecture data."""


class ArchParseError(ArchError):
    def __init__(self, message: str, line: Optional[int] = None, col: Optional[int] = None):
        self.line = line
        self.col = col
        if line is not None:
            message = f"{message} (line {line}, column {col})"
        super().__init__(message)


class GraphValidationError(ArchError):
    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("invalid architecture graph:\n  " + "\n  ".join(self.violations))


class CycleError(ArchError):
    def __init__(self, node_id: str):
        self.node_id = node_id
        super().__init__(f"cycle detected through node {node_id!r}")


@dataclass(frozen=True)
class NodeSpec:
    id: str
    kind: str
    predecessors: tuple[str, ...] = ()
    kernel: Optional[Dim2] = None
    stride: Optional[Dim2] = None
    dilation: Optional[Dim2] = None
    groups: Optional[int] = None
    in_channels: Optional[int] = None
    out_channels: Optional[int] = None
    padding: Optional[str] = None
    # (m_t, m_f)
    damping: Optional[tuple[float, float]] = None
    damping_mode: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "predecessors", tuple(self.predecessors))
        for name in ("kernel", "stride", "dilation"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, Dim2.of(value))
        if self.damping is not None:
            m_t, m_f = self.damping
            object.__setattr__(self, "damping", (float(m_t), float(m_f)))
        if self.kind == "conv":
            if self.dilation is None:
                object.__setattr__(self, "dilation", Dim2(1, 1))
            if self.groups is None:
                object.__setattr__(self, "groups", 1)
            if self.padding is None:
                object.__setattr__(self, "padding", "same")
            if self.stride is None:
                object.__setattr__(self, "stride", Dim2(1, 1))
            if self.damping is not None and self.damping_mode is None:
                object.__setattr__(self, "damping_mode", "literal")
        elif self.kind == "maxpool":
            if self.padding is None:
                object.__setattr__(self, "padding", "none")
            if self.stride is None and self.kernel is not None:
                object.__setattr__(self, "stride", self.kernel)

    @property
    def effective_kernel(self) -> Dim2:
        """Kernel extent including dilation; pools have dilation 1."""
        d = self.dilation or Dim2(1, 1)
        return Dim2(d.freq * (self.kernel.freq - 1) + 1, d.time * (self.kernel.time - 1) + 1)

    def pad_before(self) -> Dim2:
        """Zero-padding on the low side of each axis."""
        if self.padding != "same":
            return Dim2(0, 0)
        k = self.effective_kernel
        return Dim2((k.freq - 1) // 2, (k.time - 1) // 2)

    def to_dict(self) -> dict:
        out: dict = {"id": self.id, "kind": self.kind, "predecessors": list(self.predecessors)}
        for name in ("kernel", "stride", "dilation"):
            value = getattr(self, name)
            if value is not None:
                out[name] = [value.freq, value.time]
        for name in ("groups", "in_channels", "out_channels", "padding", "damping_mode"):
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        if self.damping is not None:
            out["damping"] = list(self.damping)
        return out


@dataclass(frozen=True)
class ArchGraph:
    """Immutable DAG of layer nodes feeding one ``output_probe``."""

    nodes: Mapping[str, NodeSpec]
    input_shape: tuple[int, int, int]
    _successors: Mapping[str, tuple[str, ...]] = field(
        default=None, init=False, repr=False, compare=False
    )

    def __post_init__(self):
        nodes = self.nodes
        if not isinstance(nodes, Mapping):
            nodes = {n.id: n for n in nodes}
        object.__setattr__(self, "nodes", MappingProxyType(dict(nodes)))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        succ: dict[str, list[str]] = {nid: [] for nid in self.nodes}
        for node in self.nodes.values():
            for p in node.predecessors:
                if p in succ:
                    succ[p].append(node.id)
        object.__setattr__(
            self, "_successors", MappingProxyType({k: tuple(sorted(v)) for k, v in succ.items()})
        )

    @classmethod
    def from_nodes(cls, nodes: Iterable[NodeSpec], input_shape) -> "ArchGraph":
        nodes = list(nodes)
        seen: set[str] = set()
        for node in nodes:
            if node.id in seen:
                raise ArchError(f"duplicate node id {node.id!r}")
            seen.add(node.id)
        return cls({n.id: n for n in nodes}, tuple(input_shape))

    def __getitem__(self, node_id: str) -> NodeSpec:
        return self.nodes[node_id]

    def successors(self, node_id: str) -> tuple[str, ...]:
        return self._successors[node_id]

    def _single(self, kind: str) -> str:
        found = [n.id for n in self.nodes.values() if n.kind == kind]
        if len(found) != 1:
            raise ArchError(f"expected exactly one {kind} node, found {len(found)}")
        return found[0]

    @property
    def input_id(self) -> str:
        return self._single("input")

    @property
    def probe_id(self) -> str:
        return self._single("output_probe")

    def replace_nodes(self, **changes_by_id: NodeSpec) -> "ArchGraph":
        nodes = dict(self.nodes)
        nodes.update(changes_by_id)
        return ArchGraph(nodes, self.input_shape)

    def map_nodes(self, fn) -> "ArchGraph":
        """New graph with ``fn`` applied to every node."""
        return ArchGraph({nid: fn(n) for nid, n in self.nodes.items()}, self.input_shape)

    def conv_nodes(self) -> list[NodeSpec]:
        return [self.nodes[nid] for nid in topo_order(self) if self.nodes[nid].kind == "conv"]


def topo_order(graph: ArchGraph) -> list[str]:
    """Kahn's algorithm with lexicographic tie-breaking."""
    indeg = {nid: 0 for nid in graph.nodes}
    for node in graph.nodes.values():
        for p in node.predecessors:
            if p not in graph.nodes:
                raise ArchError(f"node {node.id!r} references unknown predecessor {p!r}")
            indeg[node.id] += 1
    heap = [nid for nid, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    order: list[str] = []
    while heap:
        nid = heapq.heappop(heap)
        order.append(nid)
        for s in graph.successors(nid):
            # a successor may list the same predecessor twice
            indeg[s] -= graph.nodes[s].predecessors.count(nid)
            if indeg[s] == 0:
                heapq.heappush(heap, s)
    if len(order) != len(graph.nodes):
        remaining = {nid for nid in graph.nodes if nid not in set(order)}
        # walk backwards until a node repeats; that node lies on a cycle
        nid = min(remaining)
        visited: set[str] = set()
        while nid not in visited:
            visited.add(nid)
            nid = min(p for p in graph.nodes[nid].predecessors if p in remaining)
        raise CycleError(nid)
    return order


def _conv_out(n: int, k: int, s: int, padding: str) -> int:
    if padding == "same":
        return -(-n // s)
    return (n - k) // s + 1


def infer_shapes(graph: ArchGraph) -> dict[str, tuple[int, int, int]]:
    """Propagate (channels, freq, time) from the input. Raises on the first
    inconsistency; use :func:`validate` to collect all of them."""
    shapes, violations = _propagate(graph)
    if violations:
        raise GraphValidationError(violations)
    return shapes


def _propagate(graph: ArchGraph):
    shapes: dict[str, tuple[int, int, int]] = {}
    violations: list[str] = []
    try:
        order = topo_order(graph)
    except ArchError as exc:
        return shapes, [str(exc)]
    for nid in order:
        node = graph.nodes[nid]
        preds = node.predecessors
        if any(p not in shapes for p in preds):
            continue  # upstream failure already reported
        ins = [shapes[p] for p in preds]
        try:
            shapes[nid] = _node_shape(graph, node, ins)
        except ArchError as exc:
            violations.append(str(exc))
    return shapes, violations


def _node_shape(graph: ArchGraph, node: NodeSpec, ins):
    nid = node.id
    if node.kind == "input":
        return graph.input_shape
    if node.kind in SINGLE_INPUT_KINDS:
        c, f, t = ins[0]
    if node.kind == "conv":
        if node.in_channels is not None and node.in_channels != c:
            raise ArchError(f"conv {nid!r}: in_channels={node.in_channels} but input has {c} channels")
        k = node.effective_kernel
        f2 = _conv_out(f, k.freq, node.stride.freq, node.padding)
        t2 = _conv_out(t, k.time, node.stride.time, node.padding)
        if f2 < 1 or t2 < 1:
            raise ArchError(f"conv {nid!r}: kernel larger than its {f}x{t} input")
        return (node.out_channels, f2, t2)
    if node.kind == "maxpool":
        f2 = _conv_out(f, node.kernel.freq, node.stride.freq, node.padding)
        t2 = _conv_out(t, node.kernel.time, node.stride.time, node.padding)
        if f2 < 1 or t2 < 1:
            raise ArchError(f"maxpool {nid!r}: window larger than its {f}x{t} input")
        return (c, f2, t2)
    if node.kind in ("relu", "output_probe"):
        return (c, f, t)
    if node.kind == "affine":
        for name in ("in_channels", "out_channels"):
            v = getattr(node, name)
            if v is not None and v != c:
                raise ArchError(f"affine {nid!r}: {name}={v} but input has {c} channels")
        return (c, f, t)
    if node.kind == "coord_concat":
        if node.in_channels is not None and node.in_channels != c:
            raise ArchError(f"coord_concat {nid!r}: in_channels={node.in_channels} but input has {c}")
        return (c + 1, f, t)
    if node.kind == "add":
        if len({s for s in ins}) != 1:
            desc = ", ".join(f"{p}={s}" for p, s in zip(node.predecessors, ins))
            raise ArchError(f"add {nid!r}: predecessor shapes differ ({desc})")
        return ins[0]
    if node.kind == "concat":
        if len({s[1:] for s in ins}) != 1:
            desc = ", ".join(f"{p}={s}" for p, s in zip(node.predecessors, ins))
            raise ArchError(f"concat {nid!r}: predecessor spatial shapes differ ({desc})")
        return (sum(s[0] for s in ins), ins[0][1], ins[0][2])
    raise ArchError(f"node {nid!r}: unknown kind {node.kind!r}")


def _check_node(graph: ArchGraph, node: NodeSpec) -> list[str]:
    out: list[str] = []
    nid = node.id
    if node.kind not in KINDS:
        return [f"node {nid!r}: unknown kind {node.kind!r}"]
    for p in node.predecessors:
        if p not in graph.nodes:
            out.append(f"node {nid!r}: unknown predecessor {p!r}")
    n_pred = len(node.predecessors)
    if node.kind == "input" and n_pred:
        out.append(f"input {nid!r} must not have predecessors")
    if node.kind in SINGLE_INPUT_KINDS and n_pred != 1:
        out.append(f"{node.kind} {nid!r} needs exactly 1 predecessor, has {n_pred}")
    if node.kind in MERGE_KINDS and n_pred < 2:
        out.append(f"{node.kind} {nid!r} needs at least 2 predecessors, has {n_pred}")
    if node.kind in ("conv", "maxpool"):
        for name in ("kernel", "stride"):
            v = getattr(node, name)
            if v is None:
                out.append(f"{node.kind} {nid!r}: missing {name}")
            elif min(v) < 1:
                out.append(f"{node.kind} {nid!r}: {name} components must be >= 1")
        if node.padding not in PADDINGS:
            out.append(f"{node.kind} {nid!r}: padding must be one of {PADDINGS}")
    if node.kind == "conv":
        if min(node.dilation) < 1:
            out.append(f"conv {nid!r}: dilation components must be >= 1")
        if node.in_channels is None or node.out_channels is None:
            out.append(f"conv {nid!r}: in_channels and out_channels are required")
        elif node.in_channels < 1 or node.out_channels < 1:
            out.append(f"conv {nid!r}: channel counts must be positive")
        elif node.groups < 1:
            out.append(f"conv {nid!r}: groups must be positive")
        elif node.in_channels % node.groups or node.out_channels % node.groups:
            out.append(
                f"conv {nid!r}: groups={node.groups} does not divide "
                f"in_channels={node.in_channels} and out_channels={node.out_channels}"
            )
        if node.damping is not None:
            if not all(0.0 <= m < 1.0 for m in node.damping):
                out.append(f"conv {nid!r}: damping factors must lie in [0, 1)")
            if node.damping_mode not in ("literal", "centered"):
                out.append(f"conv {nid!r}: damping_mode must be 'literal' or 'centered'")
    elif node.damping is not None:
        out.append(f"{node.kind} {nid!r}: only conv nodes may be damped")
    if node.kind == "coord_concat":
        if (
            node.in_channels is not None
            and node.out_channels is not None
            and node.out_channels != node.in_channels + 1
        ):
            out.append(f"coord_concat {nid!r}: out_channels must equal in_channels + 1")
    if node.kind == "affine" and node.in_channels is not None and node.out_channels is not None:
        if node.in_channels != node.out_channels:
            out.append(f"affine {nid!r}: in_channels must equal out_channels")
    return out


def validate(graph: ArchGraph) -> list[str]:
    """Collect every invariant violation; an empty list means valid."""
    violations: list[str] = []
    if len(graph.input_shape) != 3 or min(graph.input_shape) < 1:
        violations.append(f"input_shape must be three positive integers, got {graph.input_shape}")
    for kind in ("input", "output_probe"):
        count = sum(1 for n in graph.nodes.values() if n.kind == kind)
        if count != 1:
            violations.append(f"graph needs exactly one {kind} node, found {count}")
    for nid in sorted(graph.nodes):
        violations.extend(_check_node(graph, graph.nodes[nid]))
    if violations:
        return violations

    try:
        topo_order(graph)
    except ArchError as exc:
        return [str(exc)]

    # reachability both ways
    start = graph.input_id
    reach = {start}
    stack = [start]
    while stack:
        for s in graph.successors(stack.pop()):
            if s not in reach:
                reach.add(s)
                stack.append(s)
    for nid in sorted(set(graph.nodes) - reach):
        violations.append(f"node {nid!r} is not reachable from the input")
    probe = graph.probe_id
    if graph.successors(probe):
        violations.append(f"output_probe {probe!r} must not feed other nodes")
    feeds = {probe}
    stack = [probe]
    while stack:
        for p in graph.nodes[stack.pop()].predecessors:
            if p not in feeds:
                feeds.add(p)
                stack.append(p)
    for nid in sorted(set(graph.nodes) - feeds):
        violations.append(f"node {nid!r} does not feed the output_probe")

    _, shape_violations = _propagate(graph)
    violations.extend(shape_violations)
    return violations


def check_valid(graph: ArchGraph) -> ArchGraph:
    violations = validate(graph)
    if violations:
        raise GraphValidationError(violations)
    return graph


# --- architecture files ---------------------------------------------------

_FIELDS = {
    "id", "kind", "predecessors", "kernel", "stride", "dilation", "groups",
    "in_channels", "out_channels", "padding", "damping", "damping_mode",
}


def _node_from_dict(obj, index: int) -> NodeSpec:
    if not isinstance(obj, dict):
        raise ArchParseError(f"nodes[{index}] must be an object")
    unknown = set(obj) - _FIELDS
    if unknown:
        raise ArchParseError(f"nodes[{index}]: unknown field(s) {sorted(unknown)}")
    if "id" not in obj or not isinstance(obj["id"], str) or not obj["id"]:
        raise ArchParseError(f"nodes[{index}]: missing or empty 'id'")
    kind = obj.get("kind")
    if kind not in KINDS:
        raise ArchParseError(f"node {obj['id']!r}: unknown node kind {kind!r}")
    kwargs = dict(obj)
    kwargs["predecessors"] = tuple(obj.get("predecessors", ()))
    try:
        for name in ("kernel", "stride", "dilation"):
            if name in kwargs:
                pair = kwargs[name]
                if not (isinstance(pair, list) and len(pair) == 2 and all(isinstance(v, int) for v in pair)):
                    raise ArchParseError(f"node {obj['id']!r}: {name} must be a [freq, time] integer pair")
        if "damping" in kwargs and kwargs["damping"] is not None:
            pair = kwargs["damping"]
            if not (isinstance(pair, list) and len(pair) == 2):
                raise ArchParseError(f"node {obj['id']!r}: damping must be a [m_t, m_f] pair")
            kwargs["damping"] = tuple(pair)
        return NodeSpec(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ArchParseError):
            raise
        raise ArchParseError(f"node {obj['id']!r}: {exc}") from exc


def parse_arch(text: str) -> ArchGraph:
    """Parse and validate an architecture file."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ArchParseError(f"syntax error: {exc.msg}", exc.lineno, exc.colno) from exc
    if not isinstance(data, dict):
        raise ArchParseError("top level must be an object")
    if data.get("version") != FORMAT_VERSION:
        raise ArchParseError(f"unsupported version {data.get('version')!r}, expected {FORMAT_VERSION}")
    shape = data.get("input_shape")
    if not (isinstance(shape, list) and len(shape) == 3 and all(isinstance(v, int) for v in shape)):
        raise ArchParseError("input_shape must be [C, F, T]")
    raw_nodes = data.get("nodes")
    if not isinstance(raw_nodes, list):
        raise ArchParseError("nodes must be an array")
    nodes: dict[str, NodeSpec] = {}
    for i, obj in enumerate(raw_nodes):
        node = _node_from_dict(obj, i)
        if node.id in nodes:
            raise ArchParseError(f"duplicate node id {node.id!r}")
        nodes[node.id] = node
    for node in nodes.values():
        for p in node.predecessors:
            if p not in nodes:
                raise ArchParseError(f"node {node.id!r}: dangling predecessor {p!r}")
    return check_valid(ArchGraph(nodes, tuple(shape)))


def serialize_arch(graph: ArchGraph) -> str:
    """Canonical text: sorted keys, 2-space indent, nodes in topological order."""
    check_valid(graph)
    data = {
        "version": FORMAT_VERSION,
        "input_shape": list(graph.input_shape),
        "nodes": [graph.nodes[nid].to_dict() for nid in topo_order(graph)],
    }
    return json.dumps(data, sort_keys=True, indent=2) + "\n"


def load_arch(path) -> ArchGraph:
    with open(path, encoding="utf-8") as fh:
        return parse_arch(fh.read())


def save_arch(graph: ArchGraph, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(serialize_arch(graph))


def with_damping(graph: ArchGraph, damping, mode: str = "literal") -> ArchGraph:
    """Copy of ``graph`` with ``damping`` (``(m_t, m_f)`` or None) set on every conv."""

    def fn(node):
        if node.kind != "conv":
            return node
        if damping is None:
            return replace(node, damping=None, damping_mode=None)
        return replace(node, damping=tuple(damping), damping_mode=mode)

    return graph.map_nodes(fn)
