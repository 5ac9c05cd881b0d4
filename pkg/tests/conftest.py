import numpy as np
import pytest

from rfscope.graph import ArchGraph, Dim2, NodeSpec, check_valid

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture
def record():
    def _record(name, ok, detail=""):
        ACCEPTANCE_RESULTS.append((name, bool(ok), detail))
        assert ok, f"{name}: {detail}"

    return _record


def chain(input_shape, *layers):
    """Linear graph input -> layers... -> probe. Each layer is a NodeSpec
    without predecessors; ids must be unique."""
    from dataclasses import replace

    nodes = [NodeSpec("input", "input")]
    prev = "input"
    for layer in layers:
        nodes.append(replace(layer, predecessors=(prev,)))
        prev = layer.id
    nodes.append(NodeSpec("probe", "output_probe", (prev,)))
    return check_valid(ArchGraph.from_nodes(nodes, input_shape))


def conv(nid, cin, cout, k=3, s=1, d=1, g=1, padding="same", damping=None):
    return NodeSpec(nid, "conv", kernel=Dim2.of(k), stride=Dim2.of(s), dilation=Dim2.of(d), groups=g,
                    in_channels=cin, out_channels=cout, padding=padding, damping=damping)


def random_graph(rng: np.random.Generator, n_layers=5, linear=True, max_size=16) -> ArchGraph:
    """Small random valid graph. ``linear`` excludes relu and maxpool."""
    c = int(rng.integers(1, 4))
    F = int(rng.integers(6, max_size + 1))
    T = int(rng.integers(6, max_size + 1))
    nodes = [NodeSpec("input", "input")]
    cur, ch, f, t = "input", c, F, T
    counter = iter(range(1000))

    def nid(prefix):
        return f"{prefix}{next(counter):03d}"

    def make_conv(src, cin, f, t, allow_stride=True):
        cout = int(rng.choice([1, 2, 3, 4, 6]))
        groups = [g for g in (1, 2, 3) if cin % g == 0 and cout % g == 0]
        g = int(rng.choice(groups))
        k = Dim2(int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        d = Dim2(int(rng.integers(1, 3)), int(rng.integers(1, 3)))
        s = Dim2(1, 1)
        if allow_stride:
            s = Dim2(int(rng.integers(1, 3)) if f >= 6 else 1, int(rng.integers(1, 3)) if t >= 6 else 1)
        keff = Dim2(d.freq * (k.freq - 1) + 1, d.time * (k.time - 1) + 1)
        padding = "none" if (allow_stride and rng.random() < 0.3 and keff.freq <= f and keff.time <= t) else "same"
        node = NodeSpec(nid("conv"), "conv", (src,), kernel=k, stride=s, dilation=d, groups=g,
                        in_channels=cin, out_channels=cout, padding=padding)
        if padding == "same":
            f2, t2 = -(-f // s.freq), -(-t // s.time)
        else:
            f2, t2 = (f - keff.freq) // s.freq + 1, (t - keff.time) // s.time + 1
        return node, cout, f2, t2

    kinds = ["conv", "conv", "affine", "residual", "concat", "coord"]
    if not linear:
        kinds += ["relu", "relu", "pool"]
    for _ in range(n_layers):
        kind = str(rng.choice(kinds))
        if kind == "pool" and (f < 2 or t < 2):
            kind = "conv"
        if kind == "conv":
            node, ch, f, t = make_conv(cur, ch, f, t)
            nodes.append(node)
            cur = node.id
        elif kind == "affine":
            node = NodeSpec(nid("aff"), "affine", (cur,), in_channels=ch, out_channels=ch)
            nodes.append(node)
            cur = node.id
        elif kind == "relu":
            node = NodeSpec(nid("relu"), "relu", (cur,))
            nodes.append(node)
            cur = node.id
        elif kind == "pool":
            node = NodeSpec(nid("pool"), "maxpool", (cur,), kernel=Dim2(2, 2), stride=Dim2(2, 2))
            nodes.append(node)
            cur = node.id
            f, t = f // 2, t // 2
        elif kind == "coord":
            node = NodeSpec(nid("coord"), "coord_concat", (cur,), in_channels=ch, out_channels=ch + 1)
            nodes.append(node)
            cur, ch = node.id, ch + 1
        elif kind == "residual":
            k = Dim2(int(rng.integers(0, 2)) * 2 + 1, int(rng.integers(0, 2)) * 2 + 1)
            branch = NodeSpec(nid("conv"), "conv", (cur,), kernel=k, stride=Dim2(1, 1), groups=1,
                              in_channels=ch, out_channels=ch, padding="same")
            add = NodeSpec(nid("add"), "add", (cur, branch.id))
            nodes += [branch, add]
            cur = add.id
        elif kind == "concat":
            a, ca, _, _ = make_conv(cur, ch, f, t, allow_stride=False)
            b, cb, _, _ = make_conv(cur, ch, f, t, allow_stride=False)
            cat = NodeSpec(nid("cat"), "concat", (a.id, b.id))
            nodes += [a, b, cat]
            cur, ch = cat.id, ca + cb
    nodes.append(NodeSpec("probe", "output_probe", (cur,)))
    return check_valid(ArchGraph.from_nodes(nodes, (c, F, T)))


def naive_conv(x, W, b, stride, dilation, groups, pad_before, out_shape):
    """Direct-loop cross-correlation oracle."""
    c_in, F, T = x.shape
    c_out, cg, kf, kt = W.shape
    _, fo, to = out_shape
    og = c_out // groups
    y = np.zeros(out_shape)
    for co in range(c_out):
        g = co // og
        for i in range(fo):
            for j in range(to):
                acc = b[co]
                for ci in range(cg):
                    for a in range(kf):
                        for bb in range(kt):
                            fi = i * stride[0] + a * dilation[0] - pad_before[0]
                            tj = j * stride[1] + bb * dilation[1] - pad_before[1]
                            if 0 <= fi < F and 0 <= tj < T:
                                acc += W[co, ci, a, bb] * x[g * cg + ci, fi, tj]
                y[co, i, j] = acc
    return y
