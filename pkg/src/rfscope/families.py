"""CP_ResNet and CP_DenseNet generators.

Both families share a 22-slot kernel schedule: slot ``k`` is 3 along a
dimension when ``k <= rho`` for that dimension, otherwise 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .graph import ArchGraph, Dim2, NodeSpec, check_valid
from .rf import max_rf

N_SLOTS = 22
RHO_MAX = 21
FAMILIES = ("cp_resnet", "cp_densenet")

# Max RF for rho = 0..21, identical for both families.
MAX_RF_TABLE = (
    23, 31, 39, 55, 71, 87, 103, 135, 167, 199, 231,
    263, 295, 327, 359, 391, 423, 455, 487, 519, 551, 583,
)

_RESNET_POOLED_BLOCKS = (1, 2, 4)


def _check_rho(value: int, name: str = "rho") -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise TypeError(f"{name} must be an integer, got {value!r}")
    if not 0 <= value <= RHO_MAX:
        raise ValueError(f"{name} must lie in [0, {RHO_MAX}], got {value}")
    return value


def kernel_schedule(rho_f: int, rho_t: int) -> list[Dim2]:
    """Kernel sizes ``x_1 .. x_22`` as (freq, time) pairs."""
    _check_rho(rho_f, "rho_f")
    _check_rho(rho_t, "rho_t")
    return [Dim2(3 if k <= rho_f else 1, 3 if k <= rho_t else 1) for k in range(1, N_SLOTS + 1)]


@dataclass(frozen=True)
class FamilyConfig:
    family: str = "cp_resnet"
    rho: Optional[int] = None
    rho_f: Optional[int] = None
    rho_t: Optional[int] = None
    growth_rate: Optional[int] = None
    groups: int = 1
    # (m_t, m_f)
    damping: Optional[tuple[float, float]] = None
    damping_mode: str = "literal"
    extra_pools: int = 0
    n_frames: int = 256
    n_bins: int = 256
    base_channels: int = 128
    shake_shake: bool = False
    freq_aware: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        split = self.rho_f is not None or self.rho_t is not None
        if (self.rho is None) == (not split):
            raise ValueError("set exactly one of rho or the (rho_f, rho_t) pair")
        if split:
            if self.rho_f is None or self.rho_t is None:
                raise ValueError("rho_f and rho_t must be given together")
            _check_rho(self.rho_f, "rho_f")
            _check_rho(self.rho_t, "rho_t")
        else:
            _check_rho(self.rho)
        if self.growth_rate is not None and self.family != "cp_densenet":
            raise ValueError("growth_rate only applies to cp_densenet")
        if self.growth_rate is not None and self.growth_rate < 1:
            raise ValueError("growth_rate must be positive")
        if self.groups < 1:
            raise ValueError("groups must be positive")
        if not 0 <= self.extra_pools <= 8:
            raise ValueError("extra_pools must lie in [0, 8]")
        if self.damping is not None:
            object.__setattr__(self, "damping", tuple(float(m) for m in self.damping))
            if not all(0.0 <= m < 1.0 for m in self.damping):
                raise ValueError("damping factors must lie in [0, 1)")
        if self.shake_shake and self.family != "cp_resnet":
            raise ValueError("shake_shake applies to cp_resnet only")

    @property
    def rhos(self) -> tuple[int, int]:
        if self.rho is not None:
            return self.rho, self.rho
        return self.rho_f, self.rho_t

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (1, self.n_bins, self.n_frames)

    @property
    def effective_growth_rate(self) -> int:
        return 64 if self.growth_rate is None else self.growth_rate


class _Builder:
    def __init__(self, cfg: FamilyConfig):
        self.cfg = cfg
        self.nodes: list[NodeSpec] = [NodeSpec("input", "input")]
        self.channels = {"input": 1}

    def conv(self, nid, src, out_ch, kernel, stride=1, groups=None):
        in_ch = self.channels[src]
        g = self.cfg.groups if groups is None else groups
        if in_ch % g or out_ch % g:
            g = 1
        self.nodes.append(
            NodeSpec(
                nid, "conv", (src,), kernel=Dim2.of(kernel), stride=Dim2.of(stride),
                groups=g, in_channels=in_ch, out_channels=out_ch, padding="same",
                damping=self.cfg.damping,
                damping_mode=self.cfg.damping_mode if self.cfg.damping else None,
            )
        )
        self.channels[nid] = out_ch
        return nid

    def affine(self, nid, src):
        c = self.channels[src]
        self.nodes.append(NodeSpec(nid, "affine", (src,), in_channels=c, out_channels=c))
        self.channels[nid] = c
        return nid

    def relu(self, nid, src):
        self.nodes.append(NodeSpec(nid, "relu", (src,)))
        self.channels[nid] = self.channels[src]
        return nid

    def conv_bn_relu(self, prefix, src, out_ch, kernel, stride=1, groups=None, suffix=""):
        x = self.conv(f"{prefix}.conv{suffix}", src, out_ch, kernel, stride, groups)
        x = self.affine(f"{prefix}.bn{suffix}", x)
        return self.relu(f"{prefix}.relu{suffix}", x)

    def pool(self, nid, src):
        self.nodes.append(NodeSpec(nid, "maxpool", (src,), kernel=Dim2(2, 2), stride=Dim2(2, 2), padding="none"))
        self.channels[nid] = self.channels[src]
        return nid

    def coord(self, nid, src):
        c = self.channels[src]
        self.nodes.append(NodeSpec(nid, "coord_concat", (src,), in_channels=c, out_channels=c + 1))
        self.channels[nid] = c + 1
        return nid

    def merge(self, kind, nid, srcs):
        self.nodes.append(NodeSpec(nid, kind, tuple(srcs)))
        if kind == "add":
            self.channels[nid] = self.channels[srcs[0]]
        else:
            self.channels[nid] = sum(self.channels[s] for s in srcs)
        return nid

    def finish(self, src) -> ArchGraph:
        self.nodes.append(NodeSpec("probe", "output_probe", (src,)))
        return check_valid(ArchGraph.from_nodes(self.nodes, self.cfg.input_shape))

    def stem(self, out_ch):
        # input 5x5 conv, never grouped (single input channel)
        return self.conv_bn_relu("stem", "input", out_ch, 5, stride=2, groups=1)


def _extra_pool_positions(n: int) -> set[int]:
    # residual blocks 5..12, spaced evenly
    return {4 + -(-k * 8 // (n + 1)) for k in range(1, n + 1)}


def cp_resnet(cfg: FamilyConfig) -> ArchGraph:
    if cfg.family != "cp_resnet":
        raise ValueError(f"cp_resnet() got a {cfg.family} config")
    sched = kernel_schedule(*cfg.rhos)
    b = _Builder(cfg)
    base = cfg.base_channels
    x = b.stem(base)
    extra = _extra_pool_positions(cfg.extra_pools)
    for rb in range(1, 13):
        out_ch = base if rb <= 4 else (2 * base if rb <= 8 else 4 * base)
        if rb == 1:
            kernels = (Dim2(3, 3), Dim2(1, 1))
        else:
            kernels = (sched[2 * rb - 4], sched[2 * rb - 3])
        p = f"rb{rb:02d}"
        branch_in = b.coord(f"{p}.coord", x) if cfg.freq_aware else x
        branches = []
        for tag in (("a", "b") if cfg.shake_shake else ("",)):
            bp = f"{p}.{tag}" if tag else p
            y = b.conv_bn_relu(bp, branch_in, out_ch, kernels[0], suffix="1")
            y = b.conv_bn_relu(bp, y, out_ch, kernels[1], suffix="2")
            branches.append(y)
        shortcut = x
        if b.channels[x] != out_ch:
            shortcut = b.conv(f"{p}.proj", x, out_ch, 1)
            shortcut = b.affine(f"{p}.proj_bn", shortcut)
        x = b.merge("add", f"{p}.add", [shortcut, *branches])
        if rb in _RESNET_POOLED_BLOCKS:
            x = b.pool(f"{p}.pool", x)
        if rb in extra:
            x = b.pool(f"{p}.xpool", x)
    return b.finish(x)


def cp_densenet(cfg: FamilyConfig) -> ArchGraph:
    if cfg.family != "cp_densenet":
        raise ValueError(f"cp_densenet() got a {cfg.family} config")
    sched = kernel_schedule(*cfg.rhos)
    growth = cfg.effective_growth_rate
    b = _Builder(cfg)
    x = b.stem(cfg.base_channels)
    # dense-layer kernels: fixed 3x3 and 1x1, then x_1..x_22
    kernels = [Dim2(3, 3), Dim2(1, 1), *sched]
    # pools follow dense layers 2 (after the B transition), 4 and 8
    pool_after = {2: True, 4: False, 8: False}
    # residual block r ends with slot x_{2r-2}, i.e. dense layer 2r
    extra = {2 * rb for rb in _extra_pool_positions(cfg.extra_pools)}
    for i, kernel in enumerate(kernels, start=1):
        p = f"dl{i:02d}"
        src = b.coord(f"{p}.coord", x) if cfg.freq_aware else x
        y = b.conv_bn_relu(f"{p}.b", src, 4 * growth, 1)
        y = b.conv_bn_relu(p, y, growth, kernel)
        x = b.merge("concat", f"{p}.concat", [x, y])
        if i in pool_after:
            if pool_after[i]:
                x = b.conv_bn_relu(f"tr{i:02d}", x, b.channels[x], 1)
            x = b.pool(f"{p}.pool", x)
        if i in extra:
            x = b.pool(f"{p}.xpool", x)
    return b.finish(x)


def generate(cfg: FamilyConfig) -> ArchGraph:
    return cp_resnet(cfg) if cfg.family == "cp_resnet" else cp_densenet(cfg)


def rho_table(family: str = "cp_resnet") -> list[tuple[int, Dim2]]:
    """(rho, probe Max RF) for every admissible rho, computed from generated graphs."""
    return [(rho, max_rf(generate(FamilyConfig(family, rho=rho))).max_rf) for rho in range(RHO_MAX + 1)]
