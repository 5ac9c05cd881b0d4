"""Acceptance gate.  Each test checks one criterion at its stated tolerance
and reports a PASS/FAIL line in the terminal summary."""

import time

import numpy as np

from conftest import random_graph
from rfscope.damping import axis_factors, bake, damping_matrix
from rfscope.engine import forward, grad_check, init_weights
from rfscope.erf import erf_stats, gradient_map, mass_fraction, noise_inputs
from rfscope.families import MAX_RF_TABLE, FamilyConfig, cp_resnet, generate, rho_table
from rfscope.graph import Dim2
from rfscope.rf import conv_weight_count, count_params, effective_kernel, max_rf, rf_window


def test_1_max_rf_table_golden(record):
    t0 = time.perf_counter()
    bad = []
    for family in ("cp_resnet", "cp_densenet"):
        for rho, rf in rho_table(family):
            if rf != Dim2(MAX_RF_TABLE[rho], MAX_RF_TABLE[rho]):
                bad.append((family, rho, tuple(rf)))
    dt = time.perf_counter() - t0
    record("1 max RF table golden", not bad and dt < 1.0, f"44 rows, mismatches={bad}, {dt:.2f}s")


def test_2_per_dimension_law(record):
    t0 = time.perf_counter()
    rhos = [0, 3, 8, 14, 21]
    bad = []
    for rf_ in rhos:
        for rt in rhos:
            got = max_rf(cp_resnet(FamilyConfig(rho_f=rf_, rho_t=rt))).max_rf
            if got != Dim2(MAX_RF_TABLE[rf_], MAX_RF_TABLE[rt]):
                bad.append((rf_, rt, tuple(got)))
    dt = time.perf_counter() - t0
    record("2 per-dimension law", not bad and dt < 1.0, f"25 pairs, mismatches={bad}, {dt:.2f}s")


def test_3_dilation_and_grouping(record):
    problems = []
    if effective_kernel(3, 2) != 5:
        problems.append("effective_kernel(3,2)")
    base = cp_resnet(FamilyConfig(rho=6))
    base_report = max_rf(base)
    for g in (4, 8):
        grouped = cp_resnet(FamilyConfig(rho=6, groups=g))
        if max_rf(grouped) != base_report:
            problems.append(f"report differs at g={g}")
        n_grouped = 0
        for nid, node in grouped.nodes.items():
            if node.kind == "conv" and node.groups == g:
                n_grouped += 1
                if conv_weight_count(node) * g != conv_weight_count(base[nid]):
                    problems.append(f"{nid} weights not 1/{g}")
        if n_grouped == 0:
            problems.append(f"no conv grouped at g={g}")
    record("3 dilation/grouping", not problems, f"problems={problems}")


def test_4_extra_pools(record):
    detail, ok = [], True
    for family in ("cp_resnet", "cp_densenet"):
        rfs, params = [], []
        for n in (0, 1, 2):
            g = generate(FamilyConfig(family, rho=5, extra_pools=n))
            rfs.append(max_rf(g).max_rf)
            params.append(count_params(g))
        grows = all(b.freq > a.freq and b.time > a.time for a, b in zip(rfs, rfs[1:]))
        ok &= grows and len(set(params)) == 1
        detail.append(f"{family} rf={[r.freq for r in rfs]} params_equal={len(set(params)) == 1}")
    record("4 extra pools", ok, "; ".join(detail))


def test_5_gradient_correctness(record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {True: 0.0, False: 0.0}
    for linear in (True, False):
        for i in range(10):
            g = random_graph(rng, n_layers=5, linear=linear, max_size=16)
            w = init_weights(g, i)
            x = rng.normal(size=g.input_shape)
            worst[linear] = max(worst[linear], grad_check(g, w, x, n_probes=10, h=1e-5))
    dt = time.perf_counter() - t0
    ok = worst[True] <= 1e-6 and worst[False] <= 1e-5 and dt < 30
    record("5 gradient correctness", ok,
           f"linear max={worst[True]:.2e} (<=1e-6), relu max={worst[False]:.2e} (<=1e-5), {dt:.1f}s")


def test_6_erf_containment(record):
    t0 = time.perf_counter()
    failures = []
    for rho in (2, 5, 9):
        g = cp_resnet(FamilyConfig(rho=rho))
        for seed in (0, 1, 2):
            w = init_weights(g, seed)
            gm = gradient_map(g, w, noise_inputs(g.input_shape, 16, seed))
            win = rf_window(g, g.probe_id, gm.probe_coord)
            s = erf_stats(gm)
            nz = np.argwhere(gm.grid > 0)
            for axis, dim, clipped in ((0, "freq", win.clipped_freq), (1, "time", win.clipped_time)):
                lo1, hi1 = clipped.lo + 1, clipped.hi + 1  # 1-based, like the stats
                sup = (nz[:, axis].min() + 1, nz[:, axis].max() + 1)
                box = s.box(dim)
                if not (lo1 <= sup[0] and sup[1] <= hi1 and lo1 <= box[0] and box[1] <= hi1):
                    failures.append((rho, seed, dim, sup, box, (lo1, hi1)))
    dt = time.perf_counter() - t0
    record("6 ERF containment", not failures and dt < 600, f"9 runs, failures={failures}, {dt:.0f}s")


def test_7_gaussian_estimator(record):
    t0 = time.perf_counter()
    pos = np.arange(1, 257)
    g = np.exp(-0.5 * ((pos - 128.5) / 10.0) ** 2)
    grid = np.outer(g, g)
    s = erf_stats(grid)
    frac = mass_fraction(grid, "time", s.box("time"))
    dt = time.perf_counter() - t0
    ok = abs(s.E_t - 40) <= 0.8 and abs(s.E_f - 40) <= 0.8 and abs(frac - 0.9545) <= 0.01 and dt < 1
    record("7 Gaussian estimator", ok, f"E=({s.E_f:.4f},{s.E_t:.4f}) mass={frac:.4f}, {dt:.3f}s")


def test_8_damping_mechanism(record):
    t0 = time.perf_counter()
    problems, lines = [], []
    for rho in (5, 10, 15):
        plain = cp_resnet(FamilyConfig(rho=rho))
        damped = cp_resnet(FamilyConfig(rho=rho, damping=(0.0, 0.9)))
        w = init_weights(plain, 0)
        xs = noise_inputs(plain.input_shape, 4, 0)
        e_plain = erf_stats(gradient_map(plain, w, xs)).E_f
        e_damped = erf_stats(gradient_map(damped, w, xs)).E_f
        if not e_damped < e_plain:
            problems.append(f"rho={rho} E_f {e_damped:.1f} >= {e_plain:.1f}")
        gb, wb = bake(damped, w)
        if not np.array_equal(forward(damped, w, xs[0])["probe"], forward(gb, wb, xs[0])["probe"]):
            problems.append(f"rho={rho} bake not bitwise")
        lines.append(f"rho={rho} E_f {e_plain:.1f}->{e_damped:.1f}")
    dt = time.perf_counter() - t0
    record("8 damping mechanism", not problems and dt < 900,
           f"{', '.join(lines)}; problems={problems}, {dt:.0f}s")


def test_9_damping_matrix(record):
    C = damping_matrix(3, 3, 0.9, 0.9)
    axis_ok = (np.max(np.abs(axis_factors(3, 0.9) - [0.1, 0.7, 0.7])) <= 1e-12
               and np.max(np.abs(C.factors - np.outer([0.1, 0.7, 0.7], [0.1, 0.7, 0.7]))) <= 1e-12)
    ones_ok = all(np.array_equal(damping_matrix(T, F, 0.0, 0.0).factors, np.ones((T, F)))
                  for T, F in ((1, 1), (3, 3), (5, 1), (7, 3)))
    record("9 damping matrix", axis_ok and ones_ok, f"axis factors={axis_factors(3, 0.9).tolist()}, m=0 ones={ones_ok}")
