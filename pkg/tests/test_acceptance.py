"""Acceptance criteria. Each test records one PASS/FAIL line, repeated in the terminal summary."""

import math
import os
import time

import numpy as np
import pytest
from helpers import (
    OPS,
    ExactDenseEnergy,
    all_states,
    counting_entropy,
    grad_check,
    loss_fn,
    random_graph_arrays,
    random_spd,
    small_cnn_spec,
    smooth_sample,
)
from scipy.stats import multivariate_normal

from isingprune import stats as st
from isingprune import tensor as T
from isingprune.cli import load_datasets, main
from isingprune.evolve import (
    evolve_step,
    init_population,
    row_streams,
    score,
    state_spread,
)
from isingprune.ising import build_graph, energies, energy, gather_stats, make_graph
from isingprune.model import apply_mask, materialize_pruned, param_activity, toy_spec
from isingprune.trainer import (
    TrainConfig,
    final_metrics,
    init_network,
    make_optimizer,
    masked_step,
    predict,
    run_ipruning,
    train_baseline,
)

SEEDS = range(100)


def test_1_gradient_oracle(acceptance):
    t0 = time.perf_counter()
    worst = 0.0
    for name, (fn, shapes) in sorted(OPS.items()):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            arrs = [rng.normal(size=s) for s in shapes]
            weights = rng.normal(size=fn([T.Tensor(a) for a in arrs]).shape)
            worst = max(worst, grad_check(lambda p: (fn(p) * weights).sum(), arrs, eps=1e-5))
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        z, y = rng.normal(size=(4, 5)), rng.integers(0, 5, 4)
        worst = max(worst, grad_check(lambda p: T.softmax_cross_entropy(p[0], y), [z], eps=1e-5))
    spec = small_cnn_spec()
    for seed in SEEDS:
        net, x, y = smooth_sample(spec, (3, 1, 6, 6), 3, seed)
        worst = max(worst, grad_check(loss_fn(spec, x, y), [p.data for p in net.params], eps=1e-5))
    toy = toy_spec()
    for seed in SEEDS:
        net, x, y = smooth_sample(toy, (1, 1, 16, 16), 4, seed, margin=2e-4)
        err = grad_check(loss_fn(toy, x, y), [p.data for p in net.params], eps=1e-5, coords=3,
                         rng=np.random.default_rng(seed))
        worst = max(worst, err)
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 60
    acceptance("1", ok, f"max relative error {worst:.2e} (< 1e-4), {elapsed:.1f}s (< 60s)")
    assert ok


def test_2_entropy_oracle(acceptance):
    rng = np.random.default_rng(2024)
    worst, lo, hi = 0.0, math.inf, -math.inf
    for i in range(1000):
        n = int(rng.integers(1, 2000))
        if i % 2:
            q = rng.integers(0, int(rng.integers(1, 257)), n)
        else:
            f = rng.exponential(size=n) * (rng.random(n) < rng.random())
            q = st.quantize_feature_map(f)
        h = st.entropy_of_pmf(st.pmf(q))
        worst = max(worst, abs(h - counting_entropy(q)))
        lo, hi = min(lo, h), max(hi, h)
    ok = worst <= 1e-12 and lo >= 0.0 and hi <= 8.0
    acceptance("2", ok, f"max |H - counting H| {worst:.1e} (<= 1e-12), H range [{lo:.3f}, {hi:.3f}] within [0, 8]")
    assert ok


def test_3_kl_oracle(acceptance):
    eps = st.DEFAULT_EPS
    exact = st.kl_divergence(st.KernelDistribution(np.array([0.0]), np.array([[1.0]]), 1),
                             st.KernelDistribution(np.array([1.0]), np.array([[1.0]]), 1))
    reg = st.kl_divergence(st.KernelDistribution(np.array([0.0]), np.array([[1.0 + eps]]), 1),
                           st.KernelDistribution(np.array([1.0]), np.array([[1.0 + eps]]), 1))
    closed_ok = abs(exact - 0.5) <= 1e-9 and abs(reg - 0.5) <= 0.5 * eps

    mc_ok, worst_z = True, 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        mi, mj = rng.normal(size=2), rng.normal(size=2)
        ci, cj = random_spd(rng, 2), random_spd(rng, 2)
        kl = st.kl_divergence(st.KernelDistribution(mi, ci, 2), st.KernelDistribution(mj, cj, 2))
        xs = rng.multivariate_normal(mi, ci, size=1_000_000)
        r = multivariate_normal(mi, ci).logpdf(xs) - multivariate_normal(mj, cj).logpdf(xs)
        z = abs(r.mean() - kl) / (r.std(ddof=1) / math.sqrt(r.size))
        worst_z = max(worst_z, z)
        mc_ok &= z <= 3.0

    rng = np.random.default_rng(77)
    negatives, smallest = 0, math.inf
    for i in range(10_000):
        k1, k2 = rng.integers(1, 4, 2)
        K = int(k1 * k2)
        if i % 2:
            a = st.KernelDistribution(rng.normal(size=K), random_spd(rng, K), K)
            b = st.KernelDistribution(rng.normal(size=K), random_spd(rng, K), K)
        else:
            w = rng.normal(size=(2, int(rng.integers(1, 6)), k1, k2))
            a, b = st.fit_kernel_distribution(w[0]), st.fit_kernel_distribution(w[1])
        kl = st.kl_divergence(a, b)
        negatives += kl < 0
        smallest = min(smallest, kl)
    ok = closed_ok and mc_ok and negatives == 0
    acceptance("3", ok, f"1-D KL {exact!r} (eps-regularized {reg!r}, |diff| <= 0.5*eps), "
                        f"Monte-Carlo max |z| {worst_z:.2f} (<= 3), {negatives} negative of 10000 (min {smallest:.2e})")
    assert ok


def test_4_energy_brute_force(acceptance):
    rng = np.random.default_rng(4)
    mismatches, checked = 0, 0
    for D in range(1, 17):
        rows, cols, w, lin = random_graph_arrays(D, rng)
        g = make_graph(D, rows, cols, w, lin)
        oracle = ExactDenseEnergy(D, rows, cols, w, lin)
        states = all_states(D) if D <= 12 else rng.integers(0, 2, (10_000, D)).astype(np.uint8)
        got = energies(g, states)
        for s, e in zip(states.tolist(), got.tolist()):
            mismatches += e != oracle(s)
            checked += 1
    worst_ones = 0.0
    for seed in range(5):
        net = init_network(toy_spec(), seed)
        x = np.random.default_rng(seed).random((50, 1, 16, 16))
        g = build_graph(net.registry, gather_stats(net, x))
        worst_ones = max(worst_ones, abs(energy(g, np.ones(net.D, dtype=np.uint8))))
    for D in range(1, 17):
        g = make_graph(D, *random_graph_arrays(D, rng))
        worst_ones = max(worst_ones, abs(energy(g, np.ones(D, dtype=np.uint8))))
    ok = mismatches == 0 and worst_ones <= 1e-9
    acceptance("4", ok, f"{mismatches} mismatches of {checked} states (exact equality), "
                        f"max |energy(all-ones)| {worst_ones:.1e} (<= 1e-9)")
    assert ok


def test_5_de_ground_state(acceptance):
    t0 = time.perf_counter()
    hits = []
    cfg = TrainConfig()
    for seed in range(10):
        g = make_graph(12, *random_graph_arrays(12, np.random.default_rng(1000 + seed)))
        spectrum = np.sort(energies(g, all_states(12)))
        cutoff = spectrum[math.ceil(0.01 * spectrum.size) - 1]
        pop = score(init_population(cfg.pop_size, 12, np.random.default_rng(seed)), g)
        rngs = row_streams(seed, cfg.pop_size)
        for _ in range(500):
            evolve_step(pop, g, cfg.mutation_factor, cfg.crossover, rngs)
        hits.append(pop.energies.min() <= cutoff)
    elapsed = time.perf_counter() - t0
    ok = sum(hits) >= 9 and elapsed < 60
    acceptance("5", ok, f"{sum(hits)}/10 runs in the lowest 1% of the spectrum (>= 9), {elapsed:.1f}s (< 60s)")
    assert ok


def test_6_selection_monotone(acceptance):
    violations, spread_violations, runs = 0, 0, 0
    graphs = [make_graph(16, *random_graph_arrays(16, np.random.default_rng(s))) for s in range(5)]
    net = init_network(toy_spec(), 0)
    graphs.append(build_graph(net.registry, gather_stats(net, np.random.default_rng(0).random((50, 1, 16, 16)))))
    for gi, g in enumerate(graphs):
        for seed in range(4):
            pop = score(init_population(8, g.D, np.random.default_rng(seed)), g)
            rngs = row_streams(100 * gi + seed, 8)
            for _ in range(200):
                before = pop.energies.copy()
                evolve_step(pop, g, 0.5, 0.5, rngs)
                violations += int(np.sum(pop.energies > before))
                d = state_spread(pop)
                spread_violations += d > 0 or (np.all(pop.energies == pop.energies[0]) and d != 0.0)
            runs += 1
    consensus = score(init_population(8, 16, np.random.default_rng(0)), graphs[0])
    consensus.states[:] = consensus.states[0]
    consensus_zero = state_spread(score(consensus, graphs[0])) == 0.0
    ok = violations == 0 and spread_violations == 0 and consensus_zero
    acceptance("6", ok, f"{violations} row increases over {runs} runs x 200 iterations, "
                        f"{spread_violations} spread violations, spread at consensus == 0: {consensus_zero}")
    assert ok


def test_7_mask_integrity(acceptance):
    spec = toy_spec()
    changed, worst = 0, 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        net = init_network(spec, seed)
        mask = rng.integers(0, 2, net.D).astype(np.uint8)
        for sl in net.registry.layer_slices.values():
            mask[sl.start + int(rng.integers(0, sl.stop - sl.start))] = 1
        activity = param_activity(spec, mask)
        opt = make_optimizer(net, TrainConfig())
        for _ in range(3):
            before = [p.data.copy() for p in net.params]
            masked_step(net, opt, rng.random((20, 1, 16, 16)), rng.integers(0, 4, 20), mask, lambda s: activity)
            for b, p, act in zip(before, net.params, activity):
                changed += b[~act].tobytes() != p.data[~act].tobytes()
        x = rng.random((100, 1, 16, 16))
        diff = np.abs(predict(materialize_pruned(net, mask), x) - predict(apply_mask(net, mask), x)).max()
        worst = max(worst, float(diff))
    ok = changed == 0 and worst <= 1e-10
    acceptance("7", ok, f"{changed} dropped-weight tensors changed, max materialized logit diff {worst:.1e} (<= 1e-10)")
    assert ok


@pytest.fixture(scope="module")
def desk_runs():
    t0 = time.perf_counter()
    rows = []
    for seed in range(5):
        cfg = TrainConfig(seed=seed)
        train, test = load_datasets(cfg)
        spec = toy_spec(train.image_shape, train.classes)
        net, mask, _ = run_ipruning(cfg, init_network(spec, seed), train)
        pruned = final_metrics(net, mask, train, test)
        base = train_baseline(init_network(spec, seed), cfg, train)
        full = final_metrics(base, np.ones(base.D, dtype=np.uint8), train, test)
        rows.append({"R": pruned["P"]["R"], "F": pruned["F"]["top1"], "P": pruned["P"]["top1"],
                     "base": full["F"]["top1"]})
    return rows, time.perf_counter() - t0


def _mean(rows, key):
    return float(np.mean([r[key] for r in rows]))


def test_8a_kept_rate(desk_runs, acceptance):
    rows, elapsed = desk_runs
    R = _mean(rows, "R")
    ok = 0.35 <= R <= 0.65
    per_seed = ", ".join(f"{r['R']:.3f}" for r in rows)
    acceptance("8a", ok, f"mean kept rate R {R:.3f} in [0.35, 0.65] (per seed: {per_seed})")
    assert ok


def test_8b_pruned_accuracy(desk_runs, acceptance):
    rows, _ = desk_runs
    P, base = _mean(rows, "P"), _mean(rows, "base")
    ok = base - P <= 0.10
    acceptance("8b", ok, f"mean (P) top-1 {P:.3f} vs baseline {base:.3f}, drop {base - P:.3f} (<= 0.10)")
    assert ok


def test_8c_full_vs_pruned_gap(desk_runs, acceptance):
    rows, _ = desk_runs
    F, P = _mean(rows, "F"), _mean(rows, "P")
    ok = abs(F - P) <= 0.02
    acceptance("8c", ok, f"mean (F) top-1 {F:.3f} vs (P) {P:.3f}, gap {abs(F - P):.3f} (<= 0.02)")
    assert ok


def test_8d_runtime(desk_runs, acceptance):
    _, elapsed = desk_runs
    ok = elapsed < 600
    acceptance("8d", ok, f"5 runs plus baselines took {elapsed:.1f}s (< 600s)")
    assert ok


def test_9_reproducible(tmp_path, monkeypatch, acceptance):
    argv = ["train", "--epochs", "2", "--seed", "11", "--set", "samples_per_class=100", "--out", "run"]
    blobs = []
    for name in ("a", "b"):
        (tmp_path / name).mkdir()
        monkeypatch.chdir(tmp_path / name)
        assert main(argv) == 0
        blobs.append({f: (tmp_path / name / "run" / f).read_bytes() for f in ("report.json", "curves.csv")})
    monkeypatch.chdir(os.path.dirname(__file__))
    same = {f: blobs[0][f] == blobs[1][f] for f in blobs[0]}
    ok = all(same.values())
    acceptance("9", ok, "byte-identical: " + ", ".join(f"{f}={v}" for f, v in same.items()))
    assert ok
