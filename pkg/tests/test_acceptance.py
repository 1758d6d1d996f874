"""The twelve acceptance criteria, each at its stated tolerance.

A PASS/FAIL line per criterion is printed in the pytest terminal summary.
"""

import itertools
import json
import time

import numpy as np
import pytest

from subnetsearch import search
from subnetsearch.data import heldout_windows, sample_calibration
from subnetsearch.extract import bench_forward, equivalence_check, extract_dense
from subnetsearch.genome import identity_genome, keep_count, mutate_mask, similarity_threshold
from subnetsearch.importance import element_importance, init_genome
from subnetsearch.model import capture_grams, param_count
from subnetsearch.plot import plot_convergence
from subnetsearch.reform import (ReformProblem, admm_reform, exact_column_ls_oracle, heldout_objective,
                                 reform_objective, truncate_columns)

from conftest import fuzz_genome, random_tokens
from test_importance import removal_error
from test_model import brute_force_count

pytestmark = pytest.mark.acceptance


def _admm_instances():
    out = []
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        W, X = rng.normal(size=(32, 32)), rng.normal(size=(32, 256))
        kept = np.sort(rng.choice(32, 16, replace=False))
        out.append((W, X, kept))
    return out


@pytest.fixture(scope="module")
def admm_runs():
    t0 = time.perf_counter()
    runs = []
    for W, X, kept in _admm_instances():
        G = X @ X.T / X.shape[1]  # per-token second moment, the scale rho = 1 refers to
        res = admm_reform(ReformProblem.for_columns(W, G, kept, rho=1.0, iters=30))
        raw = X @ X.T
        runs.append({
            "admm": reform_objective(res.W_hat, W, raw),
            "oracle": reform_objective(exact_column_ls_oracle(W, X, kept), W, raw),
            "trunc": reform_objective(truncate_columns(W, kept), W, raw),
        })
    return runs, time.perf_counter() - t0


def test_c01_admm_vs_oracle(admm_runs, criterion):
    runs, elapsed = admm_runs
    gaps = [(r["admm"] - r["oracle"]) / r["oracle"] for r in runs]
    ok = max(gaps) <= 1e-3 and elapsed < 5.0
    assert criterion(1, "ADMM-vs-oracle", ok, f"max relative gap {max(gaps):.2e}, runtime {elapsed:.2f}s")


def test_c02_reformation_dominates_truncation(admm_runs, criterion):
    runs, _ = admm_runs
    never_worse = all(r["admm"] <= r["trunc"] + 1e-9 for r in runs)
    strict = sum(r["admm"] < r["trunc"] for r in runs)
    assert criterion(2, "reformation dominates truncation", never_worse and strict >= 19,
                     f"never worse: {never_worse}, strictly lower on {strict}/20")


def test_c03_admm_fixed_points(criterion):
    rng = np.random.default_rng(3)
    W, X = rng.normal(size=(32, 32)), rng.normal(size=(32, 256))
    G = X @ X.T / 256
    p = ReformProblem(W, G, np.zeros(W.shape, bool))
    # replay every iterate: with nothing pruned the primal never leaves W
    from subnetsearch.numerics import spd_factor

    factor = spd_factor(p.G + np.eye(32))
    Z, U, drift = W.copy(), np.zeros_like(W), 0.0
    for _ in range(30):
        Wh = factor.solve(G @ W.T + (Z - U).T).T
        Z = Wh + U
        U = U + Wh - Z
        drift = max(drift, np.abs(Wh - W).max())
    res = admm_reform(p)
    zero = admm_reform(ReformProblem(W, G, np.ones(W.shape, bool)))
    ok = drift < 1e-12 and np.abs(res.W_hat - W).max() < 1e-12 and not zero.W_hat.any()
    assert criterion(3, "ADMM fixed points", ok,
                     f"M=0 max drift {drift:.1e}; M=1 output all zero: {not zero.W_hat.any()}")


def test_c04_importance_oracle(criterion):
    worst, rank_ok = 0.0, True
    for seed in range(20):
        rng = np.random.default_rng(2000 + seed)
        W, X = rng.normal(size=(16, 16)), rng.normal(size=(16, 48))
        phi = element_importance(W, X @ X.T, damping=0.0)
        brute = np.array([[removal_error(W, X, i, j) for j in range(16)] for i in range(16)])
        worst = max(worst, float(np.max(np.abs(phi - 2 * brute) / (2 * brute))))
        # ranking agreement up to ties: sorted by phi, brute errors must be non-decreasing
        b = brute.ravel()[np.argsort(phi.ravel(), kind="stable")]
        rank_ok &= bool(np.all(np.diff(b) >= -1e-9 * np.abs(b[1:])))
    assert criterion(4, "importance oracle", worst <= 1e-6 and rank_ok,
                     f"max relative error vs 2x removal {worst:.1e}, rankings agree: {rank_ok}")


def test_c05_mask_mutation(criterion):
    combos = list(itertools.product([0.25, 0.5, 0.8, 1.0], [0.5, 0.8, 0.95]))
    p_m, eta = 0.3, 1000
    bad_pop = bad_sim = bad_exhaust = 0
    matched = exits = exhausted = 0
    for t in range(10_000):
        gamma, alpha = combos[t % len(combos)]
        rng = np.random.default_rng([5, t])
        n = int(rng.integers(4, 65))
        k = keep_count(gamma, n)
        k1 = k if rng.random() < 0.5 else int(rng.integers(1, n + 1))
        S = np.zeros(n, dtype=bool)
        S[rng.choice(n, k1, replace=False)] = True
        res = mutate_mask(S, p_m, gamma, alpha, eta, rng)
        if k1 == k:
            matched += 1
            exits += res.outcome == "kept"
        if res.outcome == "mutated":
            bad_pop += int(res.mask.sum()) != k
            bad_sim += int((res.mask & S).sum()) < similarity_threshold(alpha, n, k)
        elif res.outcome == "exhausted":
            exhausted += 1
            bad_exhaust += not np.array_equal(res.mask, S)
    freq = exits / matched
    ok = bad_pop == 0 and bad_sim == 0 and bad_exhaust == 0 and abs(freq - (1 - p_m)) <= 0.03
    assert criterion(5, "mask mutation", ok,
                     f"popcount/similarity/exhaustion violations {bad_pop}/{bad_sim}/{bad_exhaust}, "
                     f"{exhausted} exhaustions, early exit {freq:.3f} vs {1 - p_m:.2f}")


def test_c06_extraction_equivalence(toy, criterion):
    config, w = toy
    rng = np.random.default_rng(6)
    probes = random_tokens(config, (4, 64), 6)
    worst32 = worst64 = 0.0
    for _ in range(50):
        g = fuzz_genome(config, rng)
        d = extract_dense(w, config, g)
        worst32 = max(worst32, equivalence_check(w, config, g, d, probes).max_abs_diff)
        worst64 = max(worst64, equivalence_check(w, config, g, d, probes, dtype=np.float64).max_abs_diff)
    ident = identity_genome(config)
    zero = equivalence_check(w, config, ident, extract_dense(w, config, ident), probes).max_abs_diff
    ok = worst32 <= 1e-4 and worst64 <= 1e-10 and zero == 0.0
    assert criterion(6, "extraction equivalence", ok,
                     f"max diff f32 {worst32:.1e}, f64 {worst64:.1e}, identity {zero}")


@pytest.fixture(scope="module")
def searches(toy, corpus_split):
    config, w = toy
    train = corpus_split[0]
    out = {}
    for mode in ("importance", "random"):
        t0 = time.perf_counter()
        res = search.run_search(w, config, train, search.SearchConfig(init=mode))
        out[mode] = (res, time.perf_counter() - t0)
    return out


def test_c07_search_monotone_and_beneficial(searches, criterion):
    res, elapsed = searches["importance"]
    curve = res.log.best_curve()
    ok = (len(curve) == 51 and search.is_non_increasing(curve) and res.best.fitness <= res.init.fitness
          and elapsed < 30 * 60)
    assert criterion(7, "search monotonicity and benefit", ok,
                     f"best {res.best.fitness:.4f} vs init {res.init.fitness:.4f}, "
                     f"non-increasing {search.is_non_increasing(curve)}, {elapsed / 60:.1f} min")


def _dominates_after_10(no_init, with_init):
    return all(n >= w for n, w in zip(no_init[10:], with_init[10:]))


def test_c08_initialization_ablation(searches, toy, corpus_split, tmp_path, criterion):
    with_init = searches["importance"][0].log.best_curve()
    no_init = searches["random"][0].log.best_curve()
    data = {"with_init": with_init, "no_init": no_init}
    (tmp_path / "init_ablation.json").write_text(json.dumps(data))
    plot_convergence({"with init": with_init, "without init": no_init}, tmp_path / "init_ablation.png")
    emitted = (tmp_path / "init_ablation.png").stat().st_size > 0
    if _dominates_after_10(no_init, with_init):
        detail = "no-init >= with-init at every generation from 10 on (shipped seed)"
        ok = emitted
    else:
        # downgraded form: majority ordering over a 5-seed sweep
        config, w = toy
        wins = 0
        for seed in range(1, 6):
            a = search.run_search(w, config, corpus_split[0], search.SearchConfig(seed=seed)).log.best_curve()
            b = search.run_search(w, config, corpus_split[0],
                                  search.SearchConfig(seed=seed, init="random")).log.best_curve()
            wins += _dominates_after_10(b, a)
        detail = f"shipped seed fails; 5-seed sweep ordering holds on {wins}/5"
        ok = emitted and wins >= 3
    assert criterion(8, "initialization ablation", ok, detail)


def test_c09_budget_compliance(searches, toy, criterion):
    config, _ = toy
    budget = search.Budget(0.8, 0.02)
    lo, hi = budget.window(config)
    counts = [c for mode in searches for row in searches[mode][0].log.rows for c in row["elite_param_counts"]]
    in_window = all(lo <= c <= hi for c in counts)
    rng = np.random.default_rng(9)
    agree = all(param_count(config, g) == brute_force_count(config, g)
                for g in (fuzz_genome(config, rng) for _ in range(100)))
    assert criterion(9, "budget compliance", in_window and agree,
                     f"{len(counts)} elites within [{lo:.0f}, {hi:.0f}]: {in_window}; brute-force agreement: {agree}")


def test_c10_speed_memory_trend(toy, toy_grams, criterion):
    config, w = toy
    g = init_genome(w, config, toy_grams, 0.5)
    full, half = extract_dense(w, config), extract_dense(w, config, g)
    ratio = half.block_weight_bytes() / full.block_weight_bytes()
    D = config.d_model
    # one attention unit per head, one MLP unit and the two norm gains, per block
    slot = config.depth * (config.n_heads * config.head_unit * 4 * D + 3 * D + 2 * D)
    gran = slot / param_count(config)
    speedups = []
    for _ in range(3):
        a, b = bench_forward(full, (8, 128), 7), bench_forward(half, (8, 128), 7)
        speedups.append(b.tokens_per_second / a.tokens_per_second)
    speedup = float(np.median(speedups))
    ok = abs(ratio - 0.5) <= gran and speedup >= 1.2
    assert criterion(10, "speed/memory trend", ok,
                     f"block bytes ratio {ratio:.4f} (granularity {gran:.4f}), throughput x{speedup:.2f}")


def test_c11_reformation_sample_ablation(toy, corpus_split, criterion):
    from subnetsearch.reform import reform_subnet

    config, w = toy
    train, held = corpus_split
    held_grams = capture_grams(w, config, heldout_windows(held, 128))
    grams = {n: capture_grams(w, config, sample_calibration(train, n, 128, 0)) for n in (128, 512, 1024)}
    g = init_genome(w, config, grams[128], 0.8)
    obj = {n: heldout_objective(w, reform_subnet(w, config, g, gr)[0], g, held_grams) for n, gr in grams.items()}
    diffs = [abs(obj[a] - obj[b]) / min(obj[a], obj[b]) for a, b in itertools.combinations(obj, 2)]
    assert criterion(11, "reformation sample ablation", max(diffs) < 0.05,
                     "held-out objectives " + ", ".join(f"{n}: {v:.4f}" for n, v in obj.items())
                     + f"; max pairwise difference {max(diffs):.2%}")


def test_c12_determinism(tmp_path, criterion):
    from test_cli import SMALL, artifact_bytes, run_pipeline

    from subnetsearch.cli import main

    a, b = tmp_path / "a", tmp_path / "b"
    run_pipeline(a)
    run_pipeline(b, extra=("--workers", "3"))
    train = ["train", "--train.steps=2", "--train.batch=2", "--model.depth=1", "--model.max_seq_len=32"]
    for out in (a, b):
        assert main(["--out", str(out), *train]) == 0
    fa, fb = artifact_bytes(a), artifact_bytes(b)
    same = fa.keys() == fb.keys() and all(fa[k] == fb[k] for k in fa)
    assert criterion(12, "determinism", same,
                     f"{len(fa)} artifacts byte-identical across reruns with 1 and 3 workers: {same}")
