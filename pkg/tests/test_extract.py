import numpy as np
import pytest

from subnetsearch import container
from subnetsearch.extract import (BYTES_PER_WEIGHT, EmptyHead, bench_forward, dense_forward, dense_perplexity,
                                  equivalence_check, extract_dense, load_dense, load_model, save_dense, save_model)
from subnetsearch.genome import identity_genome
from subnetsearch.model import block_param_count, param_count, perplexity, unsearched_param_count

from conftest import fuzz_genome, random_tokens


def test_identity_extraction_exact(small, small_rotary):
    for config, w in (small, small_rotary):
        d = extract_dense(w, config, identity_genome(config))
        assert d.depth == config.depth
        for b, src in zip(d.blocks, w.blocks):
            for n in ("wq", "wk", "wv", "wo", "wu", "wg", "wd"):
                np.testing.assert_array_equal(getattr(b.weights, n), getattr(src, n))
        probes = random_tokens(config, (3, 10))
        assert equivalence_check(w, config, identity_genome(config), d, probes).max_abs_diff == 0.0
        assert d.weight_bytes() == BYTES_PER_WEIGHT * (param_count(config) + unsearched_param_count(config))


def test_gather_semantics(small):
    config, w = small
    g = fuzz_genome(config, np.random.default_rng(1), drop_p=0.0)
    d = extract_dense(w, config, g)
    for b, bg, src in zip(d.blocks, g.blocks, w.blocks):
        rows = np.flatnonzero(bg.attn_mask)
        cols = np.flatnonzero(bg.mlp_mask)
        assert b.weights.wq.shape == (rows.size, config.d_model) and b.weights.wo.shape == (config.d_model, rows.size)
        assert b.weights.wu.shape == (cols.size, config.d_model) and b.weights.wd.shape == (config.d_model, cols.size)
        for r_new, r_old in enumerate(rows):
            np.testing.assert_array_equal(b.weights.wk[r_new], src.wk[r_old])
            np.testing.assert_array_equal(b.weights.wo[:, r_new], src.wo[:, r_old])
        for c_new, c_old in enumerate(cols):
            np.testing.assert_array_equal(b.weights.wg[c_new], src.wg[c_old])
            np.testing.assert_array_equal(b.weights.wd[:, c_new], src.wd[:, c_old])
    assert d.kept_index_table()[0]["mlp"] == np.flatnonzero(g.blocks[0].mlp_mask).tolist()


def test_dropped_blocks_removed(small):
    config, w = small
    g = identity_genome(config)
    g.blocks[1].kept = False
    d = extract_dense(w, config, g)
    assert d.depth == 1 and d.blocks[0].source_block == 0


def test_empty_head_rejected(small):
    config, w = small
    g = identity_genome(config)
    g.blocks[0].head_masks[1] = False
    with pytest.raises(EmptyHead):
        extract_dense(w, config, g)


def test_equivalence_fuzzed(small, small_rotary):
    rng = np.random.default_rng(7)
    for i in range(10):
        config, w = (small, small_rotary)[i % 2]
        g = fuzz_genome(config, rng)
        d = extract_dense(w, config, g)
        probes = random_tokens(config, (4, 12), i)
        assert equivalence_check(w, config, g, d, probes, tol=1e-4).passed
        assert equivalence_check(w, config, g, d, probes, tol=1e-10, dtype=np.float64).passed


def test_dense_perplexity_matches_masked(small):
    config, w = small
    g = fuzz_genome(config, np.random.default_rng(2))
    X = random_tokens(config, (3, 12), 3)
    d = extract_dense(w, config, g)
    assert dense_perplexity(d, X, np.float64) == pytest.approx(perplexity(w, config, X, g, np.float64), rel=1e-12)


def test_containers_round_trip(tmp_path, small_rotary):
    config, w = small_rotary
    save_model(tmp_path / "m.sdm", config, w, {"note": "x"})
    c2, w2, meta = load_model(tmp_path / "m.sdm")
    assert c2 == config and meta["note"] == "x"
    for k, v in w.to_tensors().items():
        np.testing.assert_array_equal(w2.to_tensors()[k], v)
    g = fuzz_genome(config, np.random.default_rng(5))
    d = extract_dense(w, config, g)
    save_dense(tmp_path / "d.sdm", d)
    d2, meta = load_dense(tmp_path / "d.sdm")
    x = random_tokens(config, (2, 9))
    np.testing.assert_array_equal(dense_forward(d2, x), dense_forward(d, x))
    assert meta["kept_index"] == d.kept_index_table()
    with pytest.raises(container.ManifestMismatch):
        load_model(tmp_path / "d.sdm")
    with pytest.raises(container.ManifestMismatch):
        load_dense(tmp_path / "m.sdm")


def test_bench_weight_bytes(small):
    config, w = small
    g = identity_genome(config)
    for b in g.blocks:
        b.mlp_mask[config.d_mlp // 2:] = False
        for h in range(config.n_heads):
            b.head_masks[h, config.head_dim // 2:] = False
    d = extract_dense(w, config, g)
    full = extract_dense(w, config)
    expected = config.depth * block_param_count(config, config.attn_dim // 2, config.d_mlp // 2)
    assert d.block_weight_bytes() == BYTES_PER_WEIGHT * expected
    r = bench_forward(d, (2, 8), repetitions=2)
    assert r.tokens_per_second > 0 and r.weight_bytes == d.weight_bytes()
    assert bench_forward(full, (2, 8), 2).weight_bytes == full.weight_bytes()
