from pathlib import Path

import numpy as np
import pytest

from subnetsearch.cli import shipped_checkpoint, shipped_corpus
from subnetsearch.data import load_text, sample_calibration
from subnetsearch.extract import load_model
from subnetsearch.model import ModelConfig, capture_grams, init_weights

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture(scope="session")
def toy():
    """Shipped checkpoint: (config, weights)."""
    config, weights, _ = load_model(shipped_checkpoint())
    return config, weights


@pytest.fixture(scope="session")
def corpus_split():
    return load_text(shipped_corpus()).split()


@pytest.fixture(scope="session")
def toy_grams(toy, corpus_split):
    config, weights = toy
    return capture_grams(weights, config, sample_calibration(corpus_split[0], 32, 128, 0))


@pytest.fixture(scope="session")
def small():
    """Tiny random model for fast structural tests."""
    config = ModelConfig(depth=2, d_model=16, n_heads=2, head_dim=8, d_mlp=24, max_seq_len=16)
    return config, init_weights(config, seed=3, std=0.2)


@pytest.fixture(scope="session")
def small_rotary():
    config = ModelConfig(depth=2, d_model=16, n_heads=2, head_dim=8, d_mlp=24, max_seq_len=16,
                         positional_mode="rotary")
    return config, init_weights(config, seed=4, std=0.2)


def random_tokens(config, shape, seed=0):
    return np.random.default_rng(seed).integers(0, config.vocab_size, size=shape)


def fuzz_genome(config, rng, drop_p=0.25, min_ratio=0.1):
    """Random valid genome: per-head and MLP keep-sets at random sizes, random dropped blocks."""
    from subnetsearch.genome import BlockGenome, Genome, expand_units

    unit = config.head_unit
    units = config.head_dim // unit
    blocks = []
    for _ in range(config.depth):
        heads = np.zeros((config.n_heads, config.head_dim), dtype=bool)
        ratios = []
        for h in range(config.n_heads):
            k = int(rng.integers(max(1, int(min_ratio * units)), units + 1))
            u = np.zeros(units, dtype=bool)
            u[rng.choice(units, k, replace=False)] = True
            heads[h] = expand_units(u, unit)
            ratios.append(k / units)
        km = int(rng.integers(max(1, int(min_ratio * config.d_mlp)), config.d_mlp + 1))
        mlp = np.zeros(config.d_mlp, dtype=bool)
        mlp[rng.choice(config.d_mlp, km, replace=False)] = True
        blocks.append(BlockGenome(bool(rng.random() >= drop_p), heads, mlp, tuple(ratios), km / config.d_mlp))
    if not any(b.kept for b in blocks):
        blocks[0].kept = True
    return Genome(blocks, config.fingerprint(), unit, {})


_ACCEPTANCE: list[tuple[int, str, bool, str]] = []


@pytest.fixture
def criterion():
    """record(number, name, passed, detail) -> passed; printed once per criterion in the summary."""

    def record(number, name, passed, detail=""):
        _ACCEPTANCE.append((number, name, bool(passed), detail))
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {name}: {detail}")
