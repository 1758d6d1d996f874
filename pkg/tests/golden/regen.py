"""Regenerate golden regression values. Run only after an intentional behaviour change."""

import json
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent))

from subnetsearch import search  # noqa: E402
from subnetsearch.cli import shipped_checkpoint, shipped_corpus  # noqa: E402
from subnetsearch.data import load_text, sample_eval_set  # noqa: E402
from subnetsearch.extract import load_model  # noqa: E402
from subnetsearch.importance import random_genome  # noqa: E402
from subnetsearch.model import perplexity  # noqa: E402

HERE = Path(__file__).parent
GOLDEN_SEARCH = dict(population=20, n_mutation=10, n_crossover=6, elites=4, generations=5, calib_samples=32)


def main():
    config, w, _ = load_model(shipped_checkpoint())
    train, _ = load_text(shipped_corpus()).split()
    ev = sample_eval_set(train)
    g = random_genome(config, 0.8, np.random.default_rng(123))
    values = {
        "dense_perplexity": perplexity(w, config, ev),
        "fixed_genome_fingerprint": g.fingerprint(),
        "fixed_genome_fitness": perplexity(w, config, ev, g),
    }
    (HERE / "values.json").write_text(json.dumps(values, indent=1, sort_keys=True) + "\n")
    res = search.run_search(w, config, train, search.SearchConfig(**GOLDEN_SEARCH))
    (HERE / "search_5gen.jsonl").write_text(res.log.to_jsonl())


if __name__ == "__main__":
    main()
