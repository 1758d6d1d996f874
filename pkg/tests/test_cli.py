import json
import shutil

import numpy as np
import pytest

from subnetsearch import container
from subnetsearch.cli import EXIT_ARTIFACT, EXIT_CONFIG, OUT_ENV, ConfigError, RunConfig, main

SMALL = ["--search.generations=1", "--search.population=10", "--search.n_mutation=5", "--search.n_crossover=3",
         "--search.elites=3", "--calibrate.n=16", "--ablate.samples=[16,32]", "--ablate.ratios=[1.0,0.6]",
         "--ablate.iters=5", "--eval.max_windows=6"]
STAGES = ["calibrate", "init", "search", "reform", "extract", "eval", "ablate", "plot"]


def run(out, *args):
    return main(["--out", str(out), *args, *SMALL])


def run_pipeline(out, extra=()):
    for stage in STAGES:
        assert main(["--out", str(out), *extra, stage, *SMALL]) == 0, stage
    assert main(["--out", str(out), *extra, "search", "--ablate-no-init", *SMALL]) == 0


def artifact_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    run_pipeline(out)
    return out


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError, match="search.nope"):
        RunConfig.load(None, [("search.nope", 1)])
    with pytest.raises(ConfigError, match="search"):
        RunConfig.load(None, [("search.elites", 500)])
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"search": {"generations": 3}, "budget": {"target": 0.7}}))
    rc = RunConfig.load(str(cfg))
    assert rc.search_config().generations == 3 and rc.search_config().target == 0.7
    assert RunConfig().search_config() == RunConfig.load(None).search_config()


def test_missing_corpus_names_field(tmp_path, capsys):
    code = main(["--out", str(tmp_path), "train", f"--corpus.path={tmp_path / 'nope.txt'}"])
    assert code == EXIT_CONFIG
    assert "corpus.path" in capsys.readouterr().err


def test_train_smoke_and_determinism(tmp_path, capsys):
    args = ["train", "--train.steps=3", "--train.batch=2", "--model.depth=1", "--model.d_model=16",
            "--model.n_heads=2", "--model.head_dim=8", "--model.d_mlp=16", "--model.max_seq_len=32"]
    assert main(["--out", str(tmp_path / "a"), *args]) == 0
    assert "final loss" in capsys.readouterr().out
    assert main(["--out", str(tmp_path / "b"), *args]) == 0
    a, b = (tmp_path / "a" / "model.sdm").read_bytes(), (tmp_path / "b" / "model.sdm").read_bytes()
    assert a == b
    tensors, meta = container.load_tensors(tmp_path / "a" / "model.sdm")
    assert meta["kind"] == "model" and "blocks.0.wq" in tensors
    # downstream stages can use the trained checkpoint
    assert main(["--out", str(tmp_path / "a"), "calibrate", "--checkpoint=trained", "--calibrate.n=2",
                 "--calibrate.seq_len=16"]) == 0


def test_env_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "envout"))
    assert main(["calibrate", "--calibrate.n=2"]) == 0
    assert (tmp_path / "envout" / "grams.sdm").is_file()


def test_stage_order_enforced(tmp_path):
    assert run(tmp_path, "reform") == EXIT_ARTIFACT
    assert run(tmp_path, "calibrate") == 0
    assert run(tmp_path, "init") == 0
    assert run(tmp_path, "search") == 0
    assert run(tmp_path, "extract") == EXIT_ARTIFACT  # no reform record yet
    assert run(tmp_path, "reform", "--skip") == 0
    assert run(tmp_path, "extract") == 0
    rec = json.loads((tmp_path / "dense.sdm.prov.json").read_text())
    assert rec["inputs"]["reform"]["path"] == "reform.json"


def test_pipeline_artifacts(pipeline, capsys):
    for name in ("grams.sdm", "init.genome.json", "search.genome.json", "search.log.jsonl", "search.curve.json",
                 "noinit.curve.json", "reformed.sdm", "reform.json", "dense.sdm", "eval.json", "ablate.json",
                 "plots/convergence.png", "plots/sensitivity.png", "plots/reform_samples.png",
                 "plots/steps_rho.png"):
        assert (pipeline / name).is_file(), name
        assert (pipeline / (name + ".prov.json")).is_file(), name
    ev = json.loads((pipeline / "eval.json").read_text())
    assert set(ev["perplexity"]) == {"dense", "init-subnet", "searched-subnet", "reformed-subnet",
                                     "extracted-dense"}
    assert ev["equivalence_max_abs_diff"] <= 1e-4
    assert ev["perplexity"]["extracted-dense"] == pytest.approx(ev["perplexity"]["reformed-subnet"], rel=1e-5)
    prov = json.loads((pipeline / "search.genome.json.prov.json").read_text())
    assert set(prov) == {"artifact", "stage", "sha256", "inputs", "seed", "config_digest"}
    assert main(["--out", str(pipeline), "verify"]) == 0
    assert main(["--out", str(pipeline), "bench", "--bench.repetitions=2", "--bench.batch=2"]) == 0


def test_rerun_byte_identical_any_workers(pipeline, tmp_path):
    other = tmp_path / "again"
    run_pipeline(other, extra=("--workers", "2"))
    a, b = artifact_bytes(pipeline), artifact_bytes(other)
    skip = {"bench.json", "bench.json.prov.json"}
    assert {k for k in a if k not in skip} == set(b)
    for k in b:
        assert a[k] == b[k], k


def test_stale_and_corrupt_detection(pipeline, tmp_path):
    work = tmp_path / "w"
    shutil.copytree(pipeline, work)
    # recalibrating with another seed invalidates everything that consumed the old Grams
    assert main(["--out", str(work), "calibrate", *SMALL, "--calibrate.seed=5"]) == 0
    assert main(["--out", str(work), "reform", *SMALL]) == EXIT_ARTIFACT
    assert main(["--out", str(work), "verify"]) == EXIT_ARTIFACT
    work2 = tmp_path / "w2"
    shutil.copytree(pipeline, work2)
    g = work2 / "search.genome.json"
    g.write_text(g.read_text().replace('"kept": true', '"kept": false', 1))
    assert main(["--out", str(work2), "reform", *SMALL]) == EXIT_ARTIFACT
    assert main(["--out", str(work2), "eval", *SMALL]) == EXIT_ARTIFACT


def test_unknown_override_is_config_error(tmp_path):
    assert main(["--out", str(tmp_path), "calibrate", "--calibrate.bogus=1"]) == EXIT_CONFIG
