"""Pipeline driver: train -> calibrate -> init -> search -> reform -> extract -> eval/bench/ablate/plot.

Every stage reads named artifacts from the output directory and writes its
own, each with a ``<artifact>.prov.json`` record holding the sha256 of the
artifact and of every input, the seed and a digest of the config sections
the stage depends on. Configuration is one JSON file; any key can be
overridden on the command line as ``--section.key=value`` (value parsed as
JSON, falling back to a plain string).
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from dataclasses import fields
from importlib.resources import files
from pathlib import Path

import numpy as np

from . import container, search
from .data import CorpusError, heldout_windows, load_pretokenized, load_text, sample_calibration
from .extract import (bench_forward, dense_perplexity, equivalence_check, extract_dense, load_dense, load_model,
                      save_dense, save_model)
from .genome import Genome
from .importance import compute_scores, init_genome
from .model import GramSet, ModelConfig, capture_grams, param_count, perplexity
from .numerics import NotPositiveDefinite
from .reform import NonFiniteIterate, heldout_objective, reform_layer, reform_subnet

log = logging.getLogger("subnetsearch")

OUT_ENV = "SUBNETSEARCH_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_ARTIFACT, EXIT_NUMERIC = 0, 2, 3, 4

_SEARCH_OWN = [f.name for f in fields(search.SearchConfig)
               if f.name not in ("target", "tolerance", "scope", "calib_samples", "calib_seed", "seq_len")]

DEFAULTS = {
    "model": ModelConfig().to_dict(),
    "checkpoint": "shipped",
    "corpus": {"path": None, "heldout_fraction": 0.1},
    "train": {"steps": 1000, "batch": 16, "lr": 3e-3, "seed": 0, "warmup": 20, "log_every": 50},
    "calibrate": {"n": 128, "seq_len": 128, "seed": 0},
    "budget": {"target": 0.8, "tolerance": 0.02, "scope": "blocks-only"},
    "search": {k: getattr(search.SearchConfig(), k) for k in _SEARCH_OWN},
    "reform": {"rho": 1.0, "iters": 30},
    "eval": {"seq_len": 128, "max_windows": 64},
    "bench": {"batch": 8, "seq_len": 128, "repetitions": 7, "seed": 0},
    "ablate": {"ratios": [1.0, 0.9, 0.8, 0.7, 0.6, 0.5], "samples": [128, 512, 1024],
               "rhos": [0.01, 0.1, 1.0, 10.0], "iters": 100},
    "output_dir": None,
}


class ConfigError(ValueError):
    pass


class MissingArtifact(FileNotFoundError):
    pass


class StaleArtifact(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"{dotted}: unknown config section {k!r}")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigError(f"{dotted}: unknown config key")
    node[keys[-1]] = value


def _merge(base: dict, update: dict, where: str = "") -> None:
    for k, v in update.items():
        name = f"{where}{k}"
        if k not in base:
            raise ConfigError(f"{name}: unknown config key")
        if isinstance(base[k], dict) and base[k] and isinstance(v, dict):
            _merge(base[k], v, name + ".")
        else:
            base[k] = v


class RunConfig:
    """Validated run configuration; construction fails fast on any bad field."""

    def __init__(self, doc: dict | None = None):
        self.doc = copy.deepcopy(DEFAULTS)
        if doc:
            _merge(self.doc, doc)
        self.validate()

    @classmethod
    def load(cls, path: str | None, overrides: list[tuple[str, object]] = ()) -> "RunConfig":
        doc = copy.deepcopy(DEFAULTS)
        if path:
            try:
                _merge(doc, json.loads(Path(path).read_text()))
            except FileNotFoundError:
                raise ConfigError(f"config file {path}: not found") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {path}: {exc}") from None
        for key, value in overrides:
            apply_override(doc, key, value)
        return cls(doc)

    def __getitem__(self, key):
        return self.doc[key]

    def _build(self, section, factory, **extra):
        try:
            return factory(**self.doc[section], **extra)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{section}: {exc}") from None

    def validate(self) -> None:
        self.model_config()
        self.search_config()
        self.train_settings()
        c = self.doc["calibrate"]
        if not (isinstance(c["n"], int) and c["n"] >= 1 and isinstance(c["seq_len"], int) and c["seq_len"] >= 2):
            raise ConfigError("calibrate: n must be >= 1 and seq_len >= 2")
        if self.doc["reform"]["rho"] <= 0 or self.doc["reform"]["iters"] < 1:
            raise ConfigError("reform: rho must be > 0 and iters >= 1")
        if not 0.0 < self.doc["corpus"]["heldout_fraction"] < 1.0:
            raise ConfigError("corpus.heldout_fraction: must lie in (0, 1)")
        path = self.doc["corpus"]["path"]
        if path is not None and not Path(path).is_file():
            raise ConfigError(f"corpus.path: no such file {path}")
        ck = self.doc["checkpoint"]
        if ck not in ("shipped", "trained") and not Path(ck).is_file():
            raise ConfigError(f"checkpoint: no such file {ck}")

    def model_config(self) -> ModelConfig:
        return self._build("model", ModelConfig)

    def search_config(self) -> search.SearchConfig:
        c = self.doc["calibrate"]
        return self._build("search", search.SearchConfig, **self.doc["budget"], calib_samples=c["n"],
                           calib_seed=c["seed"], seq_len=c["seq_len"])

    def train_settings(self):
        from .train import TrainSettings

        return self._build("train", TrainSettings)

    def digest(self, *sections) -> str:
        sub = {s: self.doc[s] for s in sections}
        if "search" in sub:
            # parallelism is not allowed to influence results, so it is not part of the digest
            sub["search"] = {k: v for k, v in sub["search"].items() if k != "workers"}
        return hashlib.sha256(json.dumps(sub, sort_keys=True).encode()).hexdigest()[:16]

    def output_dir(self, flag: str | None) -> Path:
        return Path(flag or self.doc["output_dir"] or os.environ.get(OUT_ENV) or "runs")


# ---------------------------------------------------------------------------
# artifacts and provenance


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _prov_path(path: Path) -> Path:
    return path.with_name(path.name + ".prov.json")


class Workspace:
    def __init__(self, root: Path, cfg: RunConfig):
        self.root = Path(root)
        self.cfg = cfg
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.root / name

    def record(self, name: str, stage: str, inputs: dict[str, Path], seed, sections) -> Path:
        out = self.path(name)
        prov = {
            "artifact": name,
            "stage": stage,
            "sha256": sha256_file(out),
            "inputs": {k: {"path": _display(p, self.root), "sha256": sha256_file(p)} for k, p in sorted(inputs.items())},
            "seed": seed,
            "config_digest": self.cfg.digest(*sections),
        }
        _prov_path(out).write_text(json.dumps(prov, indent=1, sort_keys=True) + "\n")
        return out

    def require(self, name: str, stage_hint: str) -> Path:
        p = self.path(name)
        if not p.is_file():
            raise MissingArtifact(f"{p} not found; run `subnetsearch {stage_hint}` first")
        check_provenance(p, self.root)
        return p


def _display(p: Path, root: Path) -> str:
    try:
        return str(Path(p).resolve().relative_to(root.resolve()))
    except ValueError:
        return str(p)


def _resolve_input(recorded: str, root: Path) -> Path:
    p = Path(recorded)
    return p if p.is_absolute() else root / p


def check_provenance(path: Path, root: Path, _seen: set | None = None) -> dict:
    """Artifact hash, then each input's hash, then (recursively) the inputs' own records."""
    seen = set() if _seen is None else _seen
    prov_file = _prov_path(path)
    if not prov_file.is_file():
        raise StaleArtifact(f"{path} has no provenance record")
    prov = json.loads(prov_file.read_text())
    if sha256_file(path) != prov["sha256"]:
        raise StaleArtifact(f"{path} changed after it was written")
    for key, entry in prov["inputs"].items():
        src = _resolve_input(entry["path"], root)
        if not src.is_file():
            raise MissingArtifact(f"{path}: input {key} ({src}) is gone")
        if sha256_file(src) != entry["sha256"]:
            raise StaleArtifact(f"{path}: input {key} ({src}) changed since it was consumed; rerun the stage")
        if _prov_path(src).is_file() and src.resolve() not in seen:
            seen.add(src.resolve())
            check_provenance(src, root, seen)
    return prov


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# shared loaders


def shipped_checkpoint() -> Path:
    return Path(str(files("subnetsearch") / "assets" / "toy_checkpoint.sdm"))


def shipped_corpus() -> Path:
    return Path(str(files("subnetsearch") / "assets" / "sample_corpus.txt"))


def corpus_path(cfg: RunConfig) -> Path:
    return Path(cfg["corpus"]["path"]) if cfg["corpus"]["path"] else shipped_corpus()


def load_corpus(cfg: RunConfig):
    p = corpus_path(cfg)
    with open(p, "rb") as fh:
        head = fh.read(4)
    corpus = load_pretokenized(p) if head == b"TOKS" else load_text(p)
    return corpus.split(cfg["corpus"]["heldout_fraction"])


def checkpoint_path(ws: Workspace) -> Path:
    ck = ws.cfg["checkpoint"]
    if ck == "shipped":
        return shipped_checkpoint()
    if ck == "trained":
        return ws.require("model.sdm", "train")
    return Path(ck)


def load_grams(path: Path, config: ModelConfig) -> GramSet:
    tensors, meta = container.load_tensors(path)
    return GramSet.from_tensors(tensors, config.depth, meta["tokens"])


def load_genome(path: Path) -> Genome:
    return Genome.from_json(path.read_text())


def _eval_windows(cfg: RunConfig, held):
    e = cfg["eval"]
    return heldout_windows(held, e["seq_len"], e["max_windows"])


# ---------------------------------------------------------------------------
# stages


def cmd_train(ws: Workspace, args) -> int:
    from .train import train_toy_lm

    cfg = ws.cfg
    config = cfg.model_config()
    settings = cfg.train_settings()
    train, _ = load_corpus(cfg)
    history: list[float] = []
    weights = train_toy_lm(config, train.ids, settings, history=history)
    save_model(ws.path("model.sdm"), config, weights, {"train": cfg["train"]})
    ws.record("model.sdm", "train", {"corpus": corpus_path(cfg)}, settings.seed, ("model", "train", "corpus"))
    final = float(np.mean(history[-20:])) if history else float("nan")
    print(f"final loss {final:.4f} ({settings.steps} steps) -> {ws.path('model.sdm')}")
    return EXIT_OK


def cmd_calibrate(ws: Workspace, args) -> int:
    cfg = ws.cfg
    ck = checkpoint_path(ws)
    config, weights, _ = load_model(ck)
    train, _ = load_corpus(cfg)
    c = cfg["calibrate"]
    calib = sample_calibration(train, c["n"], c["seq_len"], c["seed"])
    grams = capture_grams(weights, config, calib)
    container.save_tensors(ws.path("grams.sdm"), grams.to_tensors(),
                           {"kind": "grams", "tokens": grams.tokens, "starts": calib.starts.tolist(), **c})
    ws.record("grams.sdm", "calibrate", {"checkpoint": ck, "corpus": corpus_path(cfg)}, c["seed"],
              ("calibrate", "corpus"))
    print(f"captured Gram matrices over {grams.tokens} tokens -> {ws.path('grams.sdm')}")
    return EXIT_OK


def cmd_init(ws: Workspace, args) -> int:
    cfg = ws.cfg
    ck = checkpoint_path(ws)
    config, weights, _ = load_model(ck)
    gp = ws.require("grams.sdm", "calibrate")
    target = cfg["budget"]["target"]
    g = init_genome(weights, config, load_grams(gp, config), target)
    ws.path("init.genome.json").write_text(g.to_json())
    ws.record("init.genome.json", "init", {"checkpoint": ck, "grams": gp}, None, ("budget",))
    print(f"importance-initialized genome at ratio {target}: "
          f"{param_count(config, g)} / {param_count(config)} block parameters")
    return EXIT_OK


def _run_search_stage(ws: Workspace, prefix: str, init: Genome | None, inputs: dict, sc) -> search.SearchResult:
    cfg = ws.cfg
    ck = checkpoint_path(ws)
    config, weights, _ = load_model(ck)
    train, _ = load_corpus(cfg)
    res = search.run_search(weights, config, train, sc, init=init,
                            progress=lambda r: log.info("gen %d best %.4f", r["generation"], r["best_fitness"]))
    inputs = {"checkpoint": ck, "corpus": corpus_path(cfg), **inputs}
    sections = ("search", "budget", "calibrate", "corpus")
    ws.path(f"{prefix}.genome.json").write_text(res.best.genome.to_json())
    res.log.save(ws.path(f"{prefix}.log.jsonl"))
    _write_json(ws.path(f"{prefix}.curve.json"), {"label": prefix, "init_fitness": res.log.init_fitness,
                                                 "best_fitness": res.log.best_curve()})
    for name in (f"{prefix}.genome.json", f"{prefix}.log.jsonl", f"{prefix}.curve.json"):
        ws.record(name, "search", inputs, sc.seed, sections)
    return res


def cmd_search(ws: Workspace, args) -> int:
    sc = ws.cfg.search_config()
    if args.ablate_no_init:
        from dataclasses import replace

        res = _run_search_stage(ws, "noinit", None, {}, replace(sc, init="random"))
    else:
        ip = ws.require("init.genome.json", "init")
        res = _run_search_stage(ws, "search", load_genome(ip), {"init_genome": ip}, sc)
    print(f"best perplexity {res.best.fitness:.4f} (start {res.log.init_fitness:.4f}), "
          f"{res.forward_passes} forward passes, {len(res.log.rows) - 1} generations")
    return EXIT_OK


def cmd_reform(ws: Workspace, args) -> int:
    cfg = ws.cfg
    gen_p = ws.require("search.genome.json", "search")
    if args.skip:
        _write_json(ws.path("reform.json"), {"skipped": True})
        ws.record("reform.json", "reform", {"genome": gen_p}, None, ())
        print("reformation skipped; extraction will use truncated weights")
        return EXIT_OK
    ck = checkpoint_path(ws)
    config, weights, _ = load_model(ck)
    gp = ws.require("grams.sdm", "calibrate")
    r = cfg["reform"]
    reformed, reports = reform_subnet(weights, config, load_genome(gen_p), load_grams(gp, config),
                                      r["rho"], r["iters"])
    save_model(ws.path("reformed.sdm"), config, reformed, {"reform": r})
    doc = {"skipped": False, "rho": r["rho"], "iters": r["iters"], "layers": [x.to_dict() for x in reports]}
    _write_json(ws.path("reform.json"), doc)
    inputs = {"checkpoint": ck, "grams": gp, "genome": gen_p}
    ws.record("reformed.sdm", "reform", inputs, None, ("reform",))
    ws.record("reform.json", "reform", inputs, None, ("reform",))
    trunc = sum(x.truncation_objective for x in reports)
    obj = sum(x.reformed_objective for x in reports)
    print(f"reconstruction error: truncation {trunc:.6g} -> reformed {obj:.6g}")
    return EXIT_OK


def _reformed_source(ws: Workspace) -> tuple[Path, bool]:
    rp = ws.require("reform.json", "reform")
    skipped = json.loads(rp.read_text())["skipped"]
    if skipped:
        return checkpoint_path(ws), True
    return ws.require("reformed.sdm", "reform"), False


def cmd_extract(ws: Workspace, args) -> int:
    gen_p = ws.require("search.genome.json", "search")
    src, skipped = _reformed_source(ws)
    config, weights, _ = load_model(src)
    dense = extract_dense(weights, config, load_genome(gen_p))
    save_dense(ws.path("dense.sdm"), dense, {"reformed": not skipped})
    ws.record("dense.sdm", "extract", {"weights": src, "genome": gen_p, "reform": ws.path("reform.json")},
              None, ())
    full = extract_dense(weights, config)
    print(f"dense subnet: {dense.depth} blocks, {dense.block_weight_bytes()} block bytes "
          f"({dense.block_weight_bytes() / full.block_weight_bytes():.3f} of full)")
    return EXIT_OK


def cmd_eval(ws: Workspace, args) -> int:
    cfg = ws.cfg
    ck = checkpoint_path(ws)
    config, weights, _ = load_model(ck)
    init_g = load_genome(ws.require("init.genome.json", "init"))
    searched = load_genome(ws.require("search.genome.json", "search"))
    src, skipped = _reformed_source(ws)
    _, reformed_w, _ = load_model(src)
    dense, _ = load_dense(ws.require("dense.sdm", "extract"))
    _, held = load_corpus(cfg)
    X = _eval_windows(cfg, held)
    rows = {
        "dense": perplexity(weights, config, X),
        "init-subnet": perplexity(weights, config, X, init_g),
        "searched-subnet": perplexity(weights, config, X, searched),
        "reformed-subnet": perplexity(reformed_w, config, X, searched),
        "extracted-dense": dense_perplexity(dense, X),
    }
    eq = equivalence_check(reformed_w, config, searched, dense, X[:4, :-1])
    doc = {"perplexity": rows, "heldout_windows": int(len(X)), "reform_skipped": skipped,
           "equivalence_max_abs_diff": eq.max_abs_diff,
           "param_count": {"dense": param_count(config), "init-subnet": param_count(config, init_g),
                           "searched-subnet": param_count(config, searched)}}
    _write_json(ws.path("eval.json"), doc)
    inputs = {"checkpoint": ck, "init_genome": ws.path("init.genome.json"),
              "genome": ws.path("search.genome.json"), "weights": src, "dense": ws.path("dense.sdm"),
              "corpus": corpus_path(cfg)}
    ws.record("eval.json", "eval", inputs, None, ("eval", "corpus"))
    print(f"{'model':<18} {'held-out ppl':>12}")
    for k, v in rows.items():
        print(f"{k:<18} {v:>12.4f}")
    print(f"masked vs extracted max |logit diff|: {eq.max_abs_diff:.3g}")
    return EXIT_OK


def cmd_bench(ws: Workspace, args) -> int:
    b = ws.cfg["bench"]
    ck = checkpoint_path(ws)
    config, weights, _ = load_model(ck)
    dp = ws.require("dense.sdm", "extract")
    dense, _ = load_dense(dp)
    shape = (b["batch"], b["seq_len"])
    full = bench_forward(extract_dense(weights, config), shape, b["repetitions"], b["seed"])
    small = bench_forward(dense, shape, b["repetitions"], b["seed"])
    # timings vary run to run; this artifact is informational and not byte-stable
    _write_json(ws.path("bench.json"), {"full": full.to_dict(), "subnet": small.to_dict(),
                                        "speedup": small.tokens_per_second / full.tokens_per_second})
    ws.record("bench.json", "bench", {"checkpoint": ck, "dense": dp}, b["seed"], ("bench",))
    print(f"full   {full.tokens_per_second:10.0f} tok/s  {full.weight_bytes} bytes")
    print(f"subnet {small.tokens_per_second:10.0f} tok/s  {small.weight_bytes} bytes  "
          f"x{small.tokens_per_second / full.tokens_per_second:.2f}")
    return EXIT_OK


def cmd_ablate(ws: Workspace, args) -> int:
    cfg = ws.cfg
    a = cfg["ablate"]
    c = cfg["calibrate"]
    ck = checkpoint_path(ws)
    config, weights, _ = load_model(ck)
    gp = ws.require("grams.sdm", "calibrate")
    gen_p = ws.require("search.genome.json", "search")
    grams = load_grams(gp, config)
    genome = load_genome(gen_p)
    train, held = load_corpus(cfg)
    X = _eval_windows(cfg, held)

    scores = compute_scores(weights, config, grams)
    sens = {"ratios": a["ratios"], "attn": [], "mlp": []}
    for ratio in a["ratios"]:
        for mod in ("attn", "mlp"):
            sens[mod].append(perplexity(weights, config, X, init_genome(weights, config, None, ratio, scores, mod)))

    held_grams = capture_grams(weights, config, X)
    samples = {"samples": a["samples"], "objective": [], "perplexity": []}
    for n in a["samples"]:
        g_n = capture_grams(weights, config, sample_calibration(train, n, c["seq_len"], c["seed"]))
        reformed, _ = reform_subnet(weights, config, genome, g_n, cfg["reform"]["rho"], cfg["reform"]["iters"])
        samples["objective"].append(heldout_objective(weights, reformed, genome, held_grams))
        samples["perplexity"].append(perplexity(reformed, config, X, genome))

    first = next(i for i, b in enumerate(genome.blocks) if b.kept)
    kept = np.flatnonzero(genome.blocks[first].mlp_mask)
    rho = {"block": first, "layer": "wd", "rho": {}}
    for r in a["rhos"]:
        _, _, _, trace = reform_layer(weights.blocks[first].wd, grams.mean(first, "d"), kept, r, a["iters"])
        rho["rho"][str(r)] = trace
    _write_json(ws.path("ablate.json"), {"sensitivity": sens, "reform_samples": samples, "steps_rho": rho})
    ws.record("ablate.json", "ablate", {"checkpoint": ck, "grams": gp, "genome": gen_p, "corpus": corpus_path(cfg)},
              c["seed"], ("ablate", "reform", "calibrate", "eval", "corpus"))
    print("reformation objective by calibration size: "
          + ", ".join(f"{n}: {o:.5g}" for n, o in zip(samples["samples"], samples["objective"])))
    return EXIT_OK


def cmd_plot(ws: Workspace, args) -> int:
    from . import plot

    out = ws.root / "plots"
    out.mkdir(exist_ok=True)
    made = []
    curves, init_fit, inputs = {}, None, {}
    for prefix, label in (("search", "with init"), ("noinit", "without init")):
        p = ws.path(f"{prefix}.curve.json")
        if p.is_file():
            check_provenance(p, ws.root)
            doc = json.loads(p.read_text())
            curves[label] = doc["best_fitness"]
            inputs[prefix] = p
            if prefix == "search":
                init_fit = doc["init_fitness"]
    if not curves:
        raise MissingArtifact("no search curve found; run `subnetsearch search` first")
    made.append(("convergence.png", plot.plot_convergence(curves, out / "convergence.png", init_fit), inputs))
    ap = ws.path("ablate.json")
    if ap.is_file():
        check_provenance(ap, ws.root)
        doc = json.loads(ap.read_text())
        made.append(("sensitivity.png", plot.plot_sensitivity(doc["sensitivity"], out / "sensitivity.png"),
                     {"ablate": ap}))
        made.append(("reform_samples.png",
                     plot.plot_reform_samples(doc["reform_samples"], out / "reform_samples.png"), {"ablate": ap}))
        made.append(("steps_rho.png", plot.plot_steps_rho(doc["steps_rho"], out / "steps_rho.png"), {"ablate": ap}))
    for name, _, ins in made:
        ws.record(f"plots/{name}", "plot", ins, None, ())
    print("wrote " + ", ".join(str(out / n) for n, _, _ in made))
    return EXIT_OK


def cmd_verify(ws: Workspace, args) -> int:
    bad = 0
    records = sorted(ws.root.rglob("*.prov.json"))
    for prov in records:
        art = prov.with_name(prov.name[: -len(".prov.json")])
        try:
            if not art.is_file():
                raise MissingArtifact(f"{art} missing")
            check_provenance(art, ws.root)
            print(f"ok     {_display(art, ws.root)}")
        except (MissingArtifact, StaleArtifact) as exc:
            bad += 1
            print(f"FAILED {_display(art, ws.root)}: {exc}")
    print(f"{len(records) - bad}/{len(records)} artifacts verified")
    return EXIT_ARTIFACT if bad else EXIT_OK


COMMANDS = {
    "train": cmd_train, "calibrate": cmd_calibrate, "init": cmd_init, "search": cmd_search,
    "reform": cmd_reform, "extract": cmd_extract, "eval": cmd_eval, "bench": cmd_bench,
    "ablate": cmd_ablate, "plot": cmd_plot, "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="subnetsearch", description=__doc__.split("\n")[0],
                                 epilog="Any config key can be overridden with --section.key=value.")
    ap.add_argument("--config", help="JSON run configuration")
    ap.add_argument("--out", help=f"output directory (default: config output_dir, ${OUT_ENV}, ./runs)")
    ap.add_argument("--workers", type=int, help="parallel candidate evaluations (never changes results)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name == "search":
            p.add_argument("--ablate-no-init", action="store_true",
                           help="start from random masks instead of the importance init")
        if name == "reform":
            p.add_argument("--skip", action="store_true", help="record an explicit no-reformation step")
    return ap


def _split_overrides(argv: list[str]) -> tuple[list[str], list[tuple[str, object]]]:
    rest, overrides = [], []
    for a in argv:
        key = a[2:].split("=", 1)[0]
        if a.startswith("--") and "=" in a and ("." in key or key in ("checkpoint", "output_dir")):
            key, value = a[2:].split("=", 1)
            overrides.append((key, _parse_value(value)))
        else:
            rest.append(a)
    return rest, overrides


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    rest, overrides = _split_overrides(argv)
    parser = build_parser()
    args = parser.parse_args(rest)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        if args.workers is not None:
            overrides.append(("search.workers", args.workers))
        cfg = RunConfig.load(args.config, overrides)
        ws = Workspace(cfg.output_dir(args.out), cfg)
        return COMMANDS[args.command](ws, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifact, StaleArtifact) as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except (container.ContainerError, CorpusError) as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except (NotPositiveDefinite, NonFiniteIterate, FloatingPointError, np.linalg.LinAlgError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
