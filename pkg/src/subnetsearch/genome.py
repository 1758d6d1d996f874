"""Subnet encoding and its variation operators.

A genome holds, per transformer block, a kept bit, one selection mask per
attention head, one MLP selection mask, and the inheriting ratio each mask
is supposed to realize. Ratios are always stored quantized to the mask
granularity (k / units), so "mask matches ratio" is an integer comparison.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .model import ModelConfig

GENOME_VERSION = 1
RATIO_EPS = 1e-9

# Published search space, LLaMA family: target ratio -> LLaMA-7B depth range
# (out of 32 blocks), per-head ratio range, MLP ratio range, each [lo, hi, step].
SEARCH_SPACE_TABLE = {
    0.9: {"depth": (32, 32), "attn": (0.9, 1.0, 0.01), "mlp": (0.6, 1.0, 0.05)},
    0.8: {"depth": (32, 32), "attn": (0.8, 1.0, 0.01), "mlp": (0.4, 1.0, 0.05)},
    0.7: {"depth": (30, 32), "attn": (0.3, 1.0, 0.01), "mlp": (0.2, 1.0, 0.05)},
    0.6: {"depth": (28, 32), "attn": (0.6, 1.0, 0.01), "mlp": (0.1, 1.0, 0.05)},
    0.5: {"depth": (28, 32), "attn": (0.6, 1.0, 0.01), "mlp": (0.1, 1.0, 0.05)},
}
TABLE_DEPTH = 32


class ConfigMismatch(ValueError):
    pass


def keep_count(ratio: float, units: int) -> int:
    """round(ratio * units), half away from zero."""
    return int(math.floor(ratio * units + 0.5 + RATIO_EPS))


def ceil_count(ratio: float, units: int) -> int:
    return int(math.ceil(ratio * units - RATIO_EPS))


def inheriting_ratio(mask) -> float:
    mask = np.asarray(mask)
    return float(mask.sum()) / mask.size if mask.size else 0.0


# ---------------------------------------------------------------------------
# data types


@dataclass
class BlockGenome:
    kept: bool
    head_masks: np.ndarray  # (n_heads, head_dim) bool
    mlp_mask: np.ndarray  # (d_mlp,) bool
    head_ratios: tuple
    mlp_ratio: float

    def __post_init__(self):
        self.head_masks = np.asarray(self.head_masks, dtype=bool)
        self.mlp_mask = np.asarray(self.mlp_mask, dtype=bool)
        self.head_ratios = tuple(float(r) for r in self.head_ratios)
        self.mlp_ratio = float(self.mlp_ratio)
        self.kept = bool(self.kept)

    @property
    def attn_mask(self) -> np.ndarray:
        return self.head_masks.reshape(-1)

    def copy(self) -> "BlockGenome":
        return BlockGenome(self.kept, self.head_masks.copy(), self.mlp_mask.copy(),
                           self.head_ratios, self.mlp_ratio)

    def __eq__(self, other) -> bool:
        if not isinstance(other, BlockGenome):
            return NotImplemented
        return (self.kept == other.kept and self.head_ratios == other.head_ratios
                and self.mlp_ratio == other.mlp_ratio
                and np.array_equal(self.head_masks, other.head_masks)
                and np.array_equal(self.mlp_mask, other.mlp_mask))

    def to_dict(self) -> dict:
        return {
            "kept": self.kept,
            "heads": [np.flatnonzero(m).tolist() for m in self.head_masks],
            "head_ratios": list(self.head_ratios),
            "mlp": np.flatnonzero(self.mlp_mask).tolist(),
            "mlp_ratio": self.mlp_ratio,
        }


@dataclass
class Genome:
    blocks: list[BlockGenome]
    config_fingerprint: str
    head_unit: int = 1
    metadata: dict = field(default_factory=dict)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Genome):
            return NotImplemented
        return (self.config_fingerprint == other.config_fingerprint
                and self.head_unit == other.head_unit
                and len(self.blocks) == len(other.blocks)
                and all(a == b for a, b in zip(self.blocks, other.blocks)))

    @property
    def depth(self) -> int:
        return sum(b.kept for b in self.blocks)

    def copy(self) -> "Genome":
        return Genome([b.copy() for b in self.blocks], self.config_fingerprint,
                      self.head_unit, json.loads(json.dumps(self.metadata)))

    def check_compatible(self, config: ModelConfig) -> None:
        if len(self.blocks) != config.depth:
            raise ConfigMismatch(f"genome has {len(self.blocks)} blocks, model has {config.depth}")
        b = self.blocks[0]
        if b.head_masks.shape != (config.n_heads, config.head_dim) or b.mlp_mask.shape != (config.d_mlp,):
            raise ConfigMismatch("genome mask shapes do not match the model")

    def to_dict(self, with_metadata: bool = True) -> dict:
        b0 = self.blocks[0]
        doc = {
            "version": GENOME_VERSION,
            "config_fingerprint": self.config_fingerprint,
            "dims": {"n_heads": int(b0.head_masks.shape[0]), "head_dim": int(b0.head_masks.shape[1]),
                     "d_mlp": int(b0.mlp_mask.shape[0]), "head_unit": self.head_unit},
            "blocks": [b.to_dict() for b in self.blocks],
        }
        if with_metadata:
            doc["metadata"] = self.metadata
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "Genome":
        if doc.get("version") != GENOME_VERSION:
            raise ValueError(f"unsupported genome version {doc.get('version')}")
        dims = doc["dims"]
        blocks = []
        for bd in doc["blocks"]:
            heads = np.zeros((dims["n_heads"], dims["head_dim"]), dtype=bool)
            for h, idx in enumerate(bd["heads"]):
                heads[h, idx] = True
            mlp = np.zeros(dims["d_mlp"], dtype=bool)
            mlp[bd["mlp"]] = True
            blocks.append(BlockGenome(bd["kept"], heads, mlp, bd["head_ratios"], bd["mlp_ratio"]))
        return cls(blocks, doc["config_fingerprint"], dims.get("head_unit", 1), dict(doc.get("metadata", {})))

    def to_json(self, with_metadata: bool = True) -> str:
        return json.dumps(self.to_dict(with_metadata), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Genome":
        return cls.from_dict(json.loads(text))

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(with_metadata=False), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def identity_genome(config: ModelConfig) -> Genome:
    blocks = [
        BlockGenome(True, np.ones((config.n_heads, config.head_dim), bool), np.ones(config.d_mlp, bool),
                    (1.0,) * config.n_heads, 1.0)
        for _ in range(config.depth)
    ]
    return Genome(blocks, config.fingerprint(), config.head_unit, {"origin": "identity"})


def head_units(mask: np.ndarray, unit: int) -> np.ndarray:
    """Dim-level head mask -> unit-level (rotary pairs collapse to one entry)."""
    return mask[::unit].copy() if unit > 1 else mask.copy()


def expand_units(units: np.ndarray, unit: int) -> np.ndarray:
    return np.repeat(units, unit) if unit > 1 else units.copy()


# ---------------------------------------------------------------------------
# search space


def _quantized_grid(lo: float, hi: float, step: float, units: int) -> np.ndarray:
    values = []
    v, j = lo, 0
    while v <= hi + RATIO_EPS:
        values.append(v)
        j += 1
        v = lo + j * step
    counts = sorted({min(max(ceil_count(x, units), 1), units) for x in values})
    return np.array([c / units for c in counts])


@dataclass(frozen=True)
class SearchSpace:
    depth_min: int
    depth_max: int
    attn_range: tuple  # (lo, hi, step)
    mlp_range: tuple
    target: float = 0.8
    tolerance: float = 0.02

    def __post_init__(self):
        for lo, hi, step in (self.attn_range, self.mlp_range):
            if lo > hi or step <= 0:
                raise ValueError("ratio range needs lo <= hi and step > 0")
        if self.depth_min > self.depth_max or self.depth_min < 1:
            raise ValueError("invalid depth range")

    def attn_grid(self, config: ModelConfig) -> np.ndarray:
        return _quantized_grid(*self.attn_range, config.head_dim // config.head_unit)

    def mlp_grid(self, config: ModelConfig) -> np.ndarray:
        return _quantized_grid(*self.mlp_range, config.d_mlp)

    def to_dict(self) -> dict:
        return {"depth_min": self.depth_min, "depth_max": self.depth_max,
                "attn_range": list(self.attn_range), "mlp_range": list(self.mlp_range),
                "target": self.target, "tolerance": self.tolerance}

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        return cls(d["depth_min"], d["depth_max"], tuple(d["attn_range"]), tuple(d["mlp_range"]),
                   d.get("target", 0.8), d.get("tolerance", 0.02))

    @classmethod
    def for_target(cls, config: ModelConfig, target: float, tolerance: float = 0.02) -> "SearchSpace":
        """Table row closest to ``target``, rescaled to the toy model.

        Depth bounds keep the published fraction of blocks; ratio steps become
        1/head_dim for heads and max(0.05, 1/d_mlp) for the MLP. The lower
        bounds are widened to contain ``target`` itself so the uniformly
        initialized genome is always inside the space.
        """
        key = min(SEARCH_SPACE_TABLE, key=lambda t: (abs(t - target), -t))
        row = SEARCH_SPACE_TABLE[key]
        dlo, dhi = row["depth"]
        depth_min = max(1, int(round(config.depth * dlo / TABLE_DEPTH)))
        depth_max = max(depth_min, int(round(config.depth * dhi / TABLE_DEPTH)))
        a_lo, a_hi, _ = row["attn"]
        m_lo, m_hi, _ = row["mlp"]
        return cls(depth_min, depth_max,
                   (min(a_lo, target), a_hi, 1.0 / config.head_dim),
                   (min(m_lo, target), m_hi, max(0.05, 1.0 / config.d_mlp)),
                   target, tolerance)


def _on_grid(value: float, grid: np.ndarray) -> bool:
    return bool(np.any(np.abs(grid - value) <= RATIO_EPS))


def validate(g: Genome, space: SearchSpace, config: ModelConfig) -> list[str]:
    """Every rule the genome breaks; an empty list means valid."""
    problems: list[str] = []
    try:
        g.check_compatible(config)
    except ConfigMismatch as exc:
        return [str(exc)]
    if g.config_fingerprint != config.fingerprint():
        problems.append("config fingerprint mismatch")
    if not space.depth_min <= g.depth <= space.depth_max:
        problems.append(f"depth {g.depth} outside [{space.depth_min}, {space.depth_max}]")
    unit = config.head_unit
    units = config.head_dim // unit
    a_grid, m_grid = space.attn_grid(config), space.mlp_grid(config)
    for i, b in enumerate(g.blocks):
        if len(b.head_ratios) != config.n_heads:
            problems.append(f"block {i}: expected {config.n_heads} head ratios")
            continue
        for h, (mask, r) in enumerate(zip(b.head_masks, b.head_ratios)):
            if unit > 1 and not np.array_equal(mask[0::2], mask[1::2]):
                problems.append(f"block {i} head {h}: mask breaks rotary pair granularity")
            if not mask.any():
                problems.append(f"block {i} head {h}: empty head")
            if not _on_grid(r, a_grid):
                problems.append(f"block {i} head {h}: ratio {r} off grid")
            if int(head_units(mask, unit).sum()) != keep_count(r, units):
                problems.append(f"block {i} head {h}: mask popcount disagrees with ratio {r}")
        if not _on_grid(b.mlp_ratio, m_grid):
            problems.append(f"block {i} mlp: ratio {b.mlp_ratio} off grid")
        if int(b.mlp_mask.sum()) != keep_count(b.mlp_ratio, config.d_mlp):
            problems.append(f"block {i} mlp: mask popcount disagrees with ratio {b.mlp_ratio}")
    return problems


# ---------------------------------------------------------------------------
# mask mutation


@dataclass
class MaskMutation:
    mask: np.ndarray
    outcome: str  # "kept" | "mutated" | "exhausted"
    overlap: int = -1


def similarity_threshold(alpha: float, n: int, k: int, mode: str = "relative") -> int:
    """Minimum overlap count between the old and new keep-sets.

    ``relative`` uses alpha * k (k = new keep-set size); ``literal`` uses
    alpha * n, which cannot be met when alpha exceeds the target ratio.
    """
    if mode == "relative":
        thr = alpha * k
    elif mode == "literal":
        thr = alpha * n
    else:
        raise ValueError(f"unknown similarity mode {mode!r}")
    return int(math.ceil(thr - RATIO_EPS))


def mutate_mask(S, p_m: float, gamma: float, alpha: float, eta: int, rng: np.random.Generator,
                similarity: str = "relative", method: str = "exact") -> MaskMutation:
    """Mask mutation with its outcome.

    ``method="loop"`` literally redraws uniform keep-sets up to ``eta`` times.
    ``method="exact"`` samples the same process in O(N): the first draw that
    meets the threshold is a uniform keep-set conditioned on its overlap,
    and the overlap of a uniform draw is hypergeometric, so we draw
    "exhausted" with probability (1 - p)^eta, else the overlap from the
    truncated hypergeometric and then the set itself.
    """
    S = np.asarray(S, dtype=bool)
    if not 0.0 <= alpha <= 1.0 or eta < 1:
        raise ValueError("need 0 <= alpha <= 1 and eta >= 1")
    n = S.size
    k = keep_count(gamma, n)
    p_r = rng.random()
    if int(S.sum()) == k and p_r > p_m:
        return MaskMutation(S.copy(), "kept")
    idx1 = np.flatnonzero(S)
    k1 = idx1.size
    thr = similarity_threshold(alpha, n, k, similarity)
    if min(k1, k) < thr:
        return MaskMutation(S.copy(), "exhausted")
    if method == "loop":
        return _mutate_loop(S, k, thr, eta, rng)
    if method != "exact":
        raise ValueError(f"unknown method {method!r}")

    hi = min(k1, k)
    support = np.arange(thr, hi + 1)
    # draws of size k from n items with k1 "old" ones; overlap counts old ones drawn
    pmf = stats.hypergeom.pmf(support, n, k1, k)
    p_success = float(min(pmf.sum(), 1.0))
    if p_success <= 0.0:
        return MaskMutation(S.copy(), "exhausted")
    p_exhaust = math.exp(eta * math.log1p(-p_success)) if p_success < 1.0 else 0.0
    if rng.random() < p_exhaust:
        return MaskMutation(S.copy(), "exhausted")
    overlap = int(rng.choice(support, p=pmf / pmf.sum()))
    idx0 = np.flatnonzero(~S)
    chosen = np.concatenate([
        rng.choice(idx1, overlap, replace=False),
        rng.choice(idx0, k - overlap, replace=False),
    ])
    out = np.zeros(n, dtype=bool)
    out[chosen] = True
    return MaskMutation(out, "mutated", overlap)


def _mutate_loop(S, k, thr, eta, rng, chunk: int = 64) -> MaskMutation:
    n = S.size
    drawn = 0
    while drawn < eta:
        m = min(chunk, eta - drawn)
        idx2 = np.argsort(rng.random((m, n)), axis=1)[:, :k]
        overlaps = S[idx2].sum(axis=1)
        hits = np.flatnonzero(overlaps >= thr)
        if hits.size:
            out = np.zeros(n, dtype=bool)
            out[idx2[hits[0]]] = True
            return MaskMutation(out, "mutated", int(overlaps[hits[0]]))
        drawn += m
    return MaskMutation(S.copy(), "exhausted")


def mask_mutation(S, p_m, gamma, alpha, eta, rng, similarity: str = "relative") -> np.ndarray:
    return mutate_mask(S, p_m, gamma, alpha, eta, rng, similarity).mask


# ---------------------------------------------------------------------------
# genome-level operators


@dataclass(frozen=True)
class MutationParams:
    p_d: float = 0.1
    p_s: float = 0.1
    p_m: float = 0.3
    alpha: float = 0.8
    eta: int = 1000
    similarity: str = "relative"


def mutate_genome(g: Genome, params: MutationParams, space: SearchSpace, config: ModelConfig,
                  rng: np.random.Generator) -> Genome:
    """Depth flips (P_d), ratio resampling (P_s), then per-mask mutation (P_m).

    A ratio whose mask mutation ends in exhaustion reverts to the ratio the
    unchanged mask realizes, so the child always stays consistent.
    """
    child = g.copy()
    child.metadata = {}
    n_blocks = len(child.blocks)
    for _ in range(n_blocks):
        if rng.random() < params.p_d:
            j = int(rng.integers(n_blocks))
            depth_after = child.depth + (-1 if child.blocks[j].kept else 1)
            if space.depth_min <= depth_after <= space.depth_max:
                child.blocks[j].kept = not child.blocks[j].kept

    a_grid, m_grid = space.attn_grid(config), space.mlp_grid(config)
    unit = config.head_unit
    units = config.head_dim // unit
    for b in child.blocks:
        ratios = list(b.head_ratios)
        for h in range(len(ratios)):
            if rng.random() < params.p_s:
                ratios[h] = float(a_grid[rng.integers(a_grid.size)])
        mlp_ratio = b.mlp_ratio
        if rng.random() < params.p_s:
            mlp_ratio = float(m_grid[rng.integers(m_grid.size)])

        for h in range(len(ratios)):
            res = mutate_mask(head_units(b.head_masks[h], unit), params.p_m, ratios[h],
                              params.alpha, params.eta, rng, params.similarity)
            b.head_masks[h] = expand_units(res.mask, unit)
            if res.outcome == "exhausted":
                ratios[h] = int(res.mask.sum()) / units
        res = mutate_mask(b.mlp_mask, params.p_m, mlp_ratio, params.alpha, params.eta, rng,
                          params.similarity)
        b.mlp_mask = res.mask
        if res.outcome == "exhausted":
            mlp_ratio = int(res.mask.sum()) / config.d_mlp
        b.head_ratios = tuple(ratios)
        b.mlp_ratio = float(mlp_ratio)
    return child


def clamp_depth(g: Genome, space: SearchSpace) -> Genome:
    """Re-keep the earliest dropped blocks / drop the latest kept ones."""
    for b in g.blocks:
        if g.depth >= space.depth_min:
            break
        if not b.kept:
            b.kept = True
    for b in reversed(g.blocks):
        if g.depth <= space.depth_max:
            break
        if b.kept:
            b.kept = False
    return g


def crossover(a: Genome, b: Genome, rng: np.random.Generator, space: SearchSpace | None = None) -> Genome:
    if a.config_fingerprint != b.config_fingerprint or len(a.blocks) != len(b.blocks):
        raise ConfigMismatch("parents come from different model configs")
    coins = rng.random(len(a.blocks)) < 0.5
    blocks = [(x if c else y).copy() for x, y, c in zip(a.blocks, b.blocks, coins)]
    child = Genome(blocks, a.config_fingerprint, a.head_unit, {})
    if space is not None:
        clamp_depth(child, space)
    return child
