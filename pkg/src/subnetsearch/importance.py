"""Weight importance scores and the importance-aware initial genome."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .genome import BlockGenome, Genome, ceil_count, expand_units
from .model import GramSet, ModelConfig, ModelWeights
from .numerics import NotPositiveDefinite, damped_gram_inverse_diag, default_damping

__all__ = [
    "GramSet",
    "BlockScores",
    "ScoreSet",
    "element_importance",
    "row_col_scores",
    "compute_scores",
    "top_k_mask",
    "init_attention_mask",
    "init_mlp_mask",
    "init_genome",
    "random_genome",
]


def inverse_diag(g: np.ndarray, damping: float | str | None = "auto") -> tuple[np.ndarray, float]:
    """Diagonal of (2G + lam I)^-1 and the lam actually used.

    ``"auto"`` tries lam = 0 and falls back to 0.01 * mean(diag G) when the
    Gram is singular.
    """
    if damping == "auto":
        try:
            return damped_gram_inverse_diag(g, 0.0), 0.0
        except NotPositiveDefinite:
            lam = default_damping(g)
            if lam <= 0:
                lam = 1e-8
            return damped_gram_inverse_diag(g, lam), lam
    lam = float(damping or 0.0)
    return damped_gram_inverse_diag(g, lam), lam


def element_importance(W: np.ndarray, G: np.ndarray, damping: float | str | None = "auto") -> np.ndarray:
    """Phi[i, j] = W[i, j]^2 / [(2 G)^-1]_jj for a layer computing W @ x."""
    W = np.asarray(W, dtype=np.float64)
    if G.shape[0] != W.shape[1]:
        raise ValueError(f"Gram is {G.shape[0]}-dim, weight has {W.shape[1]} columns")
    diag, _ = inverse_diag(G, damping)
    return W * W / diag[None, :]


def row_col_scores(phi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return phi.sum(axis=1), phi.sum(axis=0)


@dataclass
class BlockScores:
    q_rows: np.ndarray
    k_rows: np.ndarray
    v_rows: np.ndarray
    u_rows: np.ndarray
    g_rows: np.ndarray
    o_cols: np.ndarray
    d_cols: np.ndarray

    NAMES = ("q_rows", "k_rows", "v_rows", "u_rows", "g_rows", "o_cols", "d_cols")

    @property
    def attn(self) -> np.ndarray:
        return self.q_rows + self.k_rows + self.v_rows + self.o_cols

    @property
    def mlp(self) -> np.ndarray:
        return self.u_rows + self.g_rows + self.d_cols


@dataclass
class ScoreSet:
    blocks: list[BlockScores]
    damping: dict

    def to_tensors(self) -> dict[str, np.ndarray]:
        return {f"blocks.{i}.{n}": getattr(b, n) for i, b in enumerate(self.blocks) for n in BlockScores.NAMES}

    @classmethod
    def from_tensors(cls, tensors, depth: int, damping=None) -> "ScoreSet":
        return cls([BlockScores(*(np.asarray(tensors[f"blocks.{i}.{n}"]) for n in BlockScores.NAMES))
                    for i in range(depth)], dict(damping or {}))


def compute_scores(weights: ModelWeights, config: ModelConfig, grams: GramSet,
                   damping: float | str | None = "auto") -> ScoreSet:
    blocks, used = [], {}
    for i, (blk, gb) in enumerate(zip(weights.blocks, grams.blocks)):
        diags = {}
        for tap in ("qkv", "o", "ug", "d"):
            diags[tap], used[f"blocks.{i}.{tap}"] = inverse_diag(gb[tap], damping)

        def phi(W, tap):
            W = W.astype(np.float64)
            return W * W / diags[tap][None, :]

        blocks.append(BlockScores(
            q_rows=phi(blk.wq, "qkv").sum(1), k_rows=phi(blk.wk, "qkv").sum(1),
            v_rows=phi(blk.wv, "qkv").sum(1), u_rows=phi(blk.wu, "ug").sum(1),
            g_rows=phi(blk.wg, "ug").sum(1), o_cols=phi(blk.wo, "o").sum(0),
            d_cols=phi(blk.wd, "d").sum(0),
        ))
    return ScoreSet(blocks, used)


def top_k_mask(scores: np.ndarray, k: int) -> np.ndarray:
    """Keep the k largest scores; ties go to the lower index."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    mask = np.zeros(len(scores), dtype=bool)
    mask[order[:k]] = True
    return mask


def init_attention_mask(scores: BlockScores | np.ndarray, ratios, config: ModelConfig):
    """Per-head masks (n_heads, head_dim) and the realized per-head ratios."""
    combined = scores.attn if isinstance(scores, BlockScores) else np.asarray(scores, dtype=np.float64)
    if combined.shape != (config.attn_dim,):
        raise ValueError(f"combined attention score has shape {combined.shape}")
    ratios = np.broadcast_to(np.asarray(ratios, dtype=np.float64), (config.n_heads,))
    unit = config.head_unit
    units = config.head_dim // unit
    masks = np.zeros((config.n_heads, config.head_dim), dtype=bool)
    realized = []
    for h in range(config.n_heads):
        head = combined[h * config.head_dim:(h + 1) * config.head_dim]
        unit_scores = head.reshape(units, unit).sum(axis=1)
        k = min(max(ceil_count(float(ratios[h]), units), 0), units)
        masks[h] = expand_units(top_k_mask(unit_scores, k), unit)
        realized.append(k / units)
    return masks, tuple(realized)


def init_mlp_mask(scores: BlockScores | np.ndarray, ratio: float, config: ModelConfig):
    combined = scores.mlp if isinstance(scores, BlockScores) else np.asarray(scores, dtype=np.float64)
    if combined.shape != (config.d_mlp,):
        raise ValueError(f"combined MLP score has shape {combined.shape}")
    k = min(max(ceil_count(ratio, config.d_mlp), 0), config.d_mlp)
    return top_k_mask(combined, k), k / config.d_mlp


def init_genome(weights: ModelWeights, config: ModelConfig, grams: GramSet | None, ratio: float,
                scores: ScoreSet | None = None, modules: str = "both") -> Genome:
    """Every block kept, masks from the importance top-k at one uniform ratio.

    ``modules`` limits pruning to "attn" or "mlp" (the other module stays
    dense), which is what the sensitivity ablation needs.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError("ratio must be in (0, 1]")
    if modules not in ("both", "attn", "mlp"):
        raise ValueError("modules must be 'both', 'attn' or 'mlp'")
    if scores is None:
        scores = compute_scores(weights, config, grams)
    attn_ratio = ratio if modules in ("both", "attn") else 1.0
    mlp_ratio = ratio if modules in ("both", "mlp") else 1.0
    blocks = []
    for bs in scores.blocks:
        heads, realized = init_attention_mask(bs, attn_ratio, config)
        mlp, mlp_realized = init_mlp_mask(bs, mlp_ratio, config)
        blocks.append(BlockGenome(True, heads, mlp, realized, mlp_realized))
    meta = {"origin": "importance-init", "uniform_ratio": ratio, "modules": modules,
            "keep_rounding": "ceil", "tie_break": "lowest-index"}
    return Genome(blocks, config.fingerprint(), config.head_unit, meta)


def random_genome(config: ModelConfig, ratio: float, rng: np.random.Generator) -> Genome:
    """Uniform-ratio genome with random keep-sets (the no-initialization ablation)."""
    unit = config.head_unit
    units = config.head_dim // unit
    ka = ceil_count(ratio, units)
    km = ceil_count(ratio, config.d_mlp)
    blocks = []
    for _ in range(config.depth):
        heads = np.zeros((config.n_heads, config.head_dim), dtype=bool)
        for h in range(config.n_heads):
            u = np.zeros(units, dtype=bool)
            u[rng.choice(units, ka, replace=False)] = True
            heads[h] = expand_units(u, unit)
        mlp = np.zeros(config.d_mlp, dtype=bool)
        mlp[rng.choice(config.d_mlp, km, replace=False)] = True
        blocks.append(BlockGenome(True, heads, mlp, (ka / units,) * config.n_heads, km / config.d_mlp))
    return Genome(blocks, config.fingerprint(), config.head_unit, {"origin": "random", "uniform_ratio": ratio})
