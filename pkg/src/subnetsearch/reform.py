"""ADMM reformation of the inherited columns of W_O and W_D.

Solves  min ||W_hat X - W X||^2  s.t.  W_hat * M = 0  where M marks pruned
entries (whole columns here). Each iteration is a ridge solve against
(G + rho I), a projection that zeroes pruned entries, and a dual update.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .model import GramSet, ModelConfig, ModelWeights
from .numerics import NotPositiveDefinite, spd_factor, symmetrize

log = logging.getLogger(__name__)

DEFAULT_RHO = 1.0
DEFAULT_ITERS = 30


class NonFiniteIterate(ArithmeticError):
    pass


@dataclass
class ReformProblem:
    W: np.ndarray  # (out, in)
    G: np.ndarray  # (in, in)
    pruned: np.ndarray  # (out, in) bool, True = pruned
    rho: float = DEFAULT_RHO
    iters: int = DEFAULT_ITERS

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.G = symmetrize(self.G)
        self.pruned = np.broadcast_to(np.asarray(self.pruned, dtype=bool), self.W.shape)
        if self.G.shape != (self.W.shape[1],) * 2:
            raise ValueError(f"Gram shape {self.G.shape} does not match W {self.W.shape}")
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")

    @classmethod
    def for_columns(cls, W, G, kept_cols, rho=DEFAULT_RHO, iters=DEFAULT_ITERS) -> "ReformProblem":
        W = np.asarray(W)
        col_pruned = np.ones(W.shape[1], dtype=bool)
        col_pruned[np.asarray(kept_cols, dtype=np.int64)] = False
        return cls(W, G, np.broadcast_to(col_pruned[None, :], W.shape), rho, iters)


@dataclass
class ReformResult:
    W_hat: np.ndarray
    objective: list = field(default_factory=list)
    primal_residual: list = field(default_factory=list)


def reform_objective(W_hat: np.ndarray, W: np.ndarray, G: np.ndarray) -> float:
    """trace((W_hat - W) G (W_hat - W)^T), i.e. ||(W_hat - W) X||^2 for G = X X^T."""
    E = np.asarray(W_hat, dtype=np.float64) - np.asarray(W, dtype=np.float64)
    return max(float(np.einsum("ij,jk,ik->", E, np.asarray(G, dtype=np.float64), E)), 0.0)


def admm_reform(p: ReformProblem) -> ReformResult:
    keep = ~p.pruned
    factor = spd_factor(p.G + p.rho * np.eye(p.G.shape[0]))
    GWt = p.G @ p.W.T  # (in, out)
    W_hat = p.W.copy()
    Z = W_hat.copy()
    U = np.zeros_like(W_hat)
    result = ReformResult(W_hat)
    for _ in range(p.iters):
        W_hat = factor.solve(GWt + p.rho * (Z - U).T).T
        Z = (W_hat + U) * keep
        U = U + W_hat - Z
        if not (np.all(np.isfinite(W_hat)) and np.all(np.isfinite(U))):
            raise NonFiniteIterate("ADMM produced a non-finite iterate")
        feasible = W_hat * keep
        result.objective.append(reform_objective(feasible, p.W, p.G))
        result.primal_residual.append(float(np.linalg.norm(W_hat - Z)))
    result.W_hat = W_hat * keep
    return result


def exact_column_ls_oracle(W: np.ndarray, X: np.ndarray, kept_cols, damping: float = 0.0) -> np.ndarray:
    """Global optimum for column masks by least squares on the raw activations.

    Each output row is regressed onto the kept input features:
    W_kept = (W X X_k^T)(X_k X_k^T)^-1, omitted columns zero.
    """
    W = np.asarray(W, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    kept = np.asarray(kept_cols, dtype=np.int64)
    out = np.zeros_like(W)
    if kept.size == 0:
        return out
    Xk = X[kept]  # (k, n)
    Y = W @ X  # (out, n)
    if damping > 0:
        # ridge via augmented rows
        A = np.concatenate([Xk.T, np.sqrt(damping) * np.eye(kept.size)])
        B = np.concatenate([Y.T, np.zeros((kept.size, W.shape[0]))])
    else:
        A, B = Xk.T, Y.T
    sol, _, rank, _ = np.linalg.lstsq(A, B, rcond=None)
    if damping == 0 and rank < kept.size:
        raise NotPositiveDefinite("kept activations are rank deficient; pass a damping")
    out[:, kept] = sol.T
    return out


def exact_column_ls_from_gram(W: np.ndarray, G: np.ndarray, kept_cols, damping: float = 0.0) -> np.ndarray:
    """Same optimum computed from the Gram matrix alone (for model-scale checks)."""
    W = np.asarray(W, dtype=np.float64)
    G = symmetrize(G)
    kept = np.asarray(kept_cols, dtype=np.int64)
    out = np.zeros_like(W)
    if kept.size == 0:
        return out
    Gk = G[np.ix_(kept, kept)] + damping * np.eye(kept.size)
    rhs = (W @ G[:, kept]).T
    out[:, kept] = spd_factor(Gk).solve(rhs).T
    return out


def truncate_columns(W: np.ndarray, kept_cols) -> np.ndarray:
    out = np.zeros_like(np.asarray(W, dtype=np.float64))
    kept = np.asarray(kept_cols, dtype=np.int64)
    out[:, kept] = np.asarray(W, dtype=np.float64)[:, kept]
    return out


@dataclass
class LayerReport:
    block: int
    layer: str
    kept: int
    total: int
    truncation_objective: float
    reformed_objective: float
    trace: list

    def to_dict(self) -> dict:
        return {"block": self.block, "layer": self.layer, "kept": self.kept, "total": self.total,
                "truncation_objective": self.truncation_objective,
                "reformed_objective": self.reformed_objective, "trace": self.trace}


def reform_layer(W, G, kept_cols, rho=DEFAULT_RHO, iters=DEFAULT_ITERS):
    kept_cols = np.asarray(kept_cols, dtype=np.int64)
    if kept_cols.size == W.shape[1]:
        W64 = np.asarray(W, dtype=np.float64)
        return W64.copy(), 0.0, 0.0, [0.0] * iters
    res = admm_reform(ReformProblem.for_columns(W, G, kept_cols, rho, iters))
    trunc = reform_objective(truncate_columns(W, kept_cols), W, G)
    obj = reform_objective(res.W_hat, W, G)
    return res.W_hat, trunc, obj, res.objective


def reform_subnet(weights: ModelWeights, config: ModelConfig, genome, grams: GramSet,
                  rho: float = DEFAULT_RHO, iters: int = DEFAULT_ITERS) -> tuple[ModelWeights, list[LayerReport]]:
    """Reform W_O and W_D of every kept block against dense-model statistics.

    Grams are normalized per token before solving so rho keeps the same
    meaning regardless of calibration size.
    """
    genome.check_compatible(config)
    out = weights.copy()
    reports: list[LayerReport] = []
    for i, (blk, bg) in enumerate(zip(out.blocks, genome.blocks)):
        if not bg.kept:
            continue
        for layer, tap, mask in (("wo", "o", bg.attn_mask), ("wd", "d", bg.mlp_mask)):
            W = getattr(blk, layer)
            kept = np.flatnonzero(mask)
            G = grams.mean(i, tap)
            W_new, trunc, obj, trace = reform_layer(W, G, kept, rho, iters)
            slack = 1e-9 * max(trunc, 1.0)
            if obj > trunc + slack:
                raise AssertionError(
                    f"block {i} {layer}: reformed objective {obj:.6g} exceeds truncation {trunc:.6g}")
            setattr(blk, layer, W_new.astype(W.dtype))
            reports.append(LayerReport(i, layer, int(kept.size), int(mask.size), trunc, obj, trace))
            log.debug("block %d %s: truncation %.4g -> reformed %.4g", i, layer, trunc, obj)
    return out, reports


def heldout_objective(original: ModelWeights, reformed: ModelWeights, genome, grams: GramSet) -> float:
    """Summed per-token layer reconstruction error of W_O and W_D on ``grams``."""
    total = 0.0
    for i, bg in enumerate(genome.blocks):
        if not bg.kept:
            continue
        for layer, tap in (("wo", "o"), ("wd", "d")):
            W = getattr(original.blocks[i], layer)
            W_hat = getattr(reformed.blocks[i], layer)
            mask = bg.attn_mask if layer == "wo" else bg.mlp_mask
            W_hat = np.asarray(W_hat, dtype=np.float64) * mask[None, :]
            total += reform_objective(W_hat, W, grams.mean(i, tap))
    return total
