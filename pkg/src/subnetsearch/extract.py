"""Materialize a searched subnet as a physically smaller dense model."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import container
from .genome import Genome
from .model import (BlockWeights, ModelConfig, ModelWeights, _as_batch, apply_rope, causal_attention,
                    embed, rms_norm, rope_freqs, silu)

BYTES_PER_WEIGHT = 4  # float32 storage


class EmptyHead(ValueError):
    pass


@dataclass
class DenseBlock:
    weights: BlockWeights
    head_index: list  # per head: kept dim indices within the head, ascending
    mlp_index: np.ndarray
    source_block: int

    @property
    def head_dims(self) -> tuple:
        return tuple(len(ix) for ix in self.head_index)

    @property
    def attn_dim(self) -> int:
        return int(sum(self.head_dims))

    @property
    def mlp_dim(self) -> int:
        return int(len(self.mlp_index))

    def num_scalars(self) -> int:
        return int(sum(getattr(self.weights, n).size for n in BlockWeights.NAMES))


@dataclass
class DenseSubnetModel:
    """Sliced weights; ``config`` is the source model's config (D, V, head_dim)."""

    config: ModelConfig
    embedding: np.ndarray
    final_norm: np.ndarray
    blocks: list[DenseBlock]
    lm_head: np.ndarray | None = None
    pos_embedding: np.ndarray | None = None

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def output_matrix(self) -> np.ndarray:
        return self.embedding if self.lm_head is None else self.lm_head

    def block_weight_bytes(self) -> int:
        return BYTES_PER_WEIGHT * sum(b.num_scalars() for b in self.blocks)

    def weight_bytes(self) -> int:
        n = self.embedding.size + self.final_norm.size
        if self.lm_head is not None:
            n += self.lm_head.size
        if self.pos_embedding is not None:
            n += self.pos_embedding.size
        return BYTES_PER_WEIGHT * n + self.block_weight_bytes()

    def kept_index_table(self) -> list[dict]:
        return [{"source_block": b.source_block, "heads": [ix.tolist() for ix in b.head_index],
                 "mlp": b.mlp_index.tolist()} for b in self.blocks]


def extract_dense(weights: ModelWeights, config: ModelConfig, genome: Genome | None = None) -> DenseSubnetModel:
    """Gather kept rows of W_Q/K/V/U/G and kept columns of W_O/W_D; drop removed blocks."""
    if genome is not None:
        genome.check_compatible(config)
    hd = config.head_dim
    blocks = []
    for i, blk in enumerate(weights.blocks):
        if genome is None:
            heads = [np.arange(hd) for _ in range(config.n_heads)]
            mlp_index = np.arange(config.d_mlp)
        else:
            bg = genome.blocks[i]
            if not bg.kept:
                continue
            heads = [np.flatnonzero(m) for m in bg.head_masks]
            mlp_index = np.flatnonzero(bg.mlp_mask)
            for h, ix in enumerate(heads):
                if ix.size == 0:
                    raise EmptyHead(f"block {i} head {h} keeps no dimensions")
        rows = np.concatenate([h * hd + ix for h, ix in enumerate(heads)])
        sliced = BlockWeights(
            wq=blk.wq[rows].copy(), wk=blk.wk[rows].copy(), wv=blk.wv[rows].copy(),
            wo=blk.wo[:, rows].copy(),
            wu=blk.wu[mlp_index].copy(), wg=blk.wg[mlp_index].copy(), wd=blk.wd[:, mlp_index].copy(),
            attn_norm=blk.attn_norm.copy(), mlp_norm=blk.mlp_norm.copy(),
        )
        blocks.append(DenseBlock(sliced, heads, mlp_index, i))
    return DenseSubnetModel(
        config, weights.embedding.copy(), weights.final_norm.copy(), blocks,
        None if weights.lm_head is None else weights.lm_head.copy(),
        None if weights.pos_embedding is None else weights.pos_embedding.copy(),
    )


def _dense_block_forward(x, b: DenseBlock, config: ModelConfig, dtype, freqs) -> np.ndarray:
    w = b.weights
    cast = lambda a: a.astype(dtype, copy=False)
    h = rms_norm(x, cast(w.attn_norm), config.rms_eps)
    q, k, v = h @ cast(w.wq).T, h @ cast(w.wk).T, h @ cast(w.wv).T
    scale = 1.0 / np.sqrt(config.head_dim)  # source head_dim, matches the masked path
    outs, start = [], 0
    for ix in b.head_index:
        sl = slice(start, start + len(ix))
        start += len(ix)
        qh, kh, vh = q[:, None, :, sl], k[:, None, :, sl], v[:, None, :, sl]
        if config.rotary:
            f = freqs[ix[0::2] // 2]
            qh, kh = apply_rope(qh, f), apply_rope(kh, f)
        outs.append(causal_attention(qh, kh, vh, scale)[:, 0])
    o = np.concatenate(outs, axis=-1)
    x = x + o @ cast(w.wo).T
    h = rms_norm(x, cast(w.mlp_norm), config.rms_eps)
    a = (h @ cast(w.wu).T) * silu(h @ cast(w.wg).T)
    return x + a @ cast(w.wd).T


def dense_forward(model: DenseSubnetModel, tokens, dtype=np.float32) -> np.ndarray:
    config = model.config
    tokens, single = _as_batch(tokens, config)
    x = embed(model, config, tokens, dtype)
    freqs = rope_freqs(config) if config.rotary else None
    for b in model.blocks:
        x = _dense_block_forward(x, b, config, dtype, freqs)
    x = rms_norm(x, model.final_norm.astype(dtype), config.rms_eps)
    logits = x @ model.output_matrix().astype(dtype, copy=False).T
    return logits[0] if single else logits


def dense_perplexity(model: DenseSubnetModel, eval_set, dtype=np.float32, batch_size: int = 32) -> float:
    from .model import token_nll

    seqs = np.asarray(eval_set)
    total, count = 0.0, 0
    for s in range(0, len(seqs), batch_size):
        chunk = seqs[s:s + batch_size]
        nll = token_nll(dense_forward(model, chunk[:, :-1], dtype), chunk[:, 1:])
        total += float(nll.sum())
        count += nll.size
    if count == 0:
        raise ValueError("evaluation set is empty")
    return float(np.exp(total / count))


@dataclass
class EquivalenceReport:
    max_abs_diff: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_abs_diff <= self.tol


def equivalence_check(weights: ModelWeights, config: ModelConfig, genome: Genome | None,
                      dense: DenseSubnetModel, probes, tol: float = 1e-4, dtype=np.float32) -> EquivalenceReport:
    from .model import forward_logits

    masked = forward_logits(weights, config, probes, genome, dtype=dtype)
    small = dense_forward(dense, probes, dtype=dtype)
    return EquivalenceReport(float(np.max(np.abs(masked.astype(np.float64) - small.astype(np.float64)))), tol)


@dataclass
class BenchResult:
    tokens_per_second: float
    median_seconds: float
    weight_bytes: int
    block_weight_bytes: int
    batch_shape: tuple
    repetitions: int

    def to_dict(self) -> dict:
        return {"tokens_per_second": self.tokens_per_second, "median_seconds": self.median_seconds,
                "weight_bytes": self.weight_bytes, "block_weight_bytes": self.block_weight_bytes,
                "batch_shape": list(self.batch_shape), "repetitions": self.repetitions}


def bench_forward(model: DenseSubnetModel, batch_shape=(8, 128), repetitions: int = 7, seed: int = 0,
                  warmup: int = 1) -> BenchResult:
    B, T = batch_shape
    tokens = np.random.default_rng(seed).integers(0, model.config.vocab_size, size=(B, T))
    for _ in range(warmup):
        dense_forward(model, tokens)
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        dense_forward(model, tokens)
        times.append(time.perf_counter() - t0)
    med = float(np.median(times))
    return BenchResult(B * T / med, med, model.weight_bytes(), model.block_weight_bytes(),
                       (B, T), repetitions)


# ---------------------------------------------------------------------------
# persistence


def save_model(path: str | Path, config: ModelConfig, weights: ModelWeights, metadata: dict | None = None) -> None:
    meta = {"kind": "model", "config": config.to_dict(), **(metadata or {})}
    tensors = {k: np.asarray(v, dtype=np.float32) for k, v in weights.to_tensors().items()}
    container.save_tensors(path, tensors, meta)


def load_model(path: str | Path) -> tuple[ModelConfig, ModelWeights, dict]:
    tensors, meta = container.load_tensors(path)
    if meta.get("kind") != "model":
        raise container.ManifestMismatch(f"{path}: not a model container")
    config = ModelConfig.from_dict(meta["config"])
    return config, ModelWeights.from_tensors(config, tensors), meta


def save_dense(path: str | Path, model: DenseSubnetModel, metadata: dict | None = None) -> None:
    tensors = {"embedding": model.embedding, "final_norm": model.final_norm}
    if model.lm_head is not None:
        tensors["lm_head"] = model.lm_head
    if model.pos_embedding is not None:
        tensors["pos_embedding"] = model.pos_embedding
    for j, b in enumerate(model.blocks):
        for n in BlockWeights.NAMES:
            tensors[f"blocks.{j}.{n}"] = getattr(b.weights, n)
    tensors = {k: np.asarray(v, np.float32) for k, v in tensors.items()}
    meta = {"kind": "dense-subnet", "config": model.config.to_dict(),
            "kept_index": model.kept_index_table(), **(metadata or {})}
    container.save_tensors(path, tensors, meta)


def load_dense(path: str | Path) -> tuple[DenseSubnetModel, dict]:
    tensors, meta = container.load_tensors(path)
    if meta.get("kind") != "dense-subnet":
        raise container.ManifestMismatch(f"{path}: not a dense-subnet container")
    config = ModelConfig.from_dict(meta["config"])
    blocks = []
    for j, entry in enumerate(meta["kept_index"]):
        w = BlockWeights(*(tensors[f"blocks.{j}.{n}"] for n in BlockWeights.NAMES))
        heads = [np.asarray(ix, dtype=np.int64) for ix in entry["heads"]]
        blocks.append(DenseBlock(w, heads, np.asarray(entry["mlp"], dtype=np.int64), entry["source_block"]))
        if w.wq.shape[0] != sum(len(ix) for ix in heads) or w.wu.shape[0] != len(entry["mlp"]):
            raise container.ManifestMismatch(f"block {j}: kept-index table disagrees with tensor shapes")
    model = DenseSubnetModel(config, tensors["embedding"], tensors["final_norm"], blocks,
                             tensors.get("lm_head"), tensors.get("pos_embedding"))
    return model, meta
