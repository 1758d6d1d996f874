"""Toy LLaMA-style decoder (RMSNorm, MHA, gated SiLU MLP) in numpy.

The forward pass optionally takes a genome: attention and MLP activations
are multiplied by the selection masks and dropped blocks pass the residual
stream through untouched.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import numpy as np

TAPS = ("qkv", "o", "ug", "d")
POSITIONAL_MODES = ("absolute", "rotary")


class ShapeMismatch(ValueError):
    pass


class TokenOutOfRange(ValueError):
    pass


class EmptyEvalSet(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 4
    d_model: int = 128
    n_heads: int = 4
    head_dim: int = 32
    d_mlp: int = 256
    vocab_size: int = 257
    max_seq_len: int = 128
    positional_mode: str = "absolute"
    rms_eps: float = 1e-5
    tie_embeddings: bool = False
    rope_base: float = 10000.0

    def __post_init__(self):
        for name in ("depth", "d_model", "n_heads", "head_dim", "d_mlp", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model != self.n_heads * self.head_dim:
            raise ValueError("d_model must equal n_heads * head_dim")
        if self.positional_mode not in POSITIONAL_MODES:
            raise ValueError(f"positional_mode must be one of {POSITIONAL_MODES}")
        if self.positional_mode == "rotary" and self.head_dim % 2:
            raise ValueError("rotary mode needs an even head_dim")

    @property
    def attn_dim(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def rotary(self) -> bool:
        return self.positional_mode == "rotary"

    @property
    def head_unit(self) -> int:
        """Dims per keep/drop decision inside a head (rotary pairs move together)."""
        return 2 if self.rotary else 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class BlockWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    wu: np.ndarray
    wg: np.ndarray
    wd: np.ndarray
    attn_norm: np.ndarray
    mlp_norm: np.ndarray

    NAMES = ("wq", "wk", "wv", "wo", "wu", "wg", "wd", "attn_norm", "mlp_norm")

    def copy(self) -> "BlockWeights":
        return BlockWeights(*(getattr(self, n).copy() for n in self.NAMES))


@dataclass
class ModelWeights:
    embedding: np.ndarray
    final_norm: np.ndarray
    blocks: list[BlockWeights]
    lm_head: np.ndarray | None = None  # None means tied to the embedding
    pos_embedding: np.ndarray | None = None

    def output_matrix(self) -> np.ndarray:
        return self.embedding if self.lm_head is None else self.lm_head

    def copy(self) -> "ModelWeights":
        return ModelWeights(
            self.embedding.copy(),
            self.final_norm.copy(),
            [b.copy() for b in self.blocks],
            None if self.lm_head is None else self.lm_head.copy(),
            None if self.pos_embedding is None else self.pos_embedding.copy(),
        )

    def to_tensors(self) -> dict[str, np.ndarray]:
        out = {"embedding": self.embedding, "final_norm": self.final_norm}
        if self.lm_head is not None:
            out["lm_head"] = self.lm_head
        if self.pos_embedding is not None:
            out["pos_embedding"] = self.pos_embedding
        for i, blk in enumerate(self.blocks):
            for name in BlockWeights.NAMES:
                out[f"blocks.{i}.{name}"] = getattr(blk, name)
        return out

    @classmethod
    def from_tensors(cls, config: ModelConfig, tensors: dict[str, np.ndarray]) -> "ModelWeights":
        blocks = [
            BlockWeights(*(tensors[f"blocks.{i}.{n}"] for n in BlockWeights.NAMES))
            for i in range(config.depth)
        ]
        w = cls(
            embedding=tensors["embedding"],
            final_norm=tensors["final_norm"],
            blocks=blocks,
            lm_head=tensors.get("lm_head"),
            pos_embedding=tensors.get("pos_embedding"),
        )
        check_shapes(w, config)
        return w

    def num_scalars(self) -> int:
        return int(sum(a.size for a in self.to_tensors().values()))


def check_shapes(w: ModelWeights, config: ModelConfig) -> None:
    D, M, P, V = config.d_model, config.attn_dim, config.d_mlp, config.vocab_size
    expected = {"embedding": (V, D), "final_norm": (D,)}
    if len(w.blocks) != config.depth:
        raise ShapeMismatch(f"{len(w.blocks)} blocks, config depth {config.depth}")
    if (w.lm_head is None) != config.tie_embeddings:
        raise ShapeMismatch("lm_head presence disagrees with tie_embeddings")
    if w.lm_head is not None:
        expected["lm_head"] = (V, D)
    if config.positional_mode == "absolute":
        if w.pos_embedding is None:
            raise ShapeMismatch("absolute positional mode needs pos_embedding")
        expected["pos_embedding"] = (config.max_seq_len, D)
    block_shapes = {"wq": (M, D), "wk": (M, D), "wv": (M, D), "wo": (D, M),
                    "wu": (P, D), "wg": (P, D), "wd": (D, P), "attn_norm": (D,), "mlp_norm": (D,)}
    tensors = w.to_tensors()
    for i in range(config.depth):
        for n, s in block_shapes.items():
            expected[f"blocks.{i}.{n}"] = s
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise ShapeMismatch(f"{name}: shape {tensors[name].shape}, expected {shape}")


def init_weights(config: ModelConfig, seed: int = 0, std: float = 0.02) -> ModelWeights:
    """Seeded normal initialization; residual output projections scaled by depth."""
    rng = np.random.default_rng(seed)
    D, M, P, V = config.d_model, config.attn_dim, config.d_mlp, config.vocab_size
    proj_std = std / np.sqrt(2 * config.depth)

    def normal(shape, s=std):
        return (rng.standard_normal(shape) * s).astype(np.float32)

    emb = normal((V, D))
    pos = normal((config.max_seq_len, D)) if config.positional_mode == "absolute" else None
    blocks = []
    for _ in range(config.depth):
        blocks.append(BlockWeights(
            wq=normal((M, D)), wk=normal((M, D)), wv=normal((M, D)), wo=normal((D, M), proj_std),
            wu=normal((P, D)), wg=normal((P, D)), wd=normal((D, P), proj_std),
            attn_norm=np.ones(D, np.float32), mlp_norm=np.ones(D, np.float32),
        ))
    lm_head = None if config.tie_embeddings else normal((V, D))
    return ModelWeights(emb, np.ones(D, np.float32), blocks, lm_head, pos)


# ---------------------------------------------------------------------------
# forward pass


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return x / np.sqrt(ms + eps) * gain


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def rope_freqs(config: ModelConfig) -> np.ndarray:
    """Per-pair angular frequency within one head, length head_dim/2."""
    i = np.arange(config.head_dim // 2, dtype=np.float64)
    return config.rope_base ** (-2.0 * i / config.head_dim)


def apply_rope(x: np.ndarray, freqs: np.ndarray) -> np.ndarray:
    """Rotate consecutive pairs (2i, 2i+1) of the last axis. x: (..., T, 2*len(freqs))."""
    T = x.shape[-2]
    ang = np.arange(T, dtype=np.float64)[:, None] * freqs[None, :]
    cos = np.cos(ang).astype(x.dtype)
    sin = np.sin(ang).astype(x.dtype)
    xe, xo = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos
    return out


def causal_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, scale: float) -> np.ndarray:
    """q, k: (B, H, T, e); v: (B, H, T, f) -> (B, H, T, f)."""
    T = q.shape[-2]
    scores = (q @ np.swapaxes(k, -1, -2)) * q.dtype.type(scale)
    scores = np.where(np.tri(T, dtype=bool), scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    return p @ v


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    B, T, M = x.shape
    return x.reshape(B, T, n_heads, M // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    B, H, T, e = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * e)


Tap = Callable[[int, str, np.ndarray], None]


def block_forward(x, blk: BlockWeights, config: ModelConfig, dtype, attn_mask=None, mlp_mask=None,
                  tap: Tap | None = None, index: int = 0) -> np.ndarray:
    cast = lambda a: a.astype(dtype, copy=False)
    h = rms_norm(x, cast(blk.attn_norm), config.rms_eps)
    if tap is not None:
        tap(index, "qkv", h)
    q = h @ cast(blk.wq).T
    k = h @ cast(blk.wk).T
    v = h @ cast(blk.wv).T
    if attn_mask is not None:
        m = attn_mask.astype(dtype)
        q, k, v = q * m, k * m, v * m
    q, k, v = (_split_heads(t, config.n_heads) for t in (q, k, v))
    if config.rotary:
        f = rope_freqs(config)
        q, k = apply_rope(q, f), apply_rope(k, f)
    o = _merge_heads(causal_attention(q, k, v, 1.0 / np.sqrt(config.head_dim)))
    if tap is not None:
        tap(index, "o", o)
    x = x + o @ cast(blk.wo).T
    h = rms_norm(x, cast(blk.mlp_norm), config.rms_eps)
    if tap is not None:
        tap(index, "ug", h)
    a = (h @ cast(blk.wu).T) * silu(h @ cast(blk.wg).T)
    if mlp_mask is not None:
        a = a * mlp_mask.astype(dtype)
    if tap is not None:
        tap(index, "d", a)
    return x + a @ cast(blk.wd).T


def _as_batch(tokens, config: ModelConfig) -> tuple[np.ndarray, bool]:
    tokens = np.asarray(tokens)
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None, :]
    if tokens.ndim != 2:
        raise ShapeMismatch("tokens must be 1-D or 2-D")
    if tokens.shape[1] > config.max_seq_len:
        raise ShapeMismatch(f"sequence length {tokens.shape[1]} > max_seq_len {config.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise TokenOutOfRange("token id outside vocabulary")
    return tokens.astype(np.int64), single


def embed(weights: ModelWeights, config: ModelConfig, tokens: np.ndarray, dtype) -> np.ndarray:
    x = weights.embedding[tokens].astype(dtype)
    if config.positional_mode == "absolute":
        x = x + weights.pos_embedding[: tokens.shape[1]].astype(dtype)
    return x


def forward_logits(weights: ModelWeights, config: ModelConfig, tokens, genome=None,
                   dtype=np.float32, tap: Tap | None = None) -> np.ndarray:
    """Logits of shape (T, V) for a 1-D token array, (B, T, V) for a batch."""
    tokens, single = _as_batch(tokens, config)
    if genome is not None:
        genome.check_compatible(config)
    x = embed(weights, config, tokens, dtype)
    for i, blk in enumerate(weights.blocks):
        attn_mask = mlp_mask = None
        if genome is not None:
            bg = genome.blocks[i]
            if not bg.kept:
                continue
            attn_mask, mlp_mask = bg.attn_mask, bg.mlp_mask
        x = block_forward(x, blk, config, dtype, attn_mask, mlp_mask, tap=tap, index=i)
    x = rms_norm(x, weights.final_norm.astype(dtype), config.rms_eps)
    logits = x @ weights.output_matrix().astype(dtype, copy=False).T
    return logits[0] if single else logits


def token_nll(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Negative log-likelihood per position (float64)."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
    return lse - picked


def _group_sequences(eval_set) -> list[np.ndarray]:
    if isinstance(eval_set, np.ndarray) and eval_set.ndim == 2:
        return [eval_set]
    seqs = [np.asarray(s) for s in eval_set]
    groups: dict[int, list] = {}
    for s in seqs:
        groups.setdefault(len(s), []).append(s)
    return [np.stack(g) for _, g in sorted(groups.items())]


def mean_nll(weights, config, eval_set, genome=None, dtype=np.float32, batch_size: int = 32) -> float:
    total, count = 0.0, 0
    for group in _group_sequences(eval_set):
        if group.shape[0] == 0:
            continue
        if group.shape[1] < 2:
            raise ValueError("every evaluation sequence needs at least 2 tokens")
        for s in range(0, group.shape[0], batch_size):
            chunk = group[s:s + batch_size]
            logits = forward_logits(weights, config, chunk[:, :-1], genome, dtype)
            nll = token_nll(logits, chunk[:, 1:])
            total += float(nll.sum())
            count += nll.size
    if count == 0:
        raise EmptyEvalSet("evaluation set is empty")
    return total / count


def perplexity(weights, config, eval_set, genome=None, dtype=np.float32) -> float:
    return float(np.exp(mean_nll(weights, config, eval_set, genome, dtype)))


# ---------------------------------------------------------------------------
# parameter counting


def block_param_count(config: ModelConfig, attn_kept: int, mlp_kept: int) -> int:
    D = config.d_model
    return 4 * attn_kept * D + 3 * mlp_kept * D + 2 * D


def unsearched_param_count(config: ModelConfig) -> int:
    D, V = config.d_model, config.vocab_size
    n = V * D + D
    if not config.tie_embeddings:
        n += V * D
    if config.positional_mode == "absolute":
        n += config.max_seq_len * D
    return n


def param_count(config: ModelConfig, genome=None, scope: str = "blocks-only") -> int:
    """Retained weights of the subnet; ``genome=None`` means the dense model."""
    if scope not in ("blocks-only", "full"):
        raise ValueError("scope must be 'blocks-only' or 'full'")
    if genome is None:
        n = config.depth * block_param_count(config, config.attn_dim, config.d_mlp)
    else:
        n = 0
        for bg in genome.blocks:
            if bg.kept:
                n += block_param_count(config, int(bg.attn_mask.sum()), int(bg.mlp_mask.sum()))
    if scope == "full":
        n += unsearched_param_count(config)
    return n


# ---------------------------------------------------------------------------
# Gram statistics


@dataclass
class BlockGrams:
    qkv: np.ndarray
    o: np.ndarray
    ug: np.ndarray
    d: np.ndarray

    def __getitem__(self, tap: str) -> np.ndarray:
        return getattr(self, tap)

    def __add__(self, other: "BlockGrams") -> "BlockGrams":
        return BlockGrams(*(self[t] + other[t] for t in TAPS))


@dataclass
class GramSet:
    """Summed x x^T per block and capture point, from the dense model."""

    blocks: list[BlockGrams]
    tokens: int
    damping: dict = field(default_factory=dict)

    def __add__(self, other: "GramSet") -> "GramSet":
        if len(self.blocks) != len(other.blocks):
            raise ShapeMismatch("GramSets have different depth")
        return GramSet([a + b for a, b in zip(self.blocks, other.blocks)], self.tokens + other.tokens)

    def mean(self, block: int, tap: str) -> np.ndarray:
        """Per-token second moment, the scale ADMM's rho is relative to."""
        return self.blocks[block][tap] / max(self.tokens, 1)

    def to_tensors(self) -> dict[str, np.ndarray]:
        return {f"blocks.{i}.{t}": b[t] for i, b in enumerate(self.blocks) for t in TAPS}

    @classmethod
    def from_tensors(cls, tensors: dict, depth: int, tokens: int, damping=None) -> "GramSet":
        blocks = [BlockGrams(*(np.asarray(tensors[f"blocks.{i}.{t}"], np.float64) for t in TAPS))
                  for i in range(depth)]
        return cls(blocks, tokens, dict(damping or {}))


def capture_grams(weights: ModelWeights, config: ModelConfig, calib, batch_size: int = 16,
                  dtype=np.float32) -> GramSet:
    """Accumulate G = sum x x^T at the four capture points of every block."""
    seqs = calib.sequences if hasattr(calib, "sequences") else np.asarray(calib)
    if len(seqs) == 0:
        raise ValueError("calibration set is empty")
    dims = {"qkv": config.d_model, "o": config.attn_dim, "ug": config.d_model, "d": config.d_mlp}
    acc = [{t: np.zeros((dims[t], dims[t])) for t in TAPS} for _ in range(config.depth)]

    def tap(i, name, x):
        flat = x.reshape(-1, x.shape[-1]).astype(np.float64)
        acc[i][name] += flat.T @ flat

    tokens = 0
    for s in range(0, len(seqs), batch_size):
        chunk = np.asarray(seqs[s:s + batch_size])
        forward_logits(weights, config, chunk, dtype=dtype, tap=tap)
        tokens += chunk.size
    blocks = [BlockGrams(*(0.5 * (a[t] + a[t].T) for t in TAPS)) for a in acc]
    return GramSet(blocks, tokens)
