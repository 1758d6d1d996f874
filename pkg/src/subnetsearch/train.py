"""Minimal Adam trainer that produces the toy base model.

Torch is used only for autograd; the network is the same computation as
``model.forward_logits`` and weights go back to numpy afterwards.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from .model import ModelConfig, ModelWeights, init_weights, rope_freqs

log = logging.getLogger(__name__)


class DivergedLoss(ArithmeticError):
    pass


@dataclass(frozen=True)
class TrainSettings:
    steps: int = 1000
    batch: int = 16
    lr: float = 3e-3
    seed: int = 0
    warmup: int = 20
    log_every: int = 50


def _to_torch(w: ModelWeights) -> dict[str, torch.Tensor]:
    return {k: torch.tensor(np.asarray(v, np.float32), requires_grad=True) for k, v in w.to_tensors().items()}


def _rms(x, g, eps):
    return x * torch.rsqrt((x * x).mean(-1, keepdim=True) + eps) * g


def _rope(x, freqs):
    T = x.shape[-2]
    ang = torch.arange(T, dtype=torch.float64)[:, None] * freqs[None, :]
    cos, sin = torch.cos(ang).float(), torch.sin(ang).float()
    xe, xo = x[..., 0::2], x[..., 1::2]
    return torch.stack((xe * cos - xo * sin, xe * sin + xo * cos), dim=-1).flatten(-2)


def torch_forward(p: dict[str, torch.Tensor], config: ModelConfig, tokens: torch.Tensor) -> torch.Tensor:
    B, T = tokens.shape
    H, e = config.n_heads, config.head_dim
    x = p["embedding"][tokens]
    if config.positional_mode == "absolute":
        x = x + p["pos_embedding"][:T]
    causal = torch.ones(T, T, dtype=torch.bool).tril()
    freqs = torch.tensor(rope_freqs(config)) if config.rotary else None
    for i in range(config.depth):
        g = lambda n: p[f"blocks.{i}.{n}"]
        h = _rms(x, g("attn_norm"), config.rms_eps)
        q, k, v = (torch.matmul(h, g(n).T).view(B, T, H, e).transpose(1, 2) for n in ("wq", "wk", "wv"))
        if freqs is not None:
            q, k = _rope(q, freqs), _rope(k, freqs)
        s = (q @ k.transpose(-1, -2)) / math.sqrt(e)
        s = s.masked_fill(~causal, float("-inf"))
        o = (torch.softmax(s, dim=-1) @ v).transpose(1, 2).reshape(B, T, H * e)
        x = x + o @ g("wo").T
        h = _rms(x, g("mlp_norm"), config.rms_eps)
        x = x + ((h @ g("wu").T) * torch.nn.functional.silu(h @ g("wg").T)) @ g("wd").T
    x = _rms(x, p["final_norm"], config.rms_eps)
    out = p["embedding"] if config.tie_embeddings else p["lm_head"]
    return x @ out.T


def train_toy_lm(config: ModelConfig, corpus_ids: np.ndarray, settings: TrainSettings = TrainSettings(),
                 seq_len: int | None = None, history: list | None = None) -> ModelWeights:
    """Cross-entropy training on random windows of ``corpus_ids``.

    Returns the seeded initialization untouched when ``settings.steps == 0``.
    """
    seq_len = seq_len or config.max_seq_len
    ids = np.asarray(corpus_ids, dtype=np.int64)
    if ids.size < seq_len + 1:
        raise ValueError(f"corpus has {ids.size} tokens, need at least {seq_len + 1}")
    weights = init_weights(config, settings.seed)
    if settings.steps == 0:
        return weights

    torch.manual_seed(settings.seed)
    torch.use_deterministic_algorithms(True)
    params = _to_torch(weights)
    opt = torch.optim.Adam(params.values(), lr=settings.lr, betas=(0.9, 0.95))
    rng = np.random.default_rng(settings.seed + 1)

    def lr_at(step):
        if step < settings.warmup:
            return settings.lr * (step + 1) / settings.warmup
        frac = (step - settings.warmup) / max(1, settings.steps - settings.warmup)
        return settings.lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * frac)))

    for step in range(settings.steps):
        starts = rng.integers(0, ids.size - seq_len, size=settings.batch)
        batch = torch.from_numpy(np.stack([ids[s:s + seq_len + 1] for s in starts]))
        logits = torch_forward(params, config, batch[:, :-1])
        loss = torch.nn.functional.cross_entropy(logits.reshape(-1, config.vocab_size), batch[:, 1:].reshape(-1))
        if not torch.isfinite(loss):
            raise DivergedLoss(f"non-finite loss at step {step}")
        for group in opt.param_groups:
            group["lr"] = lr_at(step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if history is not None:
            history.append(loss.item())
        if settings.log_every and step % settings.log_every == 0:
            log.info("step %d loss %.4f", step, loss.item())

    tensors = {k: v.detach().numpy().astype(np.float32) for k, v in params.items()}
    return ModelWeights.from_tensors(config, tensors)
