"""Corpus ingestion, byte tokenization, calibration and evaluation sampling."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BOS = 256
VOCAB_SIZE = 257
TOKENIZER_ID = "bytes-v1"

TOKEN_MAGIC = b"TOKS"
TOKEN_VERSION = 1
_TOKEN_HEADER = struct.Struct("<4sBIQ")


class CorpusError(ValueError):
    pass


class BadMagic(CorpusError):
    pass


class TruncatedFile(CorpusError):
    pass


class IdOutOfRange(CorpusError):
    pass


class CorpusTooShort(CorpusError):
    pass


@dataclass
class Corpus:
    name: str
    ids: np.ndarray
    vocab_size: int = VOCAB_SIZE
    tokenizer_id: str = TOKENIZER_ID

    def __post_init__(self):
        self.ids = np.ascontiguousarray(self.ids, dtype=np.uint32)
        if self.ids.size == 0:
            raise CorpusError("corpus is empty")
        if int(self.ids.max()) >= self.vocab_size:
            raise IdOutOfRange(f"id {int(self.ids.max())} >= vocab {self.vocab_size}")

    def __len__(self) -> int:
        return int(self.ids.size)

    def split(self, heldout_fraction: float = 0.1) -> tuple["Corpus", "Corpus"]:
        """Contiguous train/held-out split; the held-out part is the tail."""
        cut = int(round(len(self) * (1.0 - heldout_fraction)))
        cut = min(max(cut, 1), len(self) - 1)
        return (
            Corpus(f"{self.name}:train", self.ids[:cut], self.vocab_size, self.tokenizer_id),
            Corpus(f"{self.name}:heldout", self.ids[cut:], self.vocab_size, self.tokenizer_id),
        )


@dataclass
class CalibrationSet:
    sequences: np.ndarray  # (n, seq_len) int64
    seed: int
    source: str
    starts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.sequences = np.asarray(self.sequences, dtype=np.int64)
        if self.sequences.ndim != 2:
            raise ValueError("calibration sequences must be a 2-D array")

    @property
    def count(self) -> int:
        return int(self.sequences.shape[0])

    @property
    def seq_len(self) -> int:
        return int(self.sequences.shape[1])

    def __len__(self) -> int:
        return self.count


def tokenize_bytes(text: bytes | str, name: str = "text") -> Corpus:
    if isinstance(text, str):
        text = text.encode("utf-8")
    ids = np.empty(len(text) + 1, dtype=np.uint32)
    ids[0] = BOS
    ids[1:] = np.frombuffer(text, dtype=np.uint8)
    return Corpus(name, ids)


def detokenize(ids) -> bytes:
    ids = np.asarray(ids)
    return ids[ids != BOS].astype(np.uint8).tobytes()


def load_text(path: str | Path) -> Corpus:
    path = Path(path)
    return tokenize_bytes(path.read_bytes(), name=path.stem)


def save_pretokenized(corpus: Corpus, path: str | Path) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_TOKEN_HEADER.pack(TOKEN_MAGIC, TOKEN_VERSION, corpus.vocab_size, len(corpus)))
        fh.write(corpus.ids.astype("<u4").tobytes())


def load_pretokenized(path: str | Path) -> Corpus:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4 or raw[:4] != TOKEN_MAGIC:
        raise BadMagic(f"{path}: not a token file")
    if len(raw) < _TOKEN_HEADER.size:
        raise TruncatedFile(f"{path}: header truncated")
    _, version, vocab, count = _TOKEN_HEADER.unpack_from(raw)
    if version != TOKEN_VERSION:
        raise CorpusError(f"{path}: unsupported token file version {version}")
    body = raw[_TOKEN_HEADER.size:]
    if len(body) < 4 * count:
        raise TruncatedFile(f"{path}: expected {count} ids, file holds {len(body) // 4}")
    ids = np.frombuffer(body, dtype="<u4", count=count).astype(np.uint32)
    if count and int(ids.max()) >= vocab:
        raise IdOutOfRange(f"{path}: id {int(ids.max())} >= vocab {vocab}")
    return Corpus(path.stem, ids, vocab_size=vocab)


def sample_windows(corpus: Corpus, n: int, seq_len: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if seq_len < 1 or n < 1:
        raise ValueError("n and seq_len must be positive")
    if len(corpus) < seq_len:
        raise CorpusTooShort(f"corpus has {len(corpus)} tokens, need {seq_len}")
    rng = np.random.default_rng(seed)
    starts = rng.integers(0, len(corpus) - seq_len + 1, size=n)
    windows = np.stack([corpus.ids[s:s + seq_len] for s in starts]).astype(np.int64)
    return windows, starts.astype(np.int64)


def sample_calibration(corpus: Corpus, n: int = 128, seq_len: int = 128, seed: int = 0) -> CalibrationSet:
    """``n`` uniformly random contiguous windows of ``seq_len`` tokens."""
    windows, starts = sample_windows(corpus, n, seq_len, seed)
    return CalibrationSet(windows, seed=seed, source=corpus.name, starts=starts)


def sample_eval_set(corpus: Corpus, n: int = 8, seq_len: int = 128, seed: int = 1) -> np.ndarray:
    """Frozen fitness batch; sampled once per search run."""
    windows, _ = sample_windows(corpus, n, seq_len, seed)
    return windows


def heldout_windows(corpus: Corpus, seq_len: int, max_windows: int | None = None) -> np.ndarray:
    """Non-overlapping consecutive windows covering the corpus."""
    n = len(corpus) // seq_len
    if n == 0:
        raise CorpusTooShort(f"corpus has {len(corpus)} tokens, need {seq_len}")
    if max_windows is not None:
        n = min(n, max_windows)
    return corpus.ids[: n * seq_len].astype(np.int64).reshape(n, seq_len)
