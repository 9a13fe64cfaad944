"""Tokenization, embedding tables, token-frequency analysis and PCA."""

from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:
    from .data import Dataset

UNK = "<UNK>"
_SPLIT = re.compile(r"[^0-9a-z]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on runs of non-alphanumeric characters."""
    return [t for t in _SPLIT.split(text.lower()) if t]


@dataclass(frozen=True)
class EmbeddingTable:
    vocab: tuple[str, ...]
    vectors: np.ndarray

    def __post_init__(self):
        if self.vectors.shape[0] != len(self.vocab):
            raise ValueError("row count must equal vocab size")
        if not self.vocab or self.vocab[0] != UNK:
            raise ValueError("UNK must be the first vocab entry")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("embedding vectors must be finite")

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    def lookup(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.vocab)}


class EmbeddingParseError(ValueError):
    pass


def load_embeddings(path) -> EmbeddingTable:
    """Read a word-vector text file: a ``V d`` header, then ``token v1 .. vd`` lines."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise EmbeddingParseError(f"{path}:1: empty file")
    header = lines[0].split()
    try:
        if len(header) != 2:
            raise ValueError
        n_words, d = int(header[0]), int(header[1])
    except ValueError:
        raise EmbeddingParseError(f"{path}:1: header must be 'V d', got {lines[0]!r}") from None
    if n_words < 0 or d < 1:
        raise EmbeddingParseError(f"{path}:1: invalid header {lines[0]!r}")

    vocab = [UNK]
    rows = [np.zeros(d)]
    body = [(i, ln) for i, ln in enumerate(lines[1:], 2) if ln.strip()]
    if len(body) != n_words:
        raise EmbeddingParseError(f"{path}: header declares {n_words} vectors, found {len(body)}")
    for lineno, line in body:
        parts = line.split()
        if len(parts) != d + 1:
            raise EmbeddingParseError(
                f"{path}:{lineno}: expected {d} values, got {len(parts) - 1}"
            )
        try:
            # float() is locale-independent
            vec = np.array([float(p) for p in parts[1:]])
        except ValueError:
            raise EmbeddingParseError(f"{path}:{lineno}: unparseable value") from None
        if not np.all(np.isfinite(vec)):
            raise EmbeddingParseError(f"{path}:{lineno}: non-finite value")
        vocab.append(parts[0])
        rows.append(vec)
    return EmbeddingTable(tuple(vocab), np.vstack(rows))


def save_embeddings(path, table: EmbeddingTable) -> None:
    lines = [f"{len(table.vocab) - 1} {table.d}"]
    for tok, vec in zip(table.vocab[1:], table.vectors[1:]):
        lines.append(tok + " " + " ".join(repr(float(v)) for v in vec))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _token_seed(token: str, seed: int) -> int:
    digest = hashlib.sha256(f"{seed}\x00{token}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def synth_embeddings(vocab: Sequence[str], d: int, seed: int = 0) -> EmbeddingTable:
    """Deterministic unit-norm vectors, one independent generator per token."""
    if d < 1:
        raise ValueError(f"embedding dimension must be >= 1, got {d}")
    words = [t for t in vocab if t != UNK]
    vectors = np.zeros((len(words) + 1, d))
    for i, tok in enumerate(words, 1):
        v = np.random.default_rng(_token_seed(tok, seed)).standard_normal(d)
        vectors[i] = v / np.linalg.norm(v)
    return EmbeddingTable((UNK, *words), vectors)


@dataclass(frozen=True)
class TokenFrequencyRow:
    token: str
    pos_freq: float
    neg_freq: float
    rel_diff: float


REL_EPS = 1e-12


def relative_difference(p: float, n: float) -> float:
    return abs(p - n) / max(p, n, REL_EPS)


def token_frequency_report(
    ds: Dataset, min_rel_diff: float = 0.5, min_support: int = 5
) -> list[TokenFrequencyRow]:
    """Per-class document frequencies of tokens that differ strongly between classes."""
    n_pos, n_neg = ds.class_counts()
    if n_pos == 0 or n_neg == 0:
        raise ValueError("token frequency report needs both classes present")
    pos_df, neg_df = Counter(), Counter()
    for lr in ds.records:
        (pos_df if lr.label == 1 else neg_df).update(set(lr.record.text_tokens()))

    rows = []
    for tok in pos_df.keys() | neg_df.keys():
        if pos_df[tok] + neg_df[tok] < min_support:
            continue
        p, n = pos_df[tok] / n_pos, neg_df[tok] / n_neg
        rd = relative_difference(p, n)
        if rd > min_rel_diff:
            rows.append(TokenFrequencyRow(tok, p, n, rd))
    rows.sort(key=lambda r: (-r.rel_diff, r.token))
    return rows


def pca(matrix, k: int = 2) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Principal components of the rows of ``matrix``.

    Returns ``(coords, components, explained_variance)`` where ``components``
    is ``k x d``, each scaled to unit length and signed so its largest
    magnitude loading is positive.
    """
    x = np.asarray(matrix, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("PCA needs a 2-D matrix with at least 2 rows")
    n, d = x.shape
    if not 1 <= k <= d:
        raise ValueError(f"k must be in 1..{d}, got {k}")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    if np.max(np.abs(centered)) <= 1e-12 * max(1.0, np.max(np.abs(x))):
        return np.zeros((n, k)), np.eye(d)[:k], np.zeros(k)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:k]
    comps = evecs[:, order].T
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    return centered @ comps.T, comps, np.clip(evals[order], 0.0, None)


def pca_project(matrix, k: int = 2) -> np.ndarray:
    return pca(matrix, k)[0]
