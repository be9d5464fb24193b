"""Skip-gram word embeddings with negative sampling, trained in numpy.

The trainer follows the classic recipe: dynamic window, unigram^0.75 negative
distribution, frequent-word subsampling, and a linearly decaying learning
rate. Updates run over chunks of (center, context) pairs so the hot path is
vectorized. With a fixed seed and a single worker the result is bit-wise
reproducible; with several workers updates are racy by design (hogwild) and
only statistically equivalent.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Corpus, Vocabulary
from .errors import InputError, InvariantError

log = logging.getLogger(__name__)

_CHUNK = 4096
_LR_FLOOR_FACTOR = 1e-4


@dataclass
class EmbeddingMatrix:
    """One vector per regular vocabulary id (specials have no rows)."""

    vocab: Vocabulary
    vectors: np.ndarray
    _norms: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.vectors.shape[0] != self.vocab.n_terms:
            raise InvariantError(
                f"matrix has {self.vectors.shape[0]} rows for "
                f"{self.vocab.n_terms} vocabulary terms")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def norms(self) -> np.ndarray:
        if self._norms is None:
            self._norms = np.linalg.norm(self.vectors, axis=1)
        return self._norms

    def vector(self, term: str) -> np.ndarray:
        tid = self.vocab.term_id(term)
        if tid is None:
            raise InputError(f"term {term!r} not in vocabulary")
        return self.vectors[tid]


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise InvariantError("undefined similarity: zero vector")
    return float(np.dot(u, v) / (nu * nv))


def nearest(matrix: EmbeddingMatrix, query: str | np.ndarray, k: int,
            exclude: Sequence[str] = ()) -> list[tuple[str, float]]:
    """Top-k terms by cosine similarity, ties broken by id ascending.

    The query term itself and anything in `exclude` never appear in the
    result. Returns fewer than k entries when the vocabulary is exhausted.
    """
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    vocab = matrix.vocab
    skip = set()
    if isinstance(query, str):
        qid = vocab.term_id(query)
        if qid is None:
            raise InputError(f"query term {query!r} not in vocabulary")
        qv = matrix.vectors[qid].astype(np.float64)
        skip.add(qid)
    else:
        qv = np.asarray(query, dtype=np.float64)
        if qv.shape != (matrix.dim,):
            raise InputError(f"query vector must have shape ({matrix.dim},)")
    qn = np.linalg.norm(qv)
    if qn == 0.0:
        raise InvariantError("undefined similarity: zero query vector")
    for t in exclude:
        tid = vocab.term_id(t)
        if tid is not None:
            skip.add(tid)
    norms = matrix.norms
    valid = norms > 0.0
    scores = np.full(vocab.n_terms, -np.inf)
    scores[valid] = matrix.vectors[valid].astype(np.float64) @ qv / (norms[valid] * qn)
    if skip:
        scores[list(skip)] = -np.inf
    # lexsort: last key is primary, so sort by -score then id.
    order = np.lexsort((np.arange(vocab.n_terms), -scores))
    out = []
    for tid in order[: k + len(skip)]:
        if scores[tid] == -np.inf:
            break
        out.append((vocab.terms[tid], float(scores[tid])))
        if len(out) == k:
            break
    return out


def mean_vector(matrix: EmbeddingMatrix, terms: Sequence[str]) -> np.ndarray:
    if not terms:
        raise InvariantError("mean_vector of an empty term list")
    rows = []
    for t in terms:
        tid = matrix.vocab.term_id(t)
        if tid is None:
            raise InputError(f"term {t!r} not in vocabulary")
        rows.append(matrix.vectors[tid])
    return np.mean(np.asarray(rows, dtype=np.float64), axis=0)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # clipped so exp never overflows; saturation is exact in float64 anyway
    return 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))


class _SgnsTrainer:
    def __init__(self, vocab: Vocabulary, dim: int, negatives: int, seed: int):
        self.n = vocab.n_terms
        self.dim = dim
        self.negatives = negatives
        rng = np.random.default_rng(seed)
        self.w_in = ((rng.random((self.n, dim)) - 0.5) / dim).astype(np.float32)
        self.w_out = np.zeros((self.n, dim), dtype=np.float32)
        counts = np.array([vocab.counts[t] for t in vocab.terms], dtype=np.float64)
        self.neg_cum = np.cumsum(counts ** 0.75)
        self.total_count = counts.sum()
        self.counts = counts

    def sample_negatives(self, rng: np.random.Generator, size: int) -> np.ndarray:
        draws = rng.random(size) * self.neg_cum[-1]
        return np.searchsorted(self.neg_cum, draws).astype(np.int64)

    def update_chunk(self, rng: np.random.Generator, centers: np.ndarray,
                     contexts: np.ndarray, lr: float) -> None:
        m = centers.shape[0]
        k = self.negatives
        negs = self.sample_negatives(rng, m * k).reshape(m, k)
        vc = self.w_in[centers].astype(np.float64)
        uo = self.w_out[contexts].astype(np.float64)
        un = self.w_out[negs.reshape(-1)].astype(np.float64).reshape(m, k, self.dim)
        g_pos = (_sigmoid(np.einsum("md,md->m", vc, uo)) - 1.0) * lr
        g_neg = _sigmoid(np.einsum("mkd,md->mk", un, vc)) * lr
        # a negative that collides with the true context must not cancel it
        g_neg *= negs != contexts[:, None]
        d_vc = g_pos[:, None] * uo + np.einsum("mk,mkd->md", g_neg, un)
        np.add.at(self.w_in, centers, -d_vc.astype(np.float32))
        np.add.at(self.w_out, contexts, -(g_pos[:, None] * vc).astype(np.float32))
        d_un = (g_neg[:, :, None] * vc[:, None, :]).astype(np.float32)
        np.add.at(self.w_out, negs.reshape(-1), -d_un.reshape(-1, self.dim))


def _train_shard(trainer: _SgnsTrainer, sequences: list[np.ndarray],
                 keep_prob: np.ndarray | None, window: int, epochs: int,
                 lr0: float, seed: int, progress_total: int) -> None:
    rng = np.random.default_rng(seed)
    lr_floor = lr0 * _LR_FLOOR_FACTOR
    processed = 0
    centers: list[np.ndarray] = []
    contexts: list[np.ndarray] = []
    buffered = 0

    def flush(lr: float) -> None:
        nonlocal buffered
        if not buffered:
            return
        c = np.concatenate(centers)
        o = np.concatenate(contexts)
        trainer.update_chunk(rng, c, o, lr)
        centers.clear()
        contexts.clear()
        buffered = 0

    for _ in range(epochs):
        for seq in sequences:
            processed += seq.shape[0]
            if keep_prob is not None:
                seq = seq[rng.random(seq.shape[0]) < keep_prob[seq]]
            n = seq.shape[0]
            if n < 2:
                continue
            spans = rng.integers(1, window + 1, size=n)
            for i in range(n):
                b = spans[i]
                lo = max(0, i - b)
                ctx = np.concatenate([seq[lo:i], seq[i + 1: i + 1 + b]])
                if ctx.shape[0] == 0:
                    continue
                centers.append(np.full(ctx.shape[0], seq[i], dtype=np.int64))
                contexts.append(ctx)
                buffered += ctx.shape[0]
            if buffered >= _CHUNK:
                lr = max(lr_floor, lr0 * (1.0 - processed / progress_total))
                flush(lr)
        lr = max(lr_floor, lr0 * (1.0 - processed / progress_total))
        flush(lr)


def train_embeddings(corpus: Corpus, vocab: Vocabulary, dim: int = 100,
                     window: int = 5, negatives: int = 5, epochs: int = 5,
                     lr: float = 0.025, subsample: float = 1e-3,
                     seed: int = 0, workers: int = 1) -> EmbeddingMatrix:
    """Train skip-gram vectors for every regular vocabulary term.

    Tokens outside the vocabulary (and the specials they encode to) are
    removed from each sentence before windowing, exactly as rare words are in
    the reference implementation.
    """
    if vocab.n_terms == 0:
        raise InvariantError("empty vocabulary: nothing to train")
    if min(dim, window, negatives, epochs) < 1:
        raise InputError("dim, window, negatives, and epochs must all be >= 1")
    if lr <= 0:
        raise InputError("learning rate must be positive")
    trainer = _SgnsTrainer(vocab, dim, negatives, seed)
    n = vocab.n_terms
    sequences = []
    for s in corpus:
        ids = np.array([i for i in vocab.encode(s.tokens) if i < n], dtype=np.int64)
        if ids.shape[0] >= 2:
            sequences.append(ids)
    if not sequences:
        raise InvariantError("no trainable sentences (all tokens out of vocabulary?)")
    keep_prob = None
    if subsample > 0:
        freq = trainer.counts / trainer.total_count
        with np.errstate(divide="ignore", invalid="ignore"):
            keep = (np.sqrt(freq / subsample) + 1.0) * subsample / freq
        keep_prob = np.minimum(1.0, keep)
    total = sum(s.shape[0] for s in sequences) * epochs + 1
    if workers <= 1:
        _train_shard(trainer, sequences, keep_prob, window, epochs, lr, seed + 1, total)
    else:
        shards = [sequences[w::workers] for w in range(workers)]
        threads = [
            threading.Thread(
                target=_train_shard,
                args=(trainer, shard, keep_prob, window, epochs, lr, seed + 1 + w,
                      max(1, sum(s.shape[0] for s in shard) * epochs)))
            for w, shard in enumerate(shards) if shard
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    return EmbeddingMatrix(vocab, trainer.w_in)


def save_embeddings(matrix: EmbeddingMatrix, path: str | Path) -> None:
    """Text format: header "dim N vocab V", then one term and N floats per line."""
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(f"dim {matrix.dim} vocab {matrix.vocab.n_terms}\n")
        for tid, term in enumerate(matrix.vocab.terms):
            vals = " ".join(repr(float(x)) for x in matrix.vectors[tid])
            fh.write(f"{term} {vals}\n")


def load_embeddings(path: str | Path, vocab: Vocabulary) -> EmbeddingMatrix:
    path = Path(path)
    if not path.exists():
        raise InputError(f"embedding file not found: {path}")
    with path.open("r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 4 or header[0] != "dim" or header[2] != "vocab":
            raise InputError(f"bad embedding header in {path}")
        dim, n = int(header[1]), int(header[3])
        if n != vocab.n_terms:
            raise InvariantError(
                f"embedding file has {n} terms, vocabulary has {vocab.n_terms}")
        vectors = np.zeros((n, dim), dtype=np.float32)
        seen = np.zeros(n, dtype=bool)
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            term = parts[0]
            tid = vocab.term_id(term)
            if tid is None:
                raise InvariantError(f"embedding term {term!r} not in vocabulary")
            if len(parts) != dim + 1:
                raise InvariantError(f"wrong vector length for {term!r} in {path}")
            vectors[tid] = np.array([float(x) for x in parts[1:]], dtype=np.float32)
            seen[tid] = True
    if not seen.all():
        missing = vocab.terms[int(np.flatnonzero(~seen)[0])]
        raise InvariantError(f"embedding file {path} is missing {missing!r}")
    return EmbeddingMatrix(vocab, vectors)
