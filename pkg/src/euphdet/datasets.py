"""Derived datasets: the planted-euphemism benchmark, the coarse filter's
training set, the fine-grained masked corpus, and a synthetic corpus
generator that makes the whole pipeline verifiable at desk scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import Corpus, Sentence, Vocabulary
from .embeddings import EmbeddingMatrix, mean_vector, nearest
from .errors import InputError, InvariantError
from .index import InvertedIndex, build_inverted_index, postings_sentences


@dataclass(frozen=True)
class MaskedSample:
    """A sentence with one or more positions replaced by the mask id.

    target_ids holds the original id for each masked position, in the same
    order as mask_positions. label is 1/0 for the coarse classifier and None
    for fine-grained masked-LM samples.
    """

    sentence_id: int
    token_ids: tuple[int, ...]
    mask_positions: tuple[int, ...]
    target_ids: tuple[int, ...]
    label: int | None = None

    def __post_init__(self):
        if not self.mask_positions:
            raise InvariantError("a masked sample needs at least one mask")
        if len(self.mask_positions) != len(self.target_ids):
            raise InvariantError("one target per masked position")
        if len(set(self.mask_positions)) != len(self.mask_positions):
            raise InvariantError("duplicate mask position")
        if any(p < 0 or p >= len(self.token_ids) for p in self.mask_positions):
            raise InvariantError("mask position outside the sentence")

    def restore(self) -> tuple[int, ...]:
        """The original token ids, with every masked slot filled back in."""
        toks = list(self.token_ids)
        for pos, tid in zip(self.mask_positions, self.target_ids):
            toks[pos] = tid
        return tuple(toks)


def save_samples(samples: Sequence[MaskedSample], vocab: Vocabulary,
                 path: str | Path) -> None:
    """JSON lines; the text field is space-joined tokens with the literal mask
    symbol at masked slots, and targets are stored as terms."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for s in samples:
            row = {
                "id": s.sentence_id,
                "text": " ".join(vocab.id_term(i) for i in s.token_ids),
                "mask_positions": list(s.mask_positions),
                "targets": [vocab.id_term(t) for t in s.target_ids],
                "label": s.label,
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_samples(path: str | Path, vocab: Vocabulary) -> list[MaskedSample]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"sample file not found: {path}")
    out = []
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            tokens = row["text"].split(" ")
            positions = tuple(row["mask_positions"])
            ids = vocab.encode(tokens)
            targets = []
            for pos, term in zip(positions, row["targets"]):
                ids[pos] = vocab.mask_id
                tid = vocab.term_id(term)
                if tid is None:
                    raise InvariantError(f"target term {term!r} not in vocabulary")
                targets.append(tid)
            out.append(MaskedSample(int(row["id"]), tuple(ids), positions,
                                    tuple(targets), row.get("label")))
    return out


class GoldLabels:
    """Ground truth for planted terms: term -> originating seed and sites."""

    def __init__(self, sites: dict[str, list[tuple[int, int]]],
                 seed_of: dict[str, str]):
        if set(sites) != set(seed_of):
            raise InvariantError("gold sites and seed map disagree on terms")
        self.sites = {t: sorted(p) for t, p in sites.items()}
        self.seed_of = dict(seed_of)

    @property
    def terms(self) -> list[str]:
        return sorted(self.sites)

    def all_sites(self) -> set[tuple[int, int]]:
        out: set[tuple[int, int]] = set()
        for p in self.sites.values():
            out.update(p)
        return out

    def total_occurrences(self) -> int:
        return sum(len(p) for p in self.sites.values())

    def save(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            for term in self.terms:
                row = {"term": term, "seed": self.seed_of[term],
                       "sites": [list(s) for s in self.sites[term]]}
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "GoldLabels":
        path = Path(path)
        if not path.exists():
            raise InputError(f"gold label file not found: {path}")
        sites: dict[str, list[tuple[int, int]]] = {}
        seed_of: dict[str, str] = {}
        with path.open("r", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                row = json.loads(line)
                sites[row["term"]] = [tuple(s) for s in row["sites"]]
                seed_of[row["term"]] = row["seed"]
        return cls(sites, seed_of)


# ---------------------------------------------------------------------------
# deterministic word minting (novel planted terms, template euphemisms)

_ONSETS = ("b", "br", "ch", "cl", "d", "dr", "f", "fl", "g", "gr", "h", "j",
           "k", "kr", "l", "m", "n", "p", "pl", "pr", "r", "s", "sk", "sl",
           "sn", "st", "t", "tr", "v", "w", "z")
_VOWELS = ("a", "e", "i", "o", "u", "ai", "ea", "io", "ou")
_CODAS = ("", "", "l", "m", "n", "r", "s", "t", "x", "nd", "rk", "sh")


def mint_terms(rng: np.random.Generator, count: int,
               taken: Iterable[str] = ()) -> list[str]:
    """Deterministically invent pronounceable lowercase words not in `taken`."""
    seen = set(taken)
    out: list[str] = []
    guard = 0
    while len(out) < count:
        guard += 1
        if guard > 100000:
            raise InvariantError("could not mint enough distinct terms")
        n_syll = int(rng.integers(2, 4))
        word = "".join(
            _ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
            + (_CODAS[rng.integers(len(_CODAS))] if s == n_syll - 1 else "")
            for s in range(n_syll))
        if word in seen or len(word) < 4:
            continue
        seen.add(word)
        out.append(word)
    return out


# ---------------------------------------------------------------------------
# planted benchmark

def plant_impromptu(corpus: Corpus, seeds: Sequence[str],
                    n_terms_per_seed: int = 2, occ_per_term: int = 5,
                    rng: np.random.Generator | None = None
                    ) -> tuple[Corpus, GoldLabels]:
    """Replace some seed occurrences with freshly minted novel terms.

    For every seed, n_terms_per_seed new out-of-vocabulary terms are invented;
    each one takes over the seed slot in occ_per_term randomly chosen distinct
    sentences, so the novel terms inherit the seed's contexts exactly. Returns
    the modified corpus plus the gold record of every planted site. Sentence
    count, per-sentence lengths, and ids are untouched.
    """
    if rng is None:
        raise InputError("plant_impromptu needs an rng")
    if n_terms_per_seed < 1 or occ_per_term < 1:
        raise InputError("n_terms_per_seed and occ_per_term must be >= 1")
    by_sid: dict[str, dict[int, list[int]]] = {s: {} for s in seeds}
    for sent in corpus:
        for pos, tok in enumerate(sent.tokens):
            if tok in by_sid:
                by_sid[tok].setdefault(sent.id, []).append(pos)
    need = n_terms_per_seed * occ_per_term
    taken = corpus.terms() | set(seeds)
    novel_by_seed: dict[str, list[str]] = {}
    for seed in seeds:
        novel = mint_terms(rng, n_terms_per_seed, taken)
        taken.update(novel)
        novel_by_seed[seed] = novel
    replacements: dict[int, list[tuple[int, str]]] = {}
    sites: dict[str, list[tuple[int, int]]] = {}
    seed_of: dict[str, str] = {}
    for seed in seeds:
        sids = sorted(by_sid[seed])
        if len(sids) < need:
            raise InvariantError(
                f"seed {seed!r} occurs in {len(sids)} sentences, "
                f"need {need} to plant")
        chosen = rng.permutation(np.array(sids, dtype=np.int64))[:need]
        for i, term in enumerate(novel_by_seed[seed]):
            seed_of[term] = seed
            sites[term] = []
            for sid in chosen[i * occ_per_term: (i + 1) * occ_per_term]:
                sid = int(sid)
                positions = by_sid[seed][sid]
                pos = int(positions[rng.integers(len(positions))])
                replacements.setdefault(sid, []).append((pos, term))
                sites[term].append((sid, pos))
    new_sentences = []
    for sent in corpus:
        reps = replacements.get(sent.id)
        if reps:
            toks = list(sent.tokens)
            for pos, term in reps:
                toks[pos] = term
            sent = replace(sent, tokens=tuple(toks))
        new_sentences.append(sent)
    return Corpus(new_sentences), GoldLabels(sites, seed_of)


# ---------------------------------------------------------------------------
# coarse and fine dataset builders

def build_coarse_dataset(corpus: Corpus, matrix: EmbeddingMatrix,
                         seeds: Sequence[str], top_n: int = 100,
                         rng: np.random.Generator | None = None,
                         index: InvertedIndex | None = None
                         ) -> tuple[list[MaskedSample], list[MaskedSample]]:
    """Training data for the coarse filter.

    Positives: one sample per occurrence of any term in the union of each
    seed's top_n embedding neighbors, with that occurrence masked (label 1).
    Negatives: an equal number of distinct candidate-free sentences, each with
    one uniformly random token masked (label 0). Shuffled, then split 80/20.
    """
    if rng is None:
        raise InputError("build_coarse_dataset needs an rng")
    vocab = matrix.vocab
    for s in seeds:
        if s not in vocab:
            raise InputError(f"seed {s!r} not in vocabulary")
    if index is None:
        index = build_inverted_index(corpus)
    candidates: set[str] = set()
    for s in seeds:
        candidates.update(t for t, _ in nearest(matrix, s, top_n))
    positives: list[MaskedSample] = []
    for term in sorted(candidates):
        for sid, pos in index.postings_for(term):
            ids = vocab.encode(corpus.sentence(sid).tokens)
            target = ids[pos]
            ids[pos] = vocab.mask_id
            positives.append(MaskedSample(sid, tuple(ids), (pos,), (target,), 1))
    cand_sids = postings_sentences(index, candidates)
    pool = np.array([s.id for s in corpus if s.id not in cand_sids],
                    dtype=np.int64)
    if pool.shape[0] < len(positives):
        raise InvariantError(
            f"only {pool.shape[0]} candidate-free sentences for "
            f"{len(positives)} positives; cannot balance the dataset")
    negatives: list[MaskedSample] = []
    for sid in rng.choice(pool, size=len(positives), replace=False):
        sent = corpus.sentence(int(sid))
        ids = vocab.encode(sent.tokens)
        pos = int(rng.integers(len(ids)))
        target = ids[pos]
        ids[pos] = vocab.mask_id
        negatives.append(MaskedSample(int(sid), tuple(ids), (pos,), (target,), 0))
    samples = positives + negatives
    rng.shuffle(samples)
    n_train = int(0.8 * len(samples))
    return samples[:n_train], samples[n_train:]


def select_fine_candidates(matrix: EmbeddingMatrix, seeds: Sequence[str],
                           top_n: int = 1000) -> list[str]:
    """Detection pool: top_n terms nearest the mean seed vector, seeds excluded."""
    center = mean_vector(matrix, seeds)
    return [t for t, _ in nearest(matrix, center, top_n, exclude=seeds)]


def build_fine_corpus(corpus: Corpus, matrix: EmbeddingMatrix,
                      seeds: Sequence[str], top_n: int = 1000,
                      index: InvertedIndex | None = None,
                      candidates: Sequence[str] | None = None
                      ) -> list[MaskedSample]:
    """One unlabeled masked sample per candidate occurrence."""
    if index is None:
        index = build_inverted_index(corpus)
    if candidates is None:
        candidates = select_fine_candidates(matrix, seeds, top_n)
    vocab = matrix.vocab
    samples: list[MaskedSample] = []
    for term in sorted(candidates):
        for sid, pos in index.postings_for(term):
            ids = vocab.encode(corpus.sentence(sid).tokens)
            target = ids[pos]
            ids[pos] = vocab.mask_id
            samples.append(MaskedSample(sid, tuple(ids), (pos,), (target,), None))
    return samples


# ---------------------------------------------------------------------------
# synthetic corpus

@dataclass(frozen=True)
class SynthSpec:
    """Shape of the generated corpus.

    Each topic gets one seed term used inside "product" sentences (frame plus
    topic words, with frame words hugging the seed slot), topic chatter
    without the seed, and a bed of unrelated general sentences. With
    phrase_seed, the last topic's seed is emitted as two adjacent tokens that
    only ever co-occur, so the standard phrase-merge pass folds them into one
    underscore term.
    """

    n_topics: int = 5
    product_per_topic: int = 120
    chatter_per_topic: int = 110
    n_general: int = 4250
    topic_words: int = 18
    frame_words: int = 32
    slot_words: int = 12
    general_words: int = 340
    product_len: tuple[int, int] = (10, 16)
    chatter_len: tuple[int, int] = (8, 14)
    general_len: tuple[int, int] = (6, 14)
    frame_adjacent_prob: float = 0.85
    chatter_frame_prob: float = 0.3
    phrase_seed: bool = True


@dataclass
class SynthCorpus:
    corpus: Corpus
    seeds: list[str]
    frame: list[str]
    slot: list[str]
    topics: list[list[str]]
    general: list[str]


def make_synthetic_corpus(spec: SynthSpec, rng: np.random.Generator) -> SynthCorpus:
    n_mint = (spec.general_words + spec.frame_words + spec.slot_words
              + spec.n_topics * spec.topic_words + spec.n_topics + 1)
    words = mint_terms(rng, n_mint)
    it = iter(words)
    general = [next(it) for _ in range(spec.general_words)]
    frame = [next(it) for _ in range(spec.frame_words)]
    # slot words appear only next to a seed occurrence, nowhere else; they
    # are the collocational fingerprint the detector is meant to pick up
    slot = [next(it) for _ in range(spec.slot_words)]
    topics = [[next(it) for _ in range(spec.topic_words)]
              for _ in range(spec.n_topics)]
    seed_tokens: list[tuple[str, ...]] = [(next(it),) for _ in range(spec.n_topics)]
    if spec.phrase_seed and spec.n_topics > 0:
        seed_tokens[-1] = (seed_tokens[-1][0], next(it))
    seeds = ["_".join(t) for t in seed_tokens]

    g_weights = 1.0 / np.arange(3, 3 + spec.general_words) ** 0.95
    g_weights /= g_weights.sum()

    def draw_general() -> str:
        return general[int(rng.choice(spec.general_words, p=g_weights))]

    def draw(pool: list[str]) -> str:
        return pool[int(rng.integers(len(pool)))]

    sentences: list[Sentence] = []
    sid = 0

    def emit(tokens: list[str], split: str) -> None:
        nonlocal sid
        sentences.append(Sentence(sid, tuple(tokens), split))
        sid += 1

    def mixture_token(topic: int) -> str:
        r = rng.random()
        if r < 0.42:
            return draw(frame)
        if r < 0.75:
            return draw(topics[topic])
        return draw_general()

    for t in range(spec.n_topics):
        for _ in range(spec.product_per_topic):
            length = int(rng.integers(spec.product_len[0], spec.product_len[1] + 1))
            toks = [mixture_token(t) for _ in range(length)]
            pos = int(rng.integers(1, length - 1))
            if rng.random() < spec.frame_adjacent_prob:
                toks[pos - 1] = draw(slot)
            if rng.random() < spec.frame_adjacent_prob:
                toks[pos + 1] = draw(slot)
            toks[pos: pos + 1] = list(seed_tokens[t])
            emit(toks, "dedup")
        for _ in range(spec.chatter_per_topic):
            length = int(rng.integers(spec.chatter_len[0], spec.chatter_len[1] + 1))
            toks = [draw(topics[t]) if rng.random() < 0.5 else draw_general()
                    for _ in range(length)]
            if rng.random() < spec.chatter_frame_prob:
                toks[int(rng.integers(length))] = draw(frame)
            emit(toks, "dedup")
    for _ in range(spec.n_general):
        length = int(rng.integers(spec.general_len[0], spec.general_len[1] + 1))
        emit([draw_general() for _ in range(length)], "white")
    return SynthCorpus(Corpus(sentences), seeds, frame, slot, topics, general)
