"""Corpus ingestion, tokenization, phrase merging, and vocabulary construction.

Sentences keep their tokens as lowercase term strings; numeric ids only come
into play once a Vocabulary has been built (datasets and models work on ids).
"""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import IO, Iterable, Iterator

from .errors import InputError, InvariantError

log = logging.getLogger(__name__)

SPLITS = ("target", "dedup", "white", "synthetic")

MASK_TOKEN = "<mask>"
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

# Word characters plus underscore (merged phrases), with intra-word hyphens
# preserved ("5-mapb" stays one token). Everything else separates tokens.
_TOKEN_RE = re.compile(r"[a-z0-9_]+(?:-[a-z0-9_]+)*")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation.

    Intra-word hyphens and digits are preserved, so "5-MAPB is good." becomes
    ["5-mapb", "is", "good"]. Joining the result with spaces and re-tokenizing
    yields the same list.
    """
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: Iterable[str]) -> str:
    return " ".join(tokens)


@dataclass(frozen=True)
class Sentence:
    id: int
    tokens: tuple[str, ...]
    split: str
    raw: str = ""

    def __post_init__(self):
        if not self.tokens:
            raise InvariantError(f"sentence {self.id} has no tokens")
        if self.split not in SPLITS:
            raise InvariantError(f"sentence {self.id}: unknown split {self.split!r}")


class Corpus:
    """An ordered collection of sentences with stable, strictly increasing ids."""

    def __init__(self, sentences: list[Sentence]):
        for prev, cur in zip(sentences, sentences[1:]):
            if cur.id <= prev.id:
                raise InvariantError("sentence ids must be strictly increasing")
        self.sentences = list(sentences)
        self._by_id = {s.id: s for s in self.sentences}

    def __len__(self) -> int:
        return len(self.sentences)

    def __iter__(self) -> Iterator[Sentence]:
        return iter(self.sentences)

    def sentence(self, sid: int) -> Sentence:
        try:
            return self._by_id[sid]
        except KeyError:
            raise InputError(f"no sentence with id {sid}") from None

    def token_count(self) -> int:
        return sum(len(s.tokens) for s in self.sentences)

    def terms(self) -> set[str]:
        out: set[str] = set()
        for s in self.sentences:
            out.update(s.tokens)
        return out


def ingest(source: str | Path | IO | Iterable[str], split: str = "synthetic",
           start_id: int = 0) -> Corpus:
    """Read one sentence per non-empty line.

    `source` may be a path (opened in binary mode, decoded per line) or any
    iterable of strings. Lines that fail UTF-8 decoding or contain no word
    characters are skipped and counted in a single warning.
    """
    if split not in SPLITS:
        raise InputError(f"unknown split tag {split!r}")
    close = False
    if isinstance(source, (str, Path)):
        path = Path(source)
        if not path.exists():
            raise InputError(f"corpus file not found: {path}")
        stream: Iterable = path.open("rb")
        close = True
    else:
        stream = source
    sentences: list[Sentence] = []
    skipped = 0
    sid = start_id
    try:
        for line in stream:
            if isinstance(line, bytes):
                try:
                    line = line.decode("utf-8")
                except UnicodeDecodeError:
                    skipped += 1
                    continue
            toks = tokenize(line)
            if not toks:
                if line.strip():
                    skipped += 1
                continue
            sentences.append(Sentence(sid, tuple(toks), split, raw=line.rstrip("\n")))
            sid += 1
    finally:
        if close:
            stream.close()
    if skipped:
        log.warning("ingest: skipped %d undecodable or wordless lines", skipped)
    return Corpus(sentences)


def merge_phrases(corpus: Corpus, delta: float = 5.0, threshold: float = 10.0) -> Corpus:
    """Join frequent two-word collocations into single underscore terms.

    One pass: bigram statistics are computed on the input corpus, then each
    sentence is scanned left to right, merging (a, b) into "a_b" whenever
    score(a, b) = (count(ab) - delta) * N / (count(a) * count(b)) exceeds the
    threshold. Merged pairs do not chain within the pass, so only two-word
    phrases are produced.
    """
    unigram: Counter[str] = Counter()
    bigram: Counter[tuple[str, str]] = Counter()
    for s in corpus:
        unigram.update(s.tokens)
        bigram.update(zip(s.tokens, s.tokens[1:]))
    n_tokens = corpus.token_count()

    def score(a: str, b: str) -> float:
        return (bigram[(a, b)] - delta) * n_tokens / (unigram[a] * unigram[b])

    merged: list[Sentence] = []
    for s in corpus:
        toks = s.tokens
        out: list[str] = []
        i = 0
        while i < len(toks):
            if i + 1 < len(toks) and score(toks[i], toks[i + 1]) > threshold:
                out.append(toks[i] + "_" + toks[i + 1])
                i += 2
            else:
                out.append(toks[i])
                i += 1
        merged.append(replace(s, tokens=tuple(out)))
    return Corpus(merged)


class Vocabulary:
    """Deterministic term/id mapping with three trailing special ids.

    Regular terms get ids 0..n_terms-1 ordered by (frequency desc, term asc);
    the mask, pad, and unknown ids follow. Out-of-vocabulary tokens encode to
    the unknown id, never dropped.
    """

    def __init__(self, terms: list[str], counts: dict[str, int]):
        self.terms = list(terms)
        self.counts = dict(counts)
        self._ids = {t: i for i, t in enumerate(self.terms)}
        if len(self._ids) != len(self.terms):
            raise InvariantError("duplicate term in vocabulary")
        n = len(self.terms)
        self.mask_id = n
        self.pad_id = n + 1
        self.unk_id = n + 2

    @property
    def n_terms(self) -> int:
        return len(self.terms)

    @property
    def size(self) -> int:
        """Total id count including the three specials."""
        return len(self.terms) + 3

    def __contains__(self, term: str) -> bool:
        return term in self._ids

    def term_id(self, term: str) -> int | None:
        return self._ids.get(term)

    def id_term(self, tid: int) -> str:
        if 0 <= tid < self.n_terms:
            return self.terms[tid]
        if tid == self.mask_id:
            return MASK_TOKEN
        if tid == self.pad_id:
            return PAD_TOKEN
        if tid == self.unk_id:
            return UNK_TOKEN
        raise InputError(f"id {tid} outside vocabulary")

    def is_special(self, tid: int) -> bool:
        return tid in (self.mask_id, self.pad_id, self.unk_id)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        unk = self.unk_id
        return [self._ids.get(t, unk) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.id_term(i) for i in ids]

    def save(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            header = {"n_terms": self.n_terms,
                      "specials": {"mask": self.mask_id, "pad": self.pad_id,
                                   "unk": self.unk_id}}
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for i, t in enumerate(self.terms):
                row = {"term": t, "id": i, "count": self.counts.get(t, 0)}
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        path = Path(path)
        if not path.exists():
            raise InputError(f"vocabulary file not found: {path}")
        with path.open("r", encoding="utf-8") as fh:
            try:
                header = json.loads(fh.readline())
            except json.JSONDecodeError as e:
                raise InputError(f"bad vocabulary header in {path}: {e}") from e
            if "specials" not in header:
                raise InputError(f"vocabulary file {path} lacks a special-id header")
            terms: list[str] = []
            counts: dict[str, int] = {}
            for line in fh:
                if not line.strip():
                    continue
                row = json.loads(line)
                if row["id"] != len(terms):
                    raise InvariantError(f"non-contiguous id {row['id']} in {path}")
                terms.append(row["term"])
                counts[row["term"]] = row["count"]
        vocab = cls(terms, counts)
        if vocab.mask_id != header["specials"]["mask"]:
            raise InvariantError(f"special ids in {path} disagree with term count")
        return vocab


def build_vocab(corpus: Corpus, min_count: int = 5) -> Vocabulary:
    """Count terms and keep those seen at least min_count times.

    Ids are assigned by (frequency desc, term asc), so the mapping is a pure
    function of the corpus.
    """
    if min_count < 1:
        raise InputError(f"min_count must be >= 1, got {min_count}")
    counts: Counter[str] = Counter()
    for s in corpus:
        counts.update(s.tokens)
    kept = sorted((t for t, c in counts.items() if c >= min_count),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(kept, {t: counts[t] for t in kept})


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    """Write JSON lines {"id", "text", "split"}; text is the token join."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for s in corpus:
            row = {"id": s.id, "text": detokenize(s.tokens), "split": s.split}
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_corpus(path: str | Path) -> Corpus:
    path = Path(path)
    if not path.exists():
        raise InputError(f"corpus file not found: {path}")
    sentences = []
    with path.open("r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise InputError(f"{path}:{ln}: bad JSON: {e}") from e
            toks = tokenize(row["text"])
            if not toks:
                raise InvariantError(f"{path}:{ln}: sentence {row['id']} has no tokens")
            sentences.append(Sentence(int(row["id"]), tuple(toks), row["split"],
                                      raw=row["text"]))
    return Corpus(sentences)
