"""Inverted index over the corpus plus the seed-expansion helpers.

These are the building blocks used to locate candidate occurrences quickly
and to grow a seed list by embedding neighborhood search.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import Corpus
from .errors import InputError, InvariantError


class InvertedIndex:
    """term -> sorted list of (sentence id, token position) postings."""

    def __init__(self, postings: dict[str, list[tuple[int, int]]]):
        self.postings = {t: sorted(p) for t, p in postings.items()}

    @classmethod
    def build(cls, corpus: Corpus) -> "InvertedIndex":
        postings: dict[str, list[tuple[int, int]]] = {}
        for s in corpus:
            for pos, term in enumerate(s.tokens):
                postings.setdefault(term, []).append((s.id, pos))
        return cls(postings)

    def postings_for(self, term: str) -> list[tuple[int, int]]:
        return self.postings.get(term, [])

    def occurrence_count(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def total_postings(self) -> int:
        return sum(len(p) for p in self.postings.values())

    def dump(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            for term in sorted(self.postings):
                row = {"term": term,
                       "postings": [list(p) for p in self.postings[term]]}
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "InvertedIndex":
        path = Path(path)
        if not path.exists():
            raise InputError(f"index file not found: {path}")
        postings: dict[str, list[tuple[int, int]]] = {}
        with path.open("r", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                row = json.loads(line)
                postings[row["term"]] = [tuple(p) for p in row["postings"]]
        return cls(postings)


def build_inverted_index(corpus: Corpus) -> InvertedIndex:
    return InvertedIndex.build(corpus)


def expand_seeds(matrix, seed: str, k: int = 50, rounds: int = 3) -> set[str]:
    """Grow a seed into its embedding neighborhood, frontier by frontier.

    Round 1 takes the k nearest terms of the seed; each later round queries the
    k nearest terms of everything in the previous round's frontier. The result
    is the union over rounds, with the seed itself excluded. Frontiers may
    revisit earlier terms; the union absorbs duplicates.
    """
    from .embeddings import nearest

    if k < 1 or rounds < 1:
        raise InputError("k and rounds must be >= 1")
    frontier = [t for t, _ in nearest(matrix, seed, k)]
    seen: set[str] = set(frontier)
    for _ in range(rounds - 1):
        nxt: list[str] = []
        for term in frontier:
            nxt.extend(t for t, _ in nearest(matrix, term, k))
        frontier = nxt
        seen.update(frontier)
    seen.discard(seed)
    return seen


def lexicon_intersect(expanded: Iterable[str], lexicon: Iterable[str]) -> list[str]:
    """Intersection of an expansion with a reference lexicon, sorted."""
    lex = set(lexicon)
    return sorted(set(expanded) & lex)


def postings_sentences(index: InvertedIndex, terms: Iterable[str]) -> set[int]:
    """Sentence ids containing at least one of the terms."""
    sids: set[int] = set()
    for t in terms:
        sids.update(sid for sid, _ in index.postings_for(t))
    return sids


def remove_sentences(corpus: Corpus, terms: Iterable[str]) -> Corpus:
    """Drop every sentence containing any of the terms; ids are preserved."""
    drop = set(terms)
    survivors = [s for s in corpus if not drop.intersection(s.tokens)]
    return Corpus(survivors)


def read_term_file(path: str | Path) -> list[str]:
    """Read a seed or lexicon file: one term (or a_b phrase) per line."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"term file not found: {path}")
    terms = []
    for line in path.read_text(encoding="utf-8").splitlines():
        t = line.strip().lower()
        if t and not t.startswith("#"):
            terms.append(t)
    if len(set(terms)) != len(terms):
        raise InvariantError(f"duplicate terms in {path}")
    return terms


def write_term_file(terms: Sequence[str], path: str | Path) -> None:
    Path(path).write_text("".join(t + "\n" for t in terms), encoding="utf-8")
