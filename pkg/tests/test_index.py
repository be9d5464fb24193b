"""Inverted index, seed expansion, and term-file round trips."""

import numpy as np
import pytest

from euphdet.corpus import Corpus, Sentence, Vocabulary
from euphdet.embeddings import EmbeddingMatrix
from euphdet.errors import InputError, InvariantError
from euphdet.index import (
    InvertedIndex,
    expand_seeds,
    lexicon_intersect,
    postings_sentences,
    read_term_file,
    remove_sentences,
    write_term_file,
)


@pytest.fixture
def corpus():
    return Corpus([
        Sentence(0, ("x", "y", "x"), "synthetic"),
        Sentence(2, ("y", "z"), "synthetic"),
        Sentence(5, ("z",), "white"),
    ])


def test_index_records_every_position(corpus):
    idx = InvertedIndex.build(corpus)
    assert idx.postings_for("x") == [(0, 0), (0, 2)]
    assert idx.postings_for("y") == [(0, 1), (2, 0)]
    assert idx.postings_for("absent") == []
    assert idx.occurrence_count("z") == 2
    assert idx.total_postings() == corpus.token_count()


def test_index_dump_load_round_trip(tmp_path, corpus):
    idx = InvertedIndex.build(corpus)
    p = tmp_path / "index.jsonl"
    idx.dump(p)
    again = InvertedIndex.load(p)
    assert again.postings == idx.postings
    with pytest.raises(InputError):
        InvertedIndex.load(tmp_path / "absent.jsonl")


def arc_matrix():
    # Unit vectors on an arc with shrinking gaps, so each term's single
    # nearest neighbour is the next term along: a->b, b->c, c->d, d->e.
    angles = np.deg2rad([0.0, 10.0, 15.0, 18.0, 20.0])
    terms = ["a", "b", "c", "d", "e"]
    vocab = Vocabulary(terms, {t: 1 for t in terms})
    vectors = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return EmbeddingMatrix(vocab, vectors)


def test_expand_seeds_walks_the_neighbour_chain():
    m = arc_matrix()
    assert expand_seeds(m, "a", k=1, rounds=1) == {"b"}
    assert expand_seeds(m, "a", k=1, rounds=3) == {"b", "c", "d"}
    # The seed itself never appears, even when a frontier loops back.
    assert "b" not in expand_seeds(m, "b", k=2, rounds=2)


def test_expand_seeds_validates_arguments():
    m = arc_matrix()
    with pytest.raises(InputError):
        expand_seeds(m, "a", k=0)
    with pytest.raises(InputError):
        expand_seeds(m, "a", rounds=0)


def test_lexicon_intersect_sorts_and_dedupes():
    assert lexicon_intersect(["b", "a", "b", "q"], {"a", "b", "c"}) == ["a", "b"]
    assert lexicon_intersect([], {"a"}) == []


def test_postings_sentences_and_removal(corpus):
    idx = InvertedIndex.build(corpus)
    assert postings_sentences(idx, ["x", "z"]) == {0, 2, 5}
    assert postings_sentences(idx, ["absent"]) == set()
    kept = remove_sentences(corpus, ["z"])
    assert [s.id for s in kept] == [0]
    assert remove_sentences(corpus, []).sentences == corpus.sentences


def test_term_file_round_trip(tmp_path):
    p = tmp_path / "seeds.txt"
    write_term_file(["beta", "alfa"], p)
    assert read_term_file(p) == ["beta", "alfa"]

    commented = tmp_path / "lex.txt"
    commented.write_text("# header\n\nFoo\nbar_baz\n")
    assert read_term_file(commented) == ["foo", "bar_baz"]

    dupes = tmp_path / "dupes.txt"
    dupes.write_text("a\nb\na\n")
    with pytest.raises(InvariantError):
        read_term_file(dupes)
    with pytest.raises(InputError):
        read_term_file(tmp_path / "absent.txt")
