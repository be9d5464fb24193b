"""Configuration merging, stage plumbing, and the synthetic stage."""

import json

import numpy as np
import pytest

from euphdet.corpus import Vocabulary
from euphdet.datasets import GoldLabels
from euphdet.errors import InputError
from euphdet.index import read_term_file
from euphdet.pipeline import (
    PipelineConfig,
    Workdir,
    bundled_config,
    load_ranking,
    stage_rng,
    stage_seed,
    stage_synth,
)

TINY_SYNTH = {
    "rng_seed": 11,
    "corpus": {"min_count": 3, "phrase_threshold": 60.0},
    "synth": {"n_topics": 2, "product_per_topic": 70, "chatter_per_topic": 40,
              "n_general": 700, "topic_words": 10, "frame_words": 16,
              "slot_words": 8, "general_words": 120},
    "plant": {"terms_per_seed": 1, "occ_per_term": 4},
}


def write_config(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return p


def test_no_config_file_means_the_bundled_profile(tmp_path):
    cfg = PipelineConfig.load()
    assert cfg.digest() == PipelineConfig.load(bundled_config()).digest()
    # the bundled profile raises the phrase threshold well above the bare
    # default so synthetic topic chatter is not glued into phrases
    assert cfg["corpus"]["phrase_threshold"] > 10.0
    assert cfg["embed"]["workers"] == 1


def test_config_fills_gaps_with_defaults(tmp_path):
    p = write_config(tmp_path, {"fine": {"rounds": 2}})
    cfg = PipelineConfig.load(p)
    assert cfg["fine"]["rounds"] == 2
    assert cfg["fine"]["keep_fraction"] == 0.5
    assert cfg["coarse"]["threshold"] == 0.5


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(InputError, match="unknown config key"):
        PipelineConfig.load(write_config(tmp_path, {"nope": 1}))
    with pytest.raises(InputError, match="fine.zzz"):
        PipelineConfig.load(write_config(tmp_path, {"fine": {"zzz": 1}}))
    with pytest.raises(InputError, match="must be an object"):
        PipelineConfig.load(write_config(tmp_path, {"fine": 3}))
    # synth subkeys are open: they mirror the generator's own signature
    cfg = PipelineConfig.load(write_config(tmp_path, {"synth": {"n_topics": 2}}))
    assert cfg["synth"]["n_topics"] == 2


def test_config_overrides_apply_after_the_file(tmp_path):
    p = write_config(tmp_path, {"fine": {"rounds": 2}})
    cfg = PipelineConfig.load(p, {"fine.rounds": 5, "eval.ks": [2, 4]})
    assert cfg["fine"]["rounds"] == 5
    assert cfg["eval"]["ks"] == [2, 4]
    with pytest.raises(InputError):
        PipelineConfig.load(p, {"fine.zzz": 1})
    with pytest.raises(InputError):
        PipelineConfig.load(p, {"zzz": 1})


def test_config_file_errors(tmp_path):
    with pytest.raises(InputError, match="not found"):
        PipelineConfig.load(tmp_path / "absent.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    with pytest.raises(InputError, match="not valid JSON"):
        PipelineConfig.load(bad)


def test_digest_tracks_content(tmp_path):
    a = PipelineConfig.load(write_config(tmp_path, {"rng_seed": 1}, "a.json"))
    b = PipelineConfig.load(write_config(tmp_path, {"rng_seed": 1}, "b.json"))
    c = PipelineConfig.load(write_config(tmp_path, {"rng_seed": 2}, "c.json"))
    assert a.digest() == b.digest()
    assert a.digest() != c.digest()
    assert len(a.digest()) == 16
    int(a.digest(), 16)


def test_stage_rng_streams_are_stable_and_distinct():
    a = stage_rng(7, "embed").random(4)
    b = stage_rng(7, "embed").random(4)
    c = stage_rng(7, "plant").random(4)
    d = stage_rng(8, "embed").random(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)
    assert stage_seed(7, "embed") == stage_seed(7, "embed")
    assert stage_seed(7, "embed") != stage_seed(7, "plant")


def test_workdir_layout(tmp_path):
    wd = Workdir(tmp_path / "deep" / "run")
    assert wd.root.is_dir()
    assert wd.round_ckpt(2).name == "round2.ckpt"
    assert wd.round_train(0).name == "round0_train.jsonl"
    assert wd.ranking.parent == wd.root


def test_load_ranking_round_trip(tmp_path):
    p = tmp_path / "ranking.jsonl"
    rows = [("b", -0.25, 3), ("a", -1.5, 1)]
    with p.open("w") as fh:
        for term, score, n in rows:
            fh.write(json.dumps({"term": term, "score": score,
                                 "n_occurrences": n}) + "\n")
    assert load_ranking(p) == rows
    with pytest.raises(InputError):
        load_ranking(tmp_path / "absent.jsonl")


def test_stage_synth_writes_a_consistent_benchmark(tmp_path):
    cfg = PipelineConfig.load(write_config(tmp_path, TINY_SYNTH))
    wd = Workdir(tmp_path / "wd")
    stage_synth(cfg, wd)
    for p in (wd.corpus, wd.vocab, wd.seeds, wd.gold):
        assert p.exists()
    seeds = read_term_file(wd.seeds)
    assert len(seeds) == 2
    assert "_" in seeds[1]
    gold = GoldLabels.load(wd.gold)
    assert len(gold.terms) == 2
    assert gold.total_occurrences() == 2 * 4
    vocab = Vocabulary.load(wd.vocab)
    for t in gold.terms + seeds:
        assert t in vocab

    # rerunning without force is a no-op
    stamp = wd.corpus.stat().st_mtime_ns
    stage_synth(cfg, wd)
    assert wd.corpus.stat().st_mtime_ns == stamp


def test_stage_synth_is_deterministic(tmp_path):
    cfg = PipelineConfig.load(write_config(tmp_path, TINY_SYNTH))
    wd1 = Workdir(tmp_path / "w1")
    wd2 = Workdir(tmp_path / "w2")
    stage_synth(cfg, wd1)
    stage_synth(cfg, wd2)
    assert wd1.corpus.read_bytes() == wd2.corpus.read_bytes()
    assert wd1.gold.read_bytes() == wd2.gold.read_bytes()


def test_stage_synth_rejects_unknown_generator_keys(tmp_path):
    data = dict(TINY_SYNTH)
    data["synth"] = {"bogus": 3}
    cfg = PipelineConfig.load(write_config(tmp_path, data))
    with pytest.raises(InputError, match="bad synth config"):
        stage_synth(cfg, Workdir(tmp_path / "wd"))
