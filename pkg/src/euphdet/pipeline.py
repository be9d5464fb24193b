"""End-to-end pipeline: staged, resumable, and deterministic for a fixed
configuration. Every stage reads and writes files in one working directory,
skips itself when its outputs already exist, and draws randomness from its
own stream so re-running a single stage cannot shift the others."""

from __future__ import annotations

import hashlib
import json
import zlib
from copy import deepcopy
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from .coarse import filter_candidates, train_coarse
from .corpus import build_vocab, load_corpus, merge_phrases, save_corpus
from .datasets import (GoldLabels, SynthSpec, build_coarse_dataset,
                       build_fine_corpus, load_samples, make_synthetic_corpus,
                       plant_impromptu, save_samples, select_fine_candidates)
from .devset import (ExternalServiceProvider, FileProvider, TemplateProvider,
                     build_dev_set, load_dev_set, save_dev_set)
from .embeddings import load_embeddings, save_embeddings, train_embeddings
from .errors import InputError, InvariantError
from .evaluation import DetectionReport, evaluate_detections, rank_summary
from .fine import iterate_training, rank_positions, score_candidates
from .index import (InvertedIndex, build_inverted_index, read_term_file,
                    remove_sentences, write_term_file)
from .model import config_for_vocab, load_checkpoint, save_checkpoint

_DEFAULTS: dict = {
    "rng_seed": 7,
    "corpus": {"min_count": 5, "phrase_delta": 5.0, "phrase_threshold": 10.0},
    "synth": {},
    "plant": {"terms_per_seed": 2, "occ_per_term": 5},
    "embed": {"dim": 100, "window": 5, "negatives": 5, "epochs": 5,
              "lr": 0.025, "subsample": 1e-3, "workers": 1},
    "model": {"n_layers": 4, "n_heads": 4, "d_model": 128, "d_ff": 512,
              "max_len": 128, "dropout": 0.1},
    "coarse": {"top_n": 100, "epochs": 20, "patience": 3, "batch_size": 32,
               "lr": 1e-3, "threshold": 0.5},
    "fine": {"top_n": 1000, "epochs": 20, "patience": 3, "batch_size": 32,
             "lr": 1e-3, "rounds": 1, "keep_fraction": 0.5, "cam": True,
             "cam_rate": 0.5},
    "devset": {"provider": "template", "per_seed_sentences": 6, "path": None},
    "eval": {"ks": [5, 10, 20]},
}


def bundled_config(name: str = "synthetic") -> Path:
    """Path of a configuration file shipped with the package."""
    path = Path(__file__).parent / "configs" / f"{name}.json"
    if not path.exists():
        raise InputError(f"no bundled config named {name!r}")
    return path


class PipelineConfig:
    """Merged configuration: package defaults, then file, then overrides."""

    def __init__(self, data: dict):
        self.data = data

    @classmethod
    def load(cls, path: str | Path | None = None,
             overrides: dict | None = None) -> "PipelineConfig":
        # no file means the packaged synthetic profile, so a bare
        # `euphdet pipeline --workdir wd` is a working end-to-end run
        if path is None:
            path = bundled_config()
        merged = deepcopy(_DEFAULTS)
        path = Path(path)
        if not path.exists():
            raise InputError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text(encoding="utf-8"))
        except ValueError as exc:
            raise InputError(f"config is not valid JSON: {exc}")
        _merge_into(merged, file_cfg)
        for dotted, value in (overrides or {}).items():
            _set_dotted(merged, dotted, value)
        return cls(merged)

    def __getitem__(self, key: str):
        return self.data[key]

    def digest(self) -> str:
        blob = json.dumps(self.data, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


def _merge_into(base: dict, extra: dict) -> None:
    for key, value in extra.items():
        if key not in base:
            raise InputError(f"unknown config key: {key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise InputError(f"config section {key!r} must be an object")
            for sub, sval in value.items():
                if key != "synth" and sub not in base[key]:
                    raise InputError(f"unknown config key: {key}.{sub}")
                base[key][sub] = sval
        else:
            base[key] = value


def _set_dotted(cfg: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = cfg
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise InputError(f"unknown config key: {dotted!r}")
        node = node[p]
    if parts[-1] not in node and parts[0] != "synth":
        raise InputError(f"unknown config key: {dotted!r}")
    node[parts[-1]] = value


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    """Independent stream per stage: the stage name is folded into the seed."""
    return np.random.default_rng(
        np.random.SeedSequence([int(seed), zlib.crc32(stage.encode("ascii"))]))


def stage_seed(seed: int, stage: str) -> int:
    return int(np.random.SeedSequence(
        [int(seed), zlib.crc32(stage.encode("ascii"))]).generate_state(1)[0])


class Workdir:
    """Fixed artifact layout inside one working directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.corpus = self.root / "corpus.jsonl"
        self.vocab = self.root / "vocab.jsonl"
        self.seeds = self.root / "seeds.txt"
        self.gold = self.root / "gold.jsonl"
        self.embeddings = self.root / "embeddings.txt"
        self.index = self.root / "index.jsonl"
        self.dev = self.root / "dev.jsonl"
        self.coarse_train = self.root / "coarse_train.jsonl"
        self.coarse_dev = self.root / "coarse_dev.jsonl"
        self.coarse_ckpt = self.root / "coarse.ckpt"
        self.coarse_history = self.root / "coarse_history.json"
        self.fine_candidates = self.root / "fine_candidates.txt"
        self.fine_samples = self.root / "fine_samples.jsonl"
        self.refined = self.root / "refined.jsonl"
        self.history = self.root / "history.json"
        self.ranking = self.root / "ranking.jsonl"
        self.evaluation = self.root / "evaluation.json"
        self.report_json = self.root / "report.json"
        self.report_csv = self.root / "report.csv"

    def round_ckpt(self, r: int) -> Path:
        return self.root / f"round{r}.ckpt"

    def round_train(self, r: int) -> Path:
        return self.root / f"round{r}_train.jsonl"


def _fresh(force: bool, *outputs: Path) -> bool:
    """True when the stage still has work to do."""
    return force or not all(p.exists() for p in outputs)


def _need(*paths: Path) -> None:
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise InputError("missing inputs: " + ", ".join(missing))


def _model_config(cfg: PipelineConfig, vocab):
    return config_for_vocab(vocab, **cfg["model"])


# ---------------------------------------------------------------------------
# stages

def stage_synth(cfg: PipelineConfig, wd: Workdir, force: bool = False) -> None:
    """Generate the self-contained benchmark corpus with planted terms."""
    outs = (wd.corpus, wd.vocab, wd.seeds, wd.gold)
    if not _fresh(force, *outs):
        return
    try:
        spec = SynthSpec(**cfg["synth"])
    except TypeError as exc:
        raise InputError(f"bad synth config: {exc}")
    sc = make_synthetic_corpus(spec, stage_rng(cfg["rng_seed"], "synth"))
    merged = merge_phrases(sc.corpus, delta=cfg["corpus"]["phrase_delta"],
                           threshold=cfg["corpus"]["phrase_threshold"])
    for s in sc.seeds:
        if not any(s in sent.tokens for sent in merged):
            raise InvariantError(
                f"seed {s!r} missing after phrase merging; "
                f"phrase_threshold is probably too high")
    planted, gold = plant_impromptu(
        merged, sc.seeds, cfg["plant"]["terms_per_seed"],
        cfg["plant"]["occ_per_term"], stage_rng(cfg["rng_seed"], "plant"))
    vocab = build_vocab(planted, cfg["corpus"]["min_count"])
    for t in gold.terms:
        if t not in vocab:
            raise InvariantError(
                f"planted term {t!r} fell below min_count; raise occ_per_term")
    save_corpus(planted, wd.corpus)
    vocab.save(wd.vocab)
    write_term_file(sc.seeds, wd.seeds)
    gold.save(wd.gold)


def stage_ingest(cfg: PipelineConfig, wd: Workdir, corpus_path: str | Path,
                 seeds_path: str | Path, lexicon_path: str | Path | None = None,
                 force: bool = False) -> None:
    """Read a real corpus: tokenize, merge phrases, optionally strip sentences
    containing known lexicon terms, build the vocabulary."""
    outs = (wd.corpus, wd.vocab, wd.seeds)
    if not _fresh(force, *outs):
        return
    _need(Path(corpus_path), Path(seeds_path))
    raw = corpus_mod.ingest(corpus_path)
    merged = merge_phrases(raw, delta=cfg["corpus"]["phrase_delta"],
                           threshold=cfg["corpus"]["phrase_threshold"])
    seeds = read_term_file(seeds_path)
    if lexicon_path is not None:
        _need(Path(lexicon_path))
        lexicon = set(read_term_file(lexicon_path)) - set(seeds)
        merged = remove_sentences(merged, lexicon)
    vocab = build_vocab(merged, cfg["corpus"]["min_count"])
    for s in seeds:
        if s not in vocab:
            raise InputError(f"seed {s!r} not in the corpus vocabulary")
    save_corpus(merged, wd.corpus)
    vocab.save(wd.vocab)
    write_term_file(seeds, wd.seeds)


def stage_embed(cfg: PipelineConfig, wd: Workdir, force: bool = False) -> None:
    if not _fresh(force, wd.embeddings):
        return
    _need(wd.corpus, wd.vocab)
    corpus = load_corpus(wd.corpus)
    vocab = corpus_mod.Vocabulary.load(wd.vocab)
    e = cfg["embed"]
    matrix = train_embeddings(corpus, vocab, dim=e["dim"], window=e["window"],
                              negatives=e["negatives"], epochs=e["epochs"],
                              lr=e["lr"], subsample=e["subsample"],
                              seed=stage_seed(cfg["rng_seed"], "embed"),
                              workers=e["workers"])
    save_embeddings(matrix, wd.embeddings)


def stage_index(cfg: PipelineConfig, wd: Workdir, force: bool = False) -> None:
    if not _fresh(force, wd.index):
        return
    _need(wd.corpus)
    build_inverted_index(load_corpus(wd.corpus)).dump(wd.index)


def _make_provider(cfg: PipelineConfig, rng: np.random.Generator):
    d = cfg["devset"]
    kind = d["provider"]
    if kind == "template":
        return TemplateProvider(rng)
    if kind == "file":
        if not d["path"]:
            raise InputError("devset.provider 'file' needs devset.path")
        return FileProvider(d["path"])
    if kind == "external-service":
        return ExternalServiceProvider()
    raise InputError(f"unknown devset provider {kind!r}")


def stage_devset(cfg: PipelineConfig, wd: Workdir, force: bool = False) -> None:
    if not _fresh(force, wd.dev):
        return
    _need(wd.corpus, wd.seeds)
    corpus = load_corpus(wd.corpus)
    seeds = read_term_file(wd.seeds)
    exclude: list[str] = []
    if wd.gold.exists():
        exclude = GoldLabels.load(wd.gold).terms
    rng = stage_rng(cfg["rng_seed"], "devset")
    provider = _make_provider(cfg, rng)
    samples = build_dev_set(corpus, seeds, provider,
                            cfg["devset"]["per_seed_sentences"], rng,
                            exclude=exclude)
    save_dev_set(samples, wd.dev)


def stage_build_coarse(cfg: PipelineConfig, wd: Workdir,
                       force: bool = False) -> None:
    if not _fresh(force, wd.coarse_train, wd.coarse_dev):
        return
    _need(wd.corpus, wd.vocab, wd.embeddings, wd.index)
    corpus = load_corpus(wd.corpus)
    vocab = corpus_mod.Vocabulary.load(wd.vocab)
    matrix = load_embeddings(wd.embeddings, vocab)
    index = InvertedIndex.load(wd.index)
    seeds = read_term_file(wd.seeds)
    train, dev = build_coarse_dataset(
        corpus, matrix, seeds, cfg["coarse"]["top_n"],
        stage_rng(cfg["rng_seed"], "coarse-data"), index)
    save_samples(train, vocab, wd.coarse_train)
    save_samples(dev, vocab, wd.coarse_dev)


def stage_train_coarse(cfg: PipelineConfig, wd: Workdir,
                       force: bool = False) -> None:
    if not _fresh(force, wd.coarse_ckpt, wd.coarse_history):
        return
    _need(wd.coarse_train, wd.coarse_dev, wd.vocab)
    vocab = corpus_mod.Vocabulary.load(wd.vocab)
    train = load_samples(wd.coarse_train, vocab)
    dev = load_samples(wd.coarse_dev, vocab)
    c = cfg["coarse"]
    params, history = train_coarse(
        train, dev, vocab, _model_config(cfg, vocab), epochs=c["epochs"],
        patience=c["patience"], batch_size=c["batch_size"], lr=c["lr"],
        rng=stage_rng(cfg["rng_seed"], "coarse-train"))
    save_checkpoint(params, _model_config(cfg, vocab), wd.coarse_ckpt,
                    extra={"kind": "coarse"})
    wd.coarse_history.write_text(
        json.dumps(history, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def stage_build_fine(cfg: PipelineConfig, wd: Workdir,
                     force: bool = False) -> None:
    if not _fresh(force, wd.fine_candidates, wd.fine_samples):
        return
    _need(wd.corpus, wd.vocab, wd.embeddings, wd.index, wd.seeds)
    corpus = load_corpus(wd.corpus)
    vocab = corpus_mod.Vocabulary.load(wd.vocab)
    matrix = load_embeddings(wd.embeddings, vocab)
    index = InvertedIndex.load(wd.index)
    seeds = read_term_file(wd.seeds)
    candidates = select_fine_candidates(matrix, seeds, cfg["fine"]["top_n"])
    samples = build_fine_corpus(corpus, matrix, seeds, index=index,
                                candidates=candidates)
    write_term_file(candidates, wd.fine_candidates)
    save_samples(samples, vocab, wd.fine_samples)


def stage_filter(cfg: PipelineConfig, wd: Workdir, force: bool = False) -> None:
    if not _fresh(force, wd.refined):
        return
    _need(wd.fine_samples, wd.coarse_ckpt, wd.vocab)
    vocab = corpus_mod.Vocabulary.load(wd.vocab)
    samples = load_samples(wd.fine_samples, vocab)
    params, config, _ = load_checkpoint(wd.coarse_ckpt,
                                        expect_config=_model_config(cfg, vocab))
    kept, _ = filter_candidates(params, config, vocab, samples,
                                cfg["coarse"]["threshold"],
                                cfg["coarse"]["batch_size"])
    if not kept:
        raise InvariantError("the coarse filter rejected every candidate")
    save_samples(kept, vocab, wd.refined)


def stage_iterate(cfg: PipelineConfig, wd: Workdir, force: bool = False,
                  rounds: int | None = None) -> None:
    """Round-0 training plus the keep-and-retrain rounds; writes one
    checkpoint and training-set dump per round and a history summary."""
    if rounds is None:
        rounds = cfg["fine"]["rounds"]
    outs = [wd.history] + [wd.round_ckpt(0), wd.round_train(0)]
    if not _fresh(force, *outs):
        return
    _need(wd.refined, wd.dev, wd.vocab, wd.seeds)
    vocab = corpus_mod.Vocabulary.load(wd.vocab)
    samples = load_samples(wd.refined, vocab)
    dev = load_dev_set(wd.dev)
    seeds = read_term_file(wd.seeds)
    f = cfg["fine"]
    results = iterate_training(
        samples, dev, vocab, _model_config(cfg, vocab), seeds,
        rounds=rounds, keep_fraction=f["keep_fraction"], epochs=f["epochs"],
        patience=f["patience"], batch_size=f["batch_size"], lr=f["lr"],
        cam=f["cam"], cam_rate=f["cam_rate"],
        rng=stage_rng(cfg["rng_seed"], "fine-train"))
    rows = []
    for res in results:
        save_checkpoint(res.params, _model_config(cfg, vocab),
                        wd.round_ckpt(res.round),
                        extra={"kind": "fine", "round": res.round})
        save_samples(res.samples, vocab, wd.round_train(res.round))
        rows.append({"round": res.round, "n_samples": len(res.samples),
                     "history": res.history})
    summary = {"rounds": rows, "final_round": results[-1].round,
               "requested_rounds": rounds,
               "stopped_early": results[-1].round < rounds}
    wd.history.write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n",
                          encoding="utf-8")


def stage_score(cfg: PipelineConfig, wd: Workdir, force: bool = False) -> None:
    if not _fresh(force, wd.ranking):
        return
    _need(wd.history, wd.refined, wd.vocab, wd.seeds)
    vocab = corpus_mod.Vocabulary.load(wd.vocab)
    final = json.loads(wd.history.read_text(encoding="utf-8"))["final_round"]
    params, config, _ = load_checkpoint(wd.round_ckpt(final),
                                        expect_config=_model_config(cfg, vocab))
    samples = load_samples(wd.refined, vocab)
    seeds = read_term_file(wd.seeds)
    ranking = score_candidates(params, config, vocab, samples, seeds,
                               cfg["fine"]["batch_size"])
    with wd.ranking.open("w", encoding="utf-8") as fh:
        for term, score, n_occ in ranking:
            fh.write(json.dumps({"term": term, "score": score,
                                 "n_occurrences": n_occ},
                                sort_keys=True) + "\n")


def load_ranking(path: str | Path) -> list[tuple[str, float, int]]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"ranking not found: {path}")
    out = []
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            out.append((row["term"], float(row["score"]),
                        int(row["n_occurrences"])))
    return out


def stage_evaluate(cfg: PipelineConfig, wd: Workdir,
                   force: bool = False) -> None:
    if not _fresh(force, wd.evaluation):
        return
    _need(wd.ranking, wd.gold, wd.index)
    ranking = load_ranking(wd.ranking)
    gold = GoldLabels.load(wd.gold)
    index = InvertedIndex.load(wd.index)
    metrics = evaluate_detections(ranking, gold, index, cfg["eval"]["ks"])
    gold_ranks = rank_positions(ranking, gold.terms)
    payload = {"metrics": metrics, "gold_ranks": gold_ranks,
               "rank_stats": rank_summary(gold_ranks.values())}
    wd.evaluation.write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def stage_report(cfg: PipelineConfig, wd: Workdir,
                 force: bool = False) -> DetectionReport:
    """Assemble report.json and report.csv, then render the figures."""
    from .plots import render_report_figures

    if not _fresh(force, wd.report_json, wd.report_csv):
        return DetectionReport.load_json(wd.report_json)
    _need(wd.ranking, wd.seeds, wd.history)
    ranking = load_ranking(wd.ranking)
    seeds = read_term_file(wd.seeds)
    hist = json.loads(wd.history.read_text(encoding="utf-8"))
    metrics: list[dict] = []
    gold_ranks: dict[str, int] = {}
    rank_stats = None
    if wd.evaluation.exists():
        ev = json.loads(wd.evaluation.read_text(encoding="utf-8"))
        metrics = ev["metrics"]
        gold_ranks = ev["gold_ranks"]
        rank_stats = ev["rank_stats"]
    report = DetectionReport(
        seeds=seeds, ranking=ranking, metrics=metrics, gold_ranks=gold_ranks,
        rank_stats=rank_stats,
        meta={"config_digest": cfg.digest(), "n_candidates": len(ranking),
              "final_round": hist["final_round"],
              "rounds": [r["n_samples"] for r in hist["rounds"]]})
    report.save_json(wd.report_json)
    report.save_csv(wd.report_csv)
    render_report_figures(report, wd.root)
    return report


def run_pipeline(cfg: PipelineConfig, wd: Workdir, force: bool = False,
                 corpus: str | Path | None = None,
                 seeds: str | Path | None = None,
                 lexicon: str | Path | None = None) -> DetectionReport:
    """Every stage in order; with no corpus argument the synthetic benchmark
    is generated. Existing artifacts are reused unless force is set."""
    if corpus is None:
        stage_synth(cfg, wd, force)
    else:
        if seeds is None:
            raise InputError("ingesting a corpus requires a seeds file")
        stage_ingest(cfg, wd, corpus, seeds, lexicon, force)
    stage_embed(cfg, wd, force)
    stage_index(cfg, wd, force)
    stage_devset(cfg, wd, force)
    stage_build_coarse(cfg, wd, force)
    stage_train_coarse(cfg, wd, force)
    stage_build_fine(cfg, wd, force)
    stage_filter(cfg, wd, force)
    stage_iterate(cfg, wd, force)
    stage_score(cfg, wd, force)
    if wd.gold.exists():
        stage_evaluate(cfg, wd, force)
    return stage_report(cfg, wd, force)
