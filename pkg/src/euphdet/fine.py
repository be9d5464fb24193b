"""Fine-grained euphemism scoring: masked-LM training with context
augmentation, per-occurrence seed-probability scores, and the iterative
keep-the-best-half retraining loop."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .coarse import batch_indices
from .corpus import Vocabulary, tokenize
from .datasets import MaskedSample
from .errors import InputError, InvariantError, TrainingDiverged
from .model import (AdamState, ModelConfig, backward_step, encode,
                    init_params, mlm_probs, pad_batch)


def mask_for_cam(length: int, target_pos: int, rng: np.random.Generator,
                 rate: float = 0.5) -> np.ndarray:
    """Positions to mask for the context-augmentation pass.

    floor(rate * length) positions, never fewer than one, always including
    the masked-LM target itself; the rest drawn without replacement. Sorted.
    """
    if length < 2:
        raise InvariantError("context augmentation needs at least two tokens")
    if not 0 <= target_pos < length:
        raise InvariantError("target position outside the sentence")
    if not 0.0 < rate <= 1.0:
        raise InputError("mask rate must lie in (0, 1]")
    n = max(1, math.floor(rate * length))
    others = np.array([p for p in range(length) if p != target_pos],
                      dtype=np.int64)
    extra = rng.permutation(others)[: n - 1]
    return np.sort(np.concatenate((np.array([target_pos], dtype=np.int64),
                                   extra)))


def _fine_batch(samples, idx, vocab: Vocabulary, cam: bool, cam_rate: float,
                rng: np.random.Generator | None):
    ids, lengths = pad_batch([list(samples[int(i)].token_ids) for i in idx],
                             vocab.pad_id)
    pos = np.array([samples[int(i)].mask_positions[0] for i in idx],
                   dtype=np.int64)
    tgt = np.array([samples[int(i)].target_ids[0] for i in idx],
                   dtype=np.int64)
    batch = {"mlm": {"ids": ids, "lengths": lengths, "pos": pos, "target": tgt}}
    if cam:
        rows, b_idx, t_pos, targets = [], [], [], []
        for row, i in enumerate(idx):
            s = samples[int(i)]
            orig = list(s.restore())
            toks = list(orig)
            for p in mask_for_cam(len(orig), s.mask_positions[0], rng, cam_rate):
                b_idx.append(row)
                t_pos.append(int(p))
                targets.append(orig[p])
                toks[p] = vocab.mask_id
            rows.append(toks)
        cids, clens = pad_batch(rows, vocab.pad_id)
        batch["cam"] = {"ids": cids, "lengths": clens,
                        "b_idx": np.array(b_idx, dtype=np.int64),
                        "t_pos": np.array(t_pos, dtype=np.int64),
                        "target": np.array(targets, dtype=np.int64)}
    return batch


def train_fine(train, dev, vocab: Vocabulary, config: ModelConfig,
               seeds, *, epochs: int = 20, patience: int = 3,
               batch_size: int = 32, lr: float = 1e-3, cam: bool = True,
               cam_rate: float = 0.5, rng: np.random.Generator | None = None
               ) -> tuple[dict, list[dict]]:
    """Train the masked-LM scorer, keeping the best dev-accuracy parameters.

    Augmentation masks are drawn fresh every epoch. Early stopping counts
    epochs whose accuracy falls strictly below the running best and stops
    once the count reaches `patience` (patience=0 trains exactly one epoch).
    Ties refresh the kept checkpoint: dev accuracy is quantized and tends to
    plateau at its ceiling, and at equal accuracy the longer-trained
    parameters score candidates better. History rows carry
    {"epoch", "train_loss", "dev_accuracy"}.
    """
    if rng is None:
        raise InputError("train_fine needs an rng")
    if not train:
        raise InputError("empty fine-grained training set")
    if epochs < 1:
        raise InputError("epochs must be >= 1")
    params = init_params(config, rng)
    opt = AdamState(lr=lr)
    best_params = {k: v.copy() for k, v in params.items()}
    best_acc = -np.inf
    since_best = 0
    history: list[dict] = []
    for epoch in range(epochs):
        running = 0.0
        seen = 0
        for idx in batch_indices(len(train), batch_size, rng):
            batch = _fine_batch(train, idx, vocab, cam, cam_rate, rng)
            try:
                loss = backward_step(params, config, batch, "fine", opt,
                                     train=True, rng=rng)
            except TrainingDiverged as exc:
                exc.last_good = best_params
                raise
            running += loss * len(idx)
            seen += len(idx)
        acc = dev_accuracy(params, config, vocab, dev, seeds)
        history.append({"epoch": epoch, "train_loss": running / seen,
                        "dev_accuracy": acc})
        if acc >= best_acc:
            best_acc = acc
            best_params = {k: v.copy() for k, v in params.items()}
            since_best = 0
        else:
            since_best += 1
        if since_best >= patience:
            break
    return best_params, history


# ---------------------------------------------------------------------------
# scoring

def seed_id_array(vocab: Vocabulary, seeds) -> np.ndarray:
    ids = []
    for s in seeds:
        tid = vocab.term_id(s)
        if tid is None:
            raise InputError(f"seed {s!r} not in vocabulary")
        ids.append(tid)
    if not ids:
        raise InputError("empty seed set")
    return np.array(sorted(set(ids)), dtype=np.int64)


def occurrence_scores(params, config: ModelConfig, vocab: Vocabulary,
                      samples, seeds, batch_size: int = 64) -> np.ndarray:
    """Log seed-probability mass at each masked slot, one score per sample.

    The masked-LM distribution is renormalized over regular terms before the
    seed mass is taken, so special tokens and the classifier slot never soak
    up probability; scoring every term as a seed therefore gives exactly 0.
    """
    seed_ids = seed_id_array(vocab, seeds)
    out = np.empty(len(samples), dtype=np.float64)
    for idx in batch_indices(len(samples), batch_size):
        ids, lengths = pad_batch(
            [list(samples[int(i)].token_ids) for i in idx], vocab.pad_id)
        pos = np.array([samples[int(i)].mask_positions[0] for i in idx],
                       dtype=np.int64)
        trace = encode(params, config, ids, lengths, train=False)
        probs = mlm_probs(params, config, trace,
                          np.column_stack([np.arange(len(idx)), pos]))
        # take() keeps the seed columns C-ordered, so numerator and
        # denominator reduce in the same order; with the whole vocabulary
        # as seeds the ratio is then exactly 1 and the score exactly 0
        reg = np.ascontiguousarray(probs[:, : vocab.n_terms])
        mass = reg.take(seed_ids, axis=1).sum(axis=1) / reg.sum(axis=1)
        out[idx] = np.log(np.clip(mass, 1e-300, None))
    return out


def _contract_span(ids: list[int], start: int, length: int,
                   mask_id: int) -> list[int]:
    # multi-token spans collapse to a single mask so one distribution covers
    # the whole hidden phrase
    if length < 1 or start < 0 or start + length > len(ids):
        raise InvariantError("mask span outside the sentence")
    return ids[:start] + [mask_id] + ids[start + length:]


def dev_accuracy(params, config: ModelConfig, vocab: Vocabulary, samples,
                 seeds, batch_size: int = 64) -> float:
    """Rank-based accuracy on a labeled dev set of raw-text samples.

    Each sample's mask span is contracted to one mask token and scored by
    seed-probability mass; a sample is predicted positive when its score is
    strictly above the dev-set median. Returns the fraction of correct
    predictions, or 0.5 when every score is identical.
    """
    if not samples:
        raise InputError("empty dev set")
    seed_ids = seed_id_array(vocab, seeds)
    rows = []
    positions = []
    gold = np.empty(len(samples), dtype=bool)
    for i, s in enumerate(samples):
        ids = vocab.encode(tokenize(s.text))
        rows.append(_contract_span(ids, s.mask_start, s.mask_len,
                                   vocab.mask_id))
        positions.append(s.mask_start)
        gold[i] = s.label == "euph"
    scores = np.empty(len(samples), dtype=np.float64)
    for idx in batch_indices(len(samples), batch_size):
        ids, lengths = pad_batch([rows[int(i)] for i in idx], vocab.pad_id)
        trace = encode(params, config, ids, lengths, train=False)
        pos = np.array([positions[int(i)] for i in idx], dtype=np.int64)
        probs = mlm_probs(params, config, trace,
                          np.column_stack([np.arange(len(idx)), pos]))
        reg = probs[:, : vocab.n_terms]
        scores[idx] = reg[:, seed_ids].sum(axis=1) / reg.sum(axis=1)
    if np.all(scores == scores[0]):
        return 0.5
    pred = scores > np.median(scores)
    return float(np.mean(pred == gold))


def score_candidates(params, config: ModelConfig, vocab: Vocabulary,
                     samples, seeds, batch_size: int = 64
                     ) -> list[tuple[str, float, int]]:
    """Rank candidate terms by mean occurrence score.

    Returns (term, score, n_occurrences) rows sorted by score descending with
    ties broken by term ascending.
    """
    if not samples:
        return []
    scores = occurrence_scores(params, config, vocab, samples, seeds,
                               batch_size)
    agg: dict[str, list[float]] = {}
    for s, sc in zip(samples, scores):
        agg.setdefault(vocab.id_term(s.target_ids[0]), []).append(float(sc))
    ranking = [(term, float(np.mean(v)), len(v)) for term, v in agg.items()]
    ranking.sort(key=lambda r: (-r[1], r[0]))
    return ranking


def rank_positions(ranking, terms) -> dict[str, int]:
    """1-based rank of each term in a ranking; absent terms get len+1."""
    where = {row[0]: i + 1 for i, row in enumerate(ranking)}
    return {t: where.get(t, len(ranking) + 1) for t in terms}


# ---------------------------------------------------------------------------
# iterative self-training

@dataclass
class RoundResult:
    round: int
    samples: list[MaskedSample]
    params: dict
    history: list[dict]


def keep_top_occurrences(samples, scores, keep_fraction: float,
                         vocab: Vocabulary) -> list[MaskedSample]:
    """The ceil(keep_fraction * n) best-scoring occurrences.

    Ordered for selection by (score desc, term asc, sentence asc, position
    asc); the kept list itself comes back sorted by (sentence, position) so
    dumps of it are stable.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise InputError("keep_fraction must lie in (0, 1]")
    n = len(samples)
    if n == 0:
        return []
    if len(scores) != n:
        raise InvariantError("one score per occurrence required")
    k = math.ceil(keep_fraction * n)
    order = sorted(range(n), key=lambda i: (
        -scores[i], vocab.id_term(samples[i].target_ids[0]),
        samples[i].sentence_id, samples[i].mask_positions[0]))
    kept = [samples[i] for i in order[:k]]
    kept.sort(key=lambda s: (s.sentence_id, s.mask_positions[0]))
    return kept


def iterate_training(samples, dev, vocab: Vocabulary, config: ModelConfig,
                     seeds, *, rounds: int = 1, keep_fraction: float = 0.5,
                     epochs: int = 20, patience: int = 3, batch_size: int = 32,
                     lr: float = 1e-3, cam: bool = True, cam_rate: float = 0.5,
                     rng: np.random.Generator | None = None
                     ) -> list[RoundResult]:
    """Train, prune the training set to its best occurrences, retrain.

    Round 0 trains on the full refined set. Every later round scores the
    previous round's training occurrences with the model it produced, keeps
    the top keep_fraction, and retrains from a fresh initialization. Stops
    early when the surviving set is smaller than one batch. The last result's
    params are the final model.
    """
    if rng is None:
        raise InputError("iterate_training needs an rng")
    if rounds < 0:
        raise InputError("rounds must be >= 0")
    if not 0.0 < keep_fraction <= 1.0:
        raise InputError("keep_fraction must lie in (0, 1]")
    current = list(samples)
    results: list[RoundResult] = []
    for r in range(rounds + 1):
        if r > 0:
            prev = results[-1]
            scores = occurrence_scores(prev.params, config, vocab,
                                       prev.samples, seeds, batch_size)
            current = keep_top_occurrences(prev.samples, scores,
                                           keep_fraction, vocab)
            if len(current) < batch_size:
                break
        params, history = train_fine(
            current, dev, vocab, config, seeds, epochs=epochs,
            patience=patience, batch_size=batch_size, lr=lr, cam=cam,
            cam_rate=cam_rate, rng=rng)
        results.append(RoundResult(r, list(current), params, history))
    return results
