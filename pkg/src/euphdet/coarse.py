"""Coarse candidate filter: a small transformer classifier that decides from
masked context alone whether the hidden token could be a euphemism use."""

from __future__ import annotations

import numpy as np

from .corpus import Vocabulary
from .datasets import MaskedSample
from .errors import InputError, TrainingDiverged
from .model import (AdamState, ModelConfig, backward_step, classify, encode,
                    init_params, pad_batch)


def batch_indices(n: int, batch_size: int,
                  rng: np.random.Generator | None = None):
    """Yield index arrays covering range(n), shuffled when an rng is given."""
    if batch_size < 1:
        raise InputError("batch_size must be >= 1")
    idx = np.arange(n)
    if rng is not None:
        rng.shuffle(idx)
    for i in range(0, n, batch_size):
        yield idx[i: i + batch_size]


def _coarse_batch(samples, idx, vocab: Vocabulary, config: ModelConfig):
    # classification reads the hidden state at position 0, so every sequence
    # gets the CLS id prepended
    ids, lengths = pad_batch(
        [[config.cls_id] + list(samples[int(i)].token_ids) for i in idx],
        vocab.pad_id)
    labels = np.array([samples[int(i)].label for i in idx], dtype=np.int64)
    return {"ids": ids, "lengths": lengths, "labels": labels}


def coarse_dev_loss(params, config: ModelConfig, vocab: Vocabulary,
                    samples, batch_size: int = 64) -> float:
    """Mean negative log-likelihood over a labeled sample list, eval mode."""
    if not samples:
        raise InputError("empty evaluation set")
    total = 0.0
    for idx in batch_indices(len(samples), batch_size):
        b = _coarse_batch(samples, idx, vocab, config)
        trace = encode(params, config, b["ids"], b["lengths"], train=False)
        probs = classify(params, config, trace)
        p = np.clip(probs[np.arange(len(idx)), b["labels"]], 1e-12, None)
        total += float(-np.log(p).sum())
    return total / len(samples)


def train_coarse(train, dev, vocab: Vocabulary, config: ModelConfig, *,
                 epochs: int = 20, patience: int = 3, batch_size: int = 32,
                 lr: float = 1e-3, rng: np.random.Generator | None = None
                 ) -> tuple[dict, list[dict]]:
    """Train the classifier, keeping the parameters with the best dev loss.

    Stops after `epochs` epochs or once the epochs elapsed since the best dev
    loss reach `patience`, whichever comes first; patience=0 trains for
    exactly one epoch. Returns (best_params, history) where history has one
    {"epoch", "train_loss", "dev_loss"} row per completed epoch.
    """
    if rng is None:
        raise InputError("train_coarse needs an rng")
    if not train or not dev:
        raise InputError("train and dev sets must be non-empty")
    if epochs < 1:
        raise InputError("epochs must be >= 1")
    params = init_params(config, rng)
    opt = AdamState(lr=lr)
    best_params = {k: v.copy() for k, v in params.items()}
    best_loss = np.inf
    since_best = 0
    history: list[dict] = []
    for epoch in range(epochs):
        running = 0.0
        seen = 0
        for idx in batch_indices(len(train), batch_size, rng):
            b = _coarse_batch(train, idx, vocab, config)
            try:
                loss = backward_step(params, config, b, "coarse", opt,
                                     train=True, rng=rng)
            except TrainingDiverged as exc:
                exc.last_good = best_params
                raise
            running += loss * len(idx)
            seen += len(idx)
        dev_loss = coarse_dev_loss(params, config, vocab, dev, batch_size)
        history.append({"epoch": epoch, "train_loss": running / seen,
                        "dev_loss": dev_loss})
        if dev_loss < best_loss:
            best_loss = dev_loss
            best_params = {k: v.copy() for k, v in params.items()}
            since_best = 0
        else:
            since_best += 1
        if since_best >= patience:
            break
    return best_params, history


def candidate_probabilities(params, config: ModelConfig, vocab: Vocabulary,
                            samples, batch_size: int = 64) -> np.ndarray:
    """P(euphemism use) for each masked sample, in input order."""
    probs = np.empty(len(samples), dtype=np.float64)
    for idx in batch_indices(len(samples), batch_size):
        ids, lengths = pad_batch(
            [[config.cls_id] + list(samples[int(i)].token_ids) for i in idx],
            vocab.pad_id)
        trace = encode(params, config, ids, lengths, train=False)
        probs[idx] = classify(params, config, trace)[:, 1]
    return probs


def filter_candidates(params, config: ModelConfig, vocab: Vocabulary,
                      samples: list[MaskedSample], threshold: float = 0.5,
                      batch_size: int = 64
                      ) -> tuple[list[MaskedSample], np.ndarray]:
    """Keep the samples whose classifier probability reaches the threshold.

    Returns (kept_samples, all_probabilities); the probability array is
    aligned with the input list so callers can inspect what was dropped.
    """
    if not 0.0 <= threshold <= 1.0:
        raise InputError("threshold must lie in [0, 1]")
    if not samples:
        return [], np.empty(0)
    probs = candidate_probabilities(params, config, vocab, samples, batch_size)
    kept = [s for s, p in zip(samples, probs) if p >= threshold]
    return kept, probs
