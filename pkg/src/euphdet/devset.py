"""Labeled dev-set construction for the fine-grained scorer.

Euphemism surface forms come from a pluggable provider: an external
generation service, a prepared JSON file, or a deterministic template
generator for self-contained runs.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import requests

from .corpus import Corpus, detokenize, tokenize
from .datasets import mint_terms
from .errors import InputError, InvariantError, ProviderError

_LABELS = ("euph", "benign")


@dataclass(frozen=True)
class DevSample:
    """One labeled sentence; mask offsets are token offsets into text."""

    text: str
    mask_start: int
    mask_len: int
    label: str
    seed: str

    def __post_init__(self):
        if self.label not in _LABELS:
            raise InvariantError(f"label must be one of {_LABELS}")
        if self.mask_start < 0 or self.mask_len < 1:
            raise InvariantError("mask span must be non-empty and in range")
        if self.mask_start + self.mask_len > len(tokenize(self.text)):
            raise InvariantError("mask span runs past the sentence")

    def span_tokens(self) -> tuple[str, ...]:
        toks = tokenize(self.text)
        return tuple(toks[self.mask_start: self.mask_start + self.mask_len])


def save_dev_set(samples, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps({
                "text": s.text, "mask_start": s.mask_start,
                "mask_len": s.mask_len, "label": s.label, "seed": s.seed,
            }, sort_keys=True) + "\n")


def load_dev_set(path: str | Path) -> list[DevSample]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"dev set not found: {path}")
    out = []
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            out.append(DevSample(row["text"], int(row["mask_start"]),
                                 int(row["mask_len"]), row["label"],
                                 row["seed"]))
    return out


# ---------------------------------------------------------------------------
# providers

class TemplateProvider:
    """Mints pronounceable nonsense euphemisms; fully offline and seeded."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self._seen: set[str] = set()

    def generate(self, seed: str, n: int) -> list[str]:
        out = []
        for _ in range(n):
            k = 2 if self.rng.random() < 0.3 else 1
            words = mint_terms(self.rng, k, self._seen)
            self._seen.update(words)
            out.append(" ".join(words))
        return out


class FileProvider:
    """Serves euphemisms from a JSON object mapping seed -> list of strings."""

    def __init__(self, path: str | Path):
        path = Path(path)
        if not path.exists():
            raise InputError(f"euphemism file not found: {path}")
        data = json.loads(path.read_text(encoding="utf-8"))
        if not isinstance(data, dict):
            raise InputError("euphemism file must be a JSON object")
        self.data = {k: list(v) for k, v in data.items()}

    def generate(self, seed: str, n: int) -> list[str]:
        entries = self.data.get(seed)
        if not entries:
            raise ProviderError(f"no euphemisms listed for seed {seed!r}")
        return entries[:n]


class ExternalServiceProvider:
    """POSTs {"prompt", "n"} to a generation endpoint, expects {"choices"}.

    Configured by arguments or the EUPHDET_LLM_URL / EUPHDET_LLM_KEY /
    EUPHDET_LLM_TIMEOUT environment variables. Three attempts per call.
    """

    def __init__(self, url: str | None = None, api_key: str | None = None,
                 timeout: float | None = None, session=None):
        self.url = url or os.environ.get("EUPHDET_LLM_URL")
        if not self.url:
            raise InputError(
                "no generation service configured; set EUPHDET_LLM_URL")
        self.api_key = api_key or os.environ.get("EUPHDET_LLM_KEY")
        if timeout is None:
            timeout = float(os.environ.get("EUPHDET_LLM_TIMEOUT", "30"))
        self.timeout = timeout
        self.session = session if session is not None else requests.Session()

    def generate(self, seed: str, n: int) -> list[str]:
        prompt = (f"List {n} informal euphemisms or slang stand-ins for "
                  f"'{seed}' as used in online forum posts, one per line.")
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last = "no attempt made"
        for _ in range(3):
            try:
                resp = self.session.post(self.url,
                                         json={"prompt": prompt, "n": n},
                                         headers=headers,
                                         timeout=self.timeout)
            except requests.RequestException as exc:
                last = str(exc)
                continue
            if resp.status_code != 200:
                last = f"HTTP {resp.status_code}"
                continue
            try:
                choices = resp.json()["choices"]
            except (ValueError, KeyError) as exc:
                last = f"malformed response: {exc}"
                continue
            if (isinstance(choices, list)
                    and all(isinstance(c, str) for c in choices)):
                return choices
            last = "choices is not a list of strings"
        raise ProviderError(
            f"generation service failed after 3 attempts: {last}", attempts=3)


def generate_euphemism_candidates(provider, seed: str, n: int,
                                  exclude=()) -> list[str]:
    """Collect n distinct normalized euphemisms for a seed.

    Candidates are lowercased and tokenized; empties, duplicates, anything in
    `exclude`, and forms containing the seed itself are dropped. Up to three
    provider calls with growing requests before giving up.
    """
    if n < 1:
        raise InputError("need at least one euphemism")
    excl = set(exclude) | {seed}
    out: list[str] = []
    seen: set[str] = set()
    for attempt in range(1, 4):
        for cand in provider.generate(seed, n * attempt):
            norm = " ".join(tokenize(cand))
            if not norm or norm in seen or norm in excl:
                continue
            parts = norm.split(" ")
            if seed in parts or any(p in excl for p in parts):
                continue
            seen.add(norm)
            out.append(norm)
            if len(out) == n:
                return out
    raise ProviderError(
        f"could not collect {n} usable euphemisms for {seed!r}", attempts=3)


# ---------------------------------------------------------------------------
# dev-set assembly

def build_dev_set(corpus: Corpus, seeds, provider,
                  per_seed_sentences: int = 6,
                  rng: np.random.Generator | None = None,
                  exclude=()) -> list[DevSample]:
    """Balanced labeled dev set: one benign counterpart per euphemism sample.

    For every seed, its first per_seed_sentences corpus sentences each get
    the seed occurrence replaced by a generated euphemism (label euph). Each
    positive is paired with a matched benign sample: a seed-free sentence
    sharing the positive's rarest context word, masked at that word, so the
    benign span reuses the positive's topical vocabulary in a conventional
    context. When no sharing sentence is free, any unused seed-free sentence
    with a random single-token span stands in. `exclude` lists terms the
    generator must avoid, typically the planted gold terms.
    """
    if rng is None:
        raise InputError("build_dev_set needs an rng")
    if per_seed_sentences < 1:
        raise InputError("per_seed_sentences must be >= 1")
    seed_set = set(seeds)
    first_sites: dict[str, list[tuple]] = {s: [] for s in seeds}
    for sent in corpus:
        for pos, tok in enumerate(sent.tokens):
            if tok in seed_set and len(first_sites[tok]) < per_seed_sentences:
                first_sites[tok].append((sent, pos))
                break
    for s in seeds:
        if len(first_sites[s]) < per_seed_sentences:
            raise InvariantError(
                f"seed {s!r} appears in only {len(first_sites[s])} sentences, "
                f"need {per_seed_sentences}")
    freq: dict[str, int] = {}
    benign_pool: list = []
    postings: dict[str, list[int]] = {}
    for sent in corpus:
        for tok in sent.tokens:
            freq[tok] = freq.get(tok, 0) + 1
        if seed_set.isdisjoint(sent.tokens):
            i = len(benign_pool)
            benign_pool.append(sent)
            for tok in set(sent.tokens):
                postings.setdefault(tok, []).append(i)
    need_neg = len(list(seeds)) * per_seed_sentences
    if len(benign_pool) < need_neg:
        raise InvariantError(
            f"only {len(benign_pool)} seed-free sentences for "
            f"{need_neg} negatives")
    gen_exclude = set(exclude) | seed_set
    samples: list[DevSample] = []
    used: set[int] = set()
    for seed in seeds:
        euphs = generate_euphemism_candidates(provider, seed,
                                              per_seed_sentences, gen_exclude)
        for (sent, pos), euph in zip(first_sites[seed], euphs):
            etoks = euph.split(" ")
            toks = list(sent.tokens[:pos]) + etoks + list(sent.tokens[pos + 1:])
            samples.append(DevSample(detokenize(toks), pos, len(etoks),
                                     "euph", seed))
            anchors = sorted(set(sent.tokens) - seed_set,
                             key=lambda t: (freq[t], t))
            match = None
            for anchor in anchors:
                free = [i for i in postings.get(anchor, ()) if i not in used]
                if free:
                    ni = free[int(rng.integers(len(free)))]
                    sites = [p for p, t in enumerate(benign_pool[ni].tokens)
                             if t == anchor]
                    match = (ni, sites[int(rng.integers(len(sites)))])
                    break
            if match is None:
                free = [i for i in range(len(benign_pool)) if i not in used]
                if not free:
                    raise InvariantError("ran out of seed-free sentences "
                                         "while pairing negatives")
                ni = free[int(rng.integers(len(free)))]
                match = (ni, int(rng.integers(len(benign_pool[ni].tokens))))
            ni, npos = match
            used.add(ni)
            samples.append(DevSample(detokenize(benign_pool[ni].tokens),
                                     npos, 1, "benign", seed))
    validate_dev_set(samples, exclude=exclude)
    return samples


def validate_dev_set(samples, exclude=()) -> None:
    """Structural checks; raises InvariantError on the first violation.

    The euphemism inventory is derived from the positive spans themselves, so
    the check also works on dev sets loaded from disk.
    """
    if not samples:
        raise InvariantError("empty dev set")
    n_pos = sum(1 for s in samples if s.label == "euph")
    if 2 * n_pos != len(samples):
        raise InvariantError("dev set is not balanced")
    euph_tokens: set[str] = set()
    for s in samples:
        if s.label == "euph":
            span = s.span_tokens()
            if not span:
                raise InvariantError("positive sample with an empty span")
            euph_tokens.update(span)
    banned = euph_tokens & set(exclude)
    if banned:
        raise InvariantError(
            f"generated euphemisms collide with excluded terms: "
            f"{sorted(banned)[:5]}")
    seen_texts: set[str] = set()
    for s in samples:
        if s.text in seen_texts:
            raise InvariantError(f"duplicate dev text: {s.text[:60]!r}")
        seen_texts.add(s.text)
        if s.label == "benign":
            if euph_tokens & set(tokenize(s.text)):
                raise InvariantError(
                    "benign sample contains a generated euphemism")
