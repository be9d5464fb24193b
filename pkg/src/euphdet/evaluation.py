"""Ranking metrics and the detection report. Pure data in, data out; the CLI
report command owns figure rendering."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import GoldLabels
from .errors import InputError, InvariantError
from .index import InvertedIndex


def precision_at_k(n_impromptu: int, n_flagged: int) -> float:
    """Per-mille precision: impromptu occurrences per thousand flagged.

    Zero flagged occurrences give 0 by convention; more impromptu hits than
    flagged occurrences is impossible and raises.
    """
    if n_impromptu < 0 or n_flagged < 0:
        raise InvariantError("occurrence counts cannot be negative")
    if n_impromptu > n_flagged:
        raise InvariantError(
            f"{n_impromptu} impromptu hits among only {n_flagged} flagged")
    if n_flagged == 0:
        return 0.0
    return 1000.0 * n_impromptu / n_flagged


def recall_at_k(n_impromptu: int, n_impromptu_total: int) -> float:
    """Fraction of all planted occurrences that were flagged."""
    if n_impromptu_total <= 0:
        raise InvariantError("recall needs a positive planted-occurrence total")
    if not 0 <= n_impromptu <= n_impromptu_total:
        raise InvariantError("flagged planted count outside [0, total]")
    return n_impromptu / n_impromptu_total


def evaluate_detections(ranking, gold: GoldLabels, index: InvertedIndex,
                        ks) -> list[dict]:
    """Metrics for each cutoff k over a (term, score, n_occ) ranking.

    The top k terms flag every corpus occurrence of those terms (via the
    inverted index); an occurrence counts as impromptu when it is a gold
    planted site. When k exceeds the ranking length the whole ranking is
    used and k_effective records the saturation.
    """
    gold_sites = gold.all_sites()
    total = gold.total_occurrences()
    out = []
    for k in sorted(set(int(k) for k in ks)):
        if k < 1:
            raise InputError("cutoff k must be >= 1")
        k_eff = min(k, len(ranking))
        n_flagged = 0
        n_imp = 0
        for term, _, _ in ranking[:k_eff]:
            postings = index.postings_for(term)
            n_flagged += len(postings)
            n_imp += sum(1 for site in postings if site in gold_sites)
        out.append({
            "k": k,
            "k_effective": k_eff,
            "n_flagged": n_flagged,
            "n_impromptu": n_imp,
            "precision_permille": precision_at_k(n_imp, n_flagged),
            "recall": recall_at_k(n_imp, total),
        })
    return out


def rank_summary(ranks) -> dict:
    """Five-number summary plus mean of a collection of 1-based ranks.

    Quartiles use linear interpolation between order statistics.
    """
    values = np.asarray(sorted(ranks), dtype=np.float64)
    if values.size == 0:
        raise InputError("rank_summary needs at least one rank")
    if (values < 1).any():
        raise InvariantError("ranks are 1-based")
    q1, med, q3 = np.percentile(values, [25, 50, 75], method="linear")
    return {"min": float(values[0]), "q1": float(q1), "median": float(med),
            "q3": float(q3), "max": float(values[-1]),
            "mean": float(values.mean())}


@dataclass
class DetectionReport:
    """Everything the report stage emits, serializable deterministically."""

    seeds: list[str]
    ranking: list[tuple[str, float, int]]
    metrics: list[dict]
    gold_ranks: dict[str, int] = field(default_factory=dict)
    rank_stats: dict | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "seeds": list(self.seeds),
            "ranking": [[t, s, n] for t, s, n in self.ranking],
            "metrics": self.metrics,
            "gold_ranks": self.gold_ranks,
            "rank_stats": self.rank_stats,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectionReport":
        return cls(seeds=list(d["seeds"]),
                   ranking=[(r[0], float(r[1]), int(r[2]))
                            for r in d["ranking"]],
                   metrics=list(d["metrics"]),
                   gold_ranks=dict(d.get("gold_ranks", {})),
                   rank_stats=d.get("rank_stats"),
                   meta=dict(d.get("meta", {})))

    def save_json(self, path: str | Path) -> None:
        text = json.dumps(self.to_dict(), sort_keys=True, indent=2)
        Path(path).write_text(text + "\n", encoding="utf-8")

    @classmethod
    def load_json(cls, path: str | Path) -> "DetectionReport":
        path = Path(path)
        if not path.exists():
            raise InputError(f"report not found: {path}")
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))

    def save_csv(self, path: str | Path) -> None:
        """Delimited per-cutoff table mirroring the JSON metrics."""
        lines = ["k,n_flagged,n_impromptu,precision_permille,recall"]
        for row in self.metrics:
            lines.append("%d,%d,%d,%.6f,%.6f" % (
                row["k"], row["n_flagged"], row["n_impromptu"],
                row["precision_permille"], row["recall"]))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
