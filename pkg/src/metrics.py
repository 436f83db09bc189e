# src/metrics.py
"""Ranking and virtual-screening metrics plus the evaluation drivers."""
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from src.kg_embed import HEAD, TAIL, rank_candidates
from src.kg_store import KnowledgeGraph, Split

logger = logging.getLogger(__name__)

# Pair counting is exact and quadratic; above this size AUROC uses the rank-sum form.
PAIR_COUNT_LIMIT = 10_000
PAIR_CHUNK = 1024

DEFAULT_KS = (1, 3, 5, 10)
DEFAULT_FRACTIONS = (0.01, 0.05)
DEFAULT_BEDROC_ALPHA = 20.0


@dataclass(frozen=True)
class RankingResult:
    query: str
    rank_of_truth: int

    def __post_init__(self):
        if self.rank_of_truth < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank_of_truth}")


@dataclass(frozen=True)
class LabeledScores:
    scores: np.ndarray
    labels: np.ndarray
    target: str = ""

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        labels = np.asarray(self.labels).reshape(-1)
        if scores.shape != labels.shape:
            raise ValueError(f"{scores.size} scores for {labels.size} labels")
        if not np.all(np.isin(labels, (0, 1))):
            raise ValueError("labels must be 0 or 1")
        if not np.all(np.isfinite(scores)):
            raise ValueError("scores must be finite")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels.astype(np.int64))

    @property
    def n_actives(self) -> int:
        return int(self.labels.sum())

    @property
    def n_decoys(self) -> int:
        return int(self.labels.size - self.labels.sum())

    def require_both_classes(self) -> None:
        if self.n_actives == 0 or self.n_decoys == 0:
            name = f" for target {self.target}" if self.target else ""
            raise ValueError(f"Need at least one active and one decoy{name} "
                             f"(got {self.n_actives} actives, {self.n_decoys} decoys)")


@dataclass
class MetricsReport:
    values: Dict[str, float]
    per_target: Dict[str, Dict[str, float]] = field(default_factory=dict)
    config: Dict[str, Any] = field(default_factory=dict)
    seed: Optional[int] = None

    def __getitem__(self, name: str) -> float:
        return self.values[name]

    def to_dict(self) -> Dict[str, Any]:
        return {**self.values, "per_target": self.per_target, "config": self.config, "seed": self.seed}

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=False)
        logger.info(f"📄 Metrics written to {path}")


def load_metrics_report(path: str) -> MetricsReport:
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    per_target = data.pop("per_target", {})
    config = data.pop("config", {})
    seed = data.pop("seed", None)
    return MetricsReport({k: float(v) for k, v in data.items()}, per_target, config, seed)


def hits_at_k(results: Sequence[RankingResult], k: float) -> float:
    """Fraction of queries whose truth ranks within the top k (k may be math.inf)"""
    if not results:
        raise ValueError("hits_at_k needs at least one result")
    if k < 1:
        raise ValueError("k must be >= 1")
    return sum(r.rank_of_truth <= k for r in results) / len(results)


def mean_reciprocal_rank(results: Sequence[RankingResult]) -> float:
    if not results:
        raise ValueError("mean_reciprocal_rank needs at least one result")
    return float(np.mean([1.0 / r.rank_of_truth for r in results]))


def mean_rank(results: Sequence[RankingResult]) -> float:
    if not results:
        raise ValueError("mean_rank needs at least one result")
    return float(np.mean([r.rank_of_truth for r in results]))


def _auroc_pairs(pos: np.ndarray, neg: np.ndarray) -> float:
    wins = 0.0
    for start in range(0, pos.size, PAIR_CHUNK):
        block = pos[start:start + PAIR_CHUNK, None]
        wins += float(np.sum(block > neg[None, :])) + 0.5 * float(np.sum(block == neg[None, :]))
    return wins / (pos.size * neg.size)


def _auroc_ranksum(d: LabeledScores) -> float:
    ranks = rankdata(d.scores, method="average")
    n_pos, n_neg = d.n_actives, d.n_decoys
    u = ranks[d.labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc(d: LabeledScores, method: str = "auto") -> float:
    """P(active scores above decoy) + 0.5 P(tie)"""
    d.require_both_classes()
    if method == "auto":
        method = "pairs" if d.scores.size <= PAIR_COUNT_LIMIT else "ranksum"
    if method == "pairs":
        return _auroc_pairs(d.scores[d.labels == 1], d.scores[d.labels == 0])
    if method == "ranksum":
        return _auroc_ranksum(d)
    raise ValueError(f"Unknown AUROC method {method!r}")


def ranked_labels(d: LabeledScores) -> np.ndarray:
    """Labels ordered best score first; ties keep ascending original index"""
    order = np.lexsort((np.arange(d.scores.size), -d.scores))
    return d.labels[order]


def rie(d: LabeledScores, alpha: float = DEFAULT_BEDROC_ALPHA) -> float:
    """Robust initial enhancement of the actives"""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if d.n_actives == 0:
        raise ValueError("RIE needs at least one active")
    labels = ranked_labels(d)
    n = labels.size
    ra = d.n_actives / n
    ranks = np.flatnonzero(labels) + 1.0
    observed = np.exp(-alpha * ranks / n).sum()
    expected = ra * (1 - math.exp(-alpha)) / (math.exp(alpha / n) - 1)
    return float(observed / expected)


def bedroc(d: LabeledScores, alpha: float = DEFAULT_BEDROC_ALPHA) -> float:
    """BEDROC: RIE rescaled onto [0, 1]"""
    d.require_both_classes()
    ra = d.n_actives / d.scores.size
    ri = 1.0 - ra
    value = (rie(d, alpha) * ra * math.sinh(alpha / 2)
             / (math.cosh(alpha / 2) - math.cosh(alpha / 2 - alpha * ra))
             + 1.0 / (1.0 - math.exp(alpha * ri)))
    return float(min(1.0, max(0.0, value)))


def enrichment_factor(d: LabeledScores, fraction: float) -> float:
    """(actives in top ceil(fraction N) / that count) / (actives / N)"""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    if d.n_actives == 0:
        raise ValueError("Enrichment factor needs at least one active")
    n = d.scores.size
    n_top = math.ceil(fraction * n - 1e-9)
    if n_top < 1:
        raise ValueError(f"fraction {fraction} selects no items out of {n}")
    found = int(ranked_labels(d)[:n_top].sum())
    # Integer products keep EF at fraction 1.0 exactly 1.
    return (found * n) / (n_top * d.n_actives)


def evaluate_link_prediction(model, split: Split, kg: Optional[KnowledgeGraph] = None,
                             ks: Sequence[int] = DEFAULT_KS) -> MetricsReport:
    """Filtered ranking of each held-out triple's tail and head among same-namespace entities.

    Known triples (training graph, the full graph if given, and all test
    triples) are filtered from the candidates except the truth itself.
    """
    if not split.test:
        raise ValueError("Cannot evaluate an empty test set")
    train = split.train
    test_rows = train.encode(split.test)
    known = set(train.encoded_set) | {tuple(r) for r in test_rows.tolist()}
    if kg is not None:
        known |= {tuple(r) for r in train.encode(t for t in kg.triples if t.head in train.entity_index
                                                 and t.tail in train.entity_index
                                                 and t.relation in train.relation_index).tolist()}

    results = {TAIL: [], HEAD: []}
    for triple, (h, r, t) in zip(split.test, test_rows.tolist()):
        tails = train.namespace_indices(triple.tail.namespace)
        ranking = rank_candidates(model, h, r, TAIL, tails, known, keep=t)
        rank = next(i for i, (e, _) in enumerate(ranking, 1) if e == t)
        results[TAIL].append(RankingResult(f"{triple.head}\t{triple.relation}\t?", rank))

        heads = train.namespace_indices(triple.head.namespace)
        ranking = rank_candidates(model, t, r, HEAD, heads, known, keep=h)
        rank = next(i for i, (e, _) in enumerate(ranking, 1) if e == h)
        results[HEAD].append(RankingResult(f"?\t{triple.relation}\t{triple.tail}", rank))

    def summarize(rs: List[RankingResult]) -> Dict[str, float]:
        out = {f"hits@{k}": hits_at_k(rs, k) for k in ks}
        out["mrr"] = mean_reciprocal_rank(rs)
        out["mean_rank"] = mean_rank(rs)
        return out

    report = MetricsReport(summarize(results[TAIL] + results[HEAD]),
                           {TAIL: summarize(results[TAIL]), HEAD: summarize(results[HEAD])})
    logger.info(f"✅ Link prediction on {len(split.test)} held-out triples: "
                + ", ".join(f"{k}={v:.4f}" for k, v in report.values.items()))
    return report


def screening_metrics(d: LabeledScores, fractions: Sequence[float] = DEFAULT_FRACTIONS,
                      alpha: float = DEFAULT_BEDROC_ALPHA) -> Dict[str, float]:
    """AUROC, BEDROC(alpha) and EF at each fraction for one target"""
    d.require_both_classes()
    row = {"auroc": auroc(d), f"bedroc@{alpha:g}": bedroc(d, alpha)}
    for fraction in fractions:
        row[f"ef@{fraction:g}"] = enrichment_factor(d, fraction)
    return row


def evaluate_screening(per_target: Sequence[LabeledScores], fractions: Sequence[float] = DEFAULT_FRACTIONS,
                       alpha: float = DEFAULT_BEDROC_ALPHA) -> MetricsReport:
    """Per-target screening metrics, macro-averaged across targets; target names must be unique"""
    if not per_target:
        raise ValueError("evaluate_screening needs at least one target")
    rows = {}
    for i, d in enumerate(per_target):
        name = d.target or f"target_{i}"
        if name in rows:
            raise ValueError(f"Duplicate screening target {name!r}")
        rows[name] = screening_metrics(d, fractions, alpha)
    table = pd.DataFrame.from_dict(rows, orient="index")
    macro = {name: float(value) for name, value in table.mean(axis=0).items()}
    logger.info(f"✅ Screening over {len(rows)} targets: "
                + ", ".join(f"{k}={v:.4f}" for k, v in macro.items()))
    return MetricsReport(macro, {target: dict(row) for target, row in rows.items()})
