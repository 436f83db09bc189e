# src/synth.py
"""Seeded synthetic molecules, proteins and a planted knowledge graph with clustered ground truth."""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.embeddings import MOL, PROT, EmbeddingMatrix, EntityId
from src.errors import FormatError
from src.kg_store import KnowledgeGraph, Triple

logger = logging.getLogger(__name__)

INTERACTS = "interacts"

# Auxiliary relation names and the namespace of their per-cluster context nodes.
CONTEXT_RELATIONS = (
    ("annotated_with", "GO"),
    ("has_domain", "PFAM"),
    ("in_pathway", "PATHWAY"),
    ("catalyzes", "EC"),
)

# Probability that a context edge points at another cluster's node.
CONTEXT_NOISE = 0.1

Pair = Tuple[EntityId, EntityId]


@dataclass(frozen=True)
class SynthConfig:
    n_mols: int = 300
    n_prots: int = 150
    dim: int = 32
    n_clusters: int = 4
    noise_sigma: float = 0.1
    label_fraction: float = 0.5
    extra_relations: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.n_mols < 1 or self.n_prots < 1:
            raise ValueError("n_mols and n_prots must be positive")
        if self.dim < 2:
            raise ValueError("dim must be at least 2")
        if not 1 <= self.n_clusters <= min(self.n_mols, self.n_prots):
            raise ValueError("n_clusters must lie in [1, min(n_mols, n_prots)]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0 <= self.label_fraction <= 1:
            raise ValueError("label_fraction must lie in [0, 1]")
        if self.extra_relations < 0:
            raise ValueError("extra_relations must be non-negative")


def _ids(namespace: str, prefix: str, n: int) -> Tuple[EntityId, ...]:
    width = len(str(n - 1))
    return tuple(EntityId(namespace, f"{prefix}{i:0{width}d}") for i in range(n))


def _balanced_clusters(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % k)


def _draw(cfg: SynthConfig):
    rng = np.random.default_rng(cfg.seed)
    centers = rng.normal(size=(cfg.n_clusters, cfg.dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)

    mol_clusters = _balanced_clusters(cfg.n_mols, cfg.n_clusters, rng)
    prot_clusters = _balanced_clusters(cfg.n_prots, cfg.n_clusters, rng)
    mol_values = centers[mol_clusters] + cfg.noise_sigma * rng.normal(size=(cfg.n_mols, cfg.dim))
    prot_values = centers[prot_clusters] + cfg.noise_sigma * rng.normal(size=(cfg.n_prots, cfg.dim))

    mols = EmbeddingMatrix(_ids(MOL, "m", cfg.n_mols), mol_values, cfg.dim)
    prots = EmbeddingMatrix(_ids(PROT, "p", cfg.n_prots), prot_values, cfg.dim)
    true_pairs = [(mols.ids[i], prots.ids[j])
                  for i in range(cfg.n_mols) for j in range(cfg.n_prots)
                  if mol_clusters[i] == prot_clusters[j]]
    return mols, prots, true_pairs, mol_clusters, prot_clusters


def gen_embeddings(cfg: SynthConfig) -> Tuple[EmbeddingMatrix, EmbeddingMatrix, List[Pair]]:
    """Molecules and proteins around shared cluster centers; true pairs share a cluster"""
    mols, prots, true_pairs, _, _ = _draw(cfg)
    return mols, prots, true_pairs


def context_relations(n: int) -> List[Tuple[str, str]]:
    out = []
    for r in range(n):
        name, namespace = CONTEXT_RELATIONS[r % len(CONTEXT_RELATIONS)]
        if r >= len(CONTEXT_RELATIONS):
            name = f"{name}_{r // len(CONTEXT_RELATIONS)}"
        out.append((name, namespace))
    return out


def gen_planted_kg(cfg: SynthConfig, extra_relations: Optional[int] = None) -> Tuple[KnowledgeGraph, List[Pair]]:
    """KG with a label_fraction share of the true pairs as 'interacts' edges; the rest are returned hidden.

    Each auxiliary relation links every protein (even relations) or molecule
    (odd relations) to its cluster's context node, with a small share of
    edges pointing at another cluster.
    """
    extra = cfg.extra_relations if extra_relations is None else extra_relations
    if extra < 0:
        raise ValueError("extra_relations must be non-negative")
    mols, prots, true_pairs, mol_clusters, prot_clusters = _draw(cfg)
    rng = np.random.default_rng([cfg.seed, 1])

    n_visible = int(round(cfg.label_fraction * len(true_pairs)))
    perm = rng.permutation(len(true_pairs))
    visible = sorted(perm[:n_visible].tolist())
    hidden = sorted(perm[n_visible:].tolist())

    triples = [Triple(true_pairs[i][0], INTERACTS, true_pairs[i][1]) for i in visible]
    relations = [INTERACTS]
    for r, (name, namespace) in enumerate(context_relations(extra)):
        relations.append(name)
        members, clusters = (prots.ids, prot_clusters) if r % 2 == 0 else (mols.ids, mol_clusters)
        nodes = _ids(namespace, f"r{r}c", cfg.n_clusters)
        for eid, k in zip(members, clusters):
            if rng.random() < CONTEXT_NOISE:
                k = int(rng.integers(cfg.n_clusters))
            triples.append(Triple(eid, name, nodes[k]))

    kg = KnowledgeGraph(triples, entities=mols.ids + prots.ids, relations=relations)
    hidden_pairs = [true_pairs[i] for i in hidden]
    logger.info(f"✅ Planted KG: {len(kg)} triples, {n_visible} visible and {len(hidden_pairs)} hidden pairs")
    return kg, hidden_pairs


def save_pairs(pairs: Sequence[Pair], path: str) -> None:
    frame = pd.DataFrame([(str(m), str(p)) for m, p in pairs], columns=["mol", "prot"])
    frame.to_csv(path, sep="\t", index=False)


def load_pairs(path: str) -> List[Pair]:
    frame = pd.read_csv(path, sep="\t", dtype=str, keep_default_na=False)
    if list(frame.columns) != ["mol", "prot"]:
        raise FormatError("expected a 'mol\\tprot' header", path, 1)
    try:
        return [(EntityId.parse(m), EntityId.parse(p)) for m, p in frame.itertuples(index=False)]
    except ValueError as e:
        raise FormatError(str(e), path)
