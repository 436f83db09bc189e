# src/kg_store.py
"""Knowledge-graph triples: ingestion, vocabularies, held-out split, pseudo edges, batch sampling."""
import logging
from collections import Counter
from dataclasses import dataclass
from types import MappingProxyType
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from src.embeddings import EntityId
from src.errors import FormatError, InfeasibleSplitError

logger = logging.getLogger(__name__)

RelationId = str

PSEUDO_RELATION: RelationId = "pseudo_interaction"

REAL = "real"
PSEUDO = "pseudo"
NEGATIVE = "negative"

# Random corruption attempts before enumerating the remaining candidates.
MAX_CORRUPTION_TRIES = 32


class Triple(NamedTuple):
    head: EntityId
    relation: RelationId
    tail: EntityId

    def __str__(self) -> str:
        return f"{self.head}\t{self.relation}\t{self.tail}"


class KnowledgeGraph:
    """Immutable triple set with entity and relation vocabularies.

    Vocabularies keep first-appearance order (after any explicitly supplied
    entries), so integer indices are stable across derived graphs that pass
    the parent vocabularies through.
    """

    def __init__(self, triples: Iterable[Triple] = (), pseudo_weights: Optional[Mapping[Triple, float]] = None,
                 entities: Sequence[EntityId] = (), relations: Sequence[RelationId] = ()):
        ordered: Dict[Triple, None] = {}
        for t in triples:
            ordered.setdefault(Triple(*t), None)
        self.triples: Tuple[Triple, ...] = tuple(ordered)

        entity_index: Dict[EntityId, int] = {}
        for eid in list(entities) + [e for t in self.triples for e in (t.head, t.tail)]:
            entity_index.setdefault(eid, len(entity_index))
        relation_index: Dict[RelationId, int] = {}
        for rel in list(relations) + [t.relation for t in self.triples] + [PSEUDO_RELATION]:
            if not rel or any(ch.isspace() for ch in rel):
                raise ValueError(f"Invalid relation name {rel!r}")
            relation_index.setdefault(rel, len(relation_index))

        self.entities: Tuple[EntityId, ...] = tuple(entity_index)
        self.relations: Tuple[RelationId, ...] = tuple(relation_index)
        self.entity_index = MappingProxyType(entity_index)
        self.relation_index = MappingProxyType(relation_index)
        self.triple_set = frozenset(self.triples)

        weights = {}
        for t, w in (pseudo_weights or {}).items():
            t = Triple(*t)
            if t.relation != PSEUDO_RELATION or t not in self.triple_set:
                raise ValueError(f"Pseudo weight for {t} does not match a pseudo_interaction triple")
            if not (np.isfinite(w) and 0 < w <= 1):
                raise ValueError(f"Pseudo weight {w} for {t} outside (0, 1]")
            weights[t] = float(w)
        self.pseudo_weights = MappingProxyType(weights)

        self.real_triples = tuple(t for t in self.triples if t.relation != PSEUDO_RELATION)
        self.pseudo_triples = tuple(t for t in self.triples if t.relation == PSEUDO_RELATION)
        self.real_rows = self.encode(self.real_triples)
        self.real_rows.flags.writeable = False

        self._namespace_index: Dict[str, np.ndarray] = {}
        for i, eid in enumerate(self.entities):
            self._namespace_index.setdefault(eid.namespace, []).append(i)
        self._namespace_index = {ns: np.asarray(ix, dtype=np.int64) for ns, ix in self._namespace_index.items()}
        self.encoded_set = frozenset(tuple(row) for row in self.encode(self.triples).tolist())

    def __len__(self) -> int:
        return len(self.triples)

    def __contains__(self, triple) -> bool:
        return Triple(*triple) in self.triple_set

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    def encode(self, triples: Iterable[Triple]) -> np.ndarray:
        """(n, 3) array of (head, relation, tail) indices"""
        rows = [(self.entity_index[t[0]], self.relation_index[t[1]], self.entity_index[t[2]]) for t in triples]
        return np.asarray(rows, dtype=np.int64).reshape(-1, 3)

    def decode(self, row) -> Triple:
        h, r, t = (int(x) for x in row)
        return Triple(self.entities[h], self.relations[r], self.entities[t])

    def namespace_indices(self, namespace: str) -> np.ndarray:
        return self._namespace_index.get(namespace, np.zeros(0, dtype=np.int64))

    def entities_by_namespace(self, namespace: str) -> Tuple[EntityId, ...]:
        return tuple(self.entities[i] for i in self.namespace_indices(namespace))

    def relation_counts(self) -> Dict[RelationId, int]:
        counts = Counter(t.relation for t in self.triples)
        return {rel: counts.get(rel, 0) for rel in self.relations}

    def pseudo_weight(self, triple: Triple) -> float:
        return self.pseudo_weights.get(triple, 1.0)


@dataclass(frozen=True)
class Split:
    train: KnowledgeGraph
    test: Tuple[Triple, ...]


def load_triples(path: str) -> KnowledgeGraph:
    """Load '<head>\\t<relation>\\t<tail>' lines; '#' starts a comment line"""
    triples: List[Triple] = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, 1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise FormatError(f"expected 3 tab-separated fields, got {len(fields)}", path, line_no)
            head, relation, tail = (x.strip() for x in fields)
            if not relation:
                raise FormatError("empty relation", path, line_no)
            try:
                triples.append(Triple(EntityId.parse(head), relation, EntityId.parse(tail)))
            except ValueError as e:
                raise FormatError(str(e), path, line_no)

    kg = KnowledgeGraph(triples)
    logger.info(f"📄 Loaded {len(kg)} triples over {kg.num_entities} entities from {path}")
    for rel, count in kg.relation_counts().items():
        logger.info(f"   {rel}: {count}")
    return kg


def save_triples(kg: Union[KnowledgeGraph, Iterable[Triple]], path: str) -> None:
    """Write triples in canonical sorted order"""
    triples = kg.triples if isinstance(kg, KnowledgeGraph) else [Triple(*t) for t in kg]
    lines = sorted(str(t) for t in triples)
    with open(path, "w", encoding="utf-8") as f:
        for line in lines:
            f.write(line + "\n")


def with_relations(kg: KnowledgeGraph, keep: Iterable[RelationId]) -> KnowledgeGraph:
    """Restrict to the given relation types (pseudo edges always stay); vocabularies unchanged"""
    keep = set(keep) | {PSEUDO_RELATION}
    triples = [t for t in kg.triples if t.relation in keep]
    return KnowledgeGraph(triples, kg.pseudo_weights, kg.entities, kg.relations)


def holdout_split(kg: KnowledgeGraph, relation: RelationId, n: int, seed: int) -> Split:
    """Withhold n triples of `relation`, keeping every involved entity in the training graph.

    Candidates are visited once in a seeded random order and taken whenever
    both ends still have another edge. The pass is greedy, so a failure
    reports what this order could hold out rather than the largest feasible
    test set.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    if n == 0:
        return Split(kg, ())

    degree = Counter()
    for t in kg.triples:
        degree.update({t.head, t.tail})

    candidates = [t for t in kg.triples if t.relation == relation]
    rng = np.random.default_rng(seed)
    chosen: List[Triple] = []
    for i in rng.permutation(len(candidates)):
        t = candidates[i]
        ends = {t.head, t.tail}
        if all(degree[e] > 1 for e in ends):
            chosen.append(t)
            for e in ends:
                degree[e] -= 1
            if len(chosen) == n:
                break

    if len(chosen) < n:
        raise InfeasibleSplitError(f"Greedy selection held out only {len(chosen)} {relation!r} triples "
                                   f"while keeping their entities in training (asked for {n})", len(chosen))

    held = set(chosen)
    train = KnowledgeGraph([t for t in kg.triples if t not in held],
                           {t: w for t, w in kg.pseudo_weights.items() if t not in held},
                           kg.entities, kg.relations)
    logger.info(f"✅ Held out {n} {relation!r} triples; {len(train)} remain for training")
    return Split(train, tuple(chosen))


def inject_pseudo_edges(kg: KnowledgeGraph, labels) -> KnowledgeGraph:
    """Add (mol, pseudo_interaction, prot) per label; repeated pairs keep the max weight"""
    pairs = list(labels)
    if not pairs:
        return kg

    weights = dict(kg.pseudo_weights)
    triples = list(kg.triples)
    new_entities = set()
    for mol, prot, weight in pairs:
        t = Triple(mol, PSEUDO_RELATION, prot)
        if t in weights:
            weights[t] = max(weights[t], float(weight))
            continue
        if t not in kg.triple_set:
            triples.append(t)
        weights[t] = float(weight)
        new_entities.update(e for e in (mol, prot) if e not in kg.entity_index)

    if new_entities:
        logger.warning(f"⚠️  Pseudo-labels introduced {len(new_entities)} entities absent from the graph")
    out = KnowledgeGraph(triples, weights, kg.entities, kg.relations)
    logger.info(f"Injected pseudo edges: {len(out.pseudo_triples)} {PSEUDO_RELATION} triples")
    return out


def allocate(total: int, proportions: Sequence[float]) -> List[int]:
    """Split total into integer parts by largest remainder; earlier parts win ties"""
    props = np.asarray(proportions, dtype=np.float64)
    if props.ndim != 1 or np.any(props < 0) or props.sum() <= 0:
        raise ValueError(f"Invalid proportions {list(proportions)}")
    quotas = total * props / props.sum()
    counts = np.floor(quotas).astype(int)
    remainder = total - int(counts.sum())
    order = sorted(range(len(props)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:remainder]:
        counts[i] += 1
    return counts.tolist()


@dataclass
class TripleBatch:
    """Index triples per partition; weights align with `pseudo`"""

    real: np.ndarray
    pseudo: np.ndarray
    pseudo_weights: np.ndarray
    negatives: np.ndarray

    def __len__(self) -> int:
        return len(self.real) + len(self.pseudo) + len(self.negatives)

    def records(self, kg: KnowledgeGraph) -> List[Tuple[Triple, str, float]]:
        out = [(kg.decode(row), REAL, 1.0) for row in self.real]
        out += [(kg.decode(row), PSEUDO, float(w)) for row, w in zip(self.pseudo, self.pseudo_weights)]
        out += [(kg.decode(row), NEGATIVE, 1.0) for row in self.negatives]
        return out


def _corrupt(kg: KnowledgeGraph, row: np.ndarray, rng: np.random.Generator) -> Optional[np.ndarray]:
    h, r, t = (int(x) for x in row)
    first = int(rng.integers(2))
    for side in (first, 1 - first):
        slot = 0 if side == 0 else 2
        pool = kg.namespace_indices(kg.entities[row[slot]].namespace)

        for _ in range(MAX_CORRUPTION_TRIES):
            e = int(pool[rng.integers(len(pool))])
            cand = (e, r, t) if slot == 0 else (h, r, e)
            if cand not in kg.encoded_set:
                return np.asarray(cand, dtype=np.int64)

        # Dense neighbourhoods: enumerate what is left.
        free = [int(e) for e in pool
                if ((int(e), r, t) if slot == 0 else (h, r, int(e))) not in kg.encoded_set]
        if free:
            e = free[int(rng.integers(len(free)))]
            return np.asarray((e, r, t) if slot == 0 else (h, r, e), dtype=np.int64)
    return None


def sample_batch(kg: KnowledgeGraph, batch_size: int, negatives_per_positive: int = 1,
                 proportions: Sequence[float] = (1, 1, 1),
                 seed: Union[int, np.random.Generator] = 0) -> TripleBatch:
    """Draw real, pseudo and filtered negative triples in (real, pseudo, negative) proportions.

    Negatives corrupt the head or tail (coin flip) of a uniformly drawn real
    triple with an entity of the same namespace and never collide with a
    triple of the graph.
    """
    if batch_size < 1 or negatives_per_positive < 1:
        raise ValueError("batch_size and negatives_per_positive must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n_real, n_pseudo, n_neg = allocate(batch_size, proportions)
    n_neg *= negatives_per_positive

    real_rows = kg.real_rows
    if (n_real or n_neg) and not len(real_rows):
        raise ValueError("Graph has no real triples to sample")
    if n_pseudo and not kg.pseudo_triples:
        raise ValueError("Pseudo triples requested but the graph has no pseudo edges")

    real = real_rows[rng.integers(len(real_rows), size=n_real)] if n_real else np.zeros((0, 3), np.int64)

    if n_pseudo:
        pick = rng.integers(len(kg.pseudo_triples), size=n_pseudo)
        chosen = [kg.pseudo_triples[i] for i in pick]
        pseudo = kg.encode(chosen)
        weights = np.asarray([kg.pseudo_weight(t) for t in chosen], dtype=np.float64)
    else:
        pseudo, weights = np.zeros((0, 3), np.int64), np.zeros(0, np.float64)

    negatives = []
    attempts = 0
    while len(negatives) < n_neg:
        attempts += 1
        if attempts > 100 * max(n_neg, 1):
            raise ValueError("Could not draw filtered negatives; the graph is saturated")
        row = real_rows[rng.integers(len(real_rows))]
        neg = _corrupt(kg, row, rng)
        if neg is not None:
            negatives.append(neg)
    negatives = np.asarray(negatives, dtype=np.int64).reshape(-1, 3)
    return TripleBatch(real, pseudo, weights, negatives)
