# src/embeddings.py
"""Entity identifiers, embedding matrices and cosine similarity."""
import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Set, Tuple

import numpy as np

from src.errors import FormatError, ShapeError, ZeroRowError

logger = logging.getLogger(__name__)

MOL = "MOL"
PROT = "PROT"

# Namespaces an EntityId may carry. Context namespaces stand in for GO / protein
# family / pathway / EC annotation nodes of a biological KG.
REGISTERED_NAMESPACES: Set[str] = {MOL, PROT, "GENE", "GO", "PFAM", "PATHWAY", "EC", "CTX"}


def register_namespace(namespace: str) -> None:
    """Register an additional entity namespace"""
    if not namespace or ":" in namespace or any(ch.isspace() for ch in namespace):
        raise ValueError(f"Invalid namespace: {namespace!r}")
    REGISTERED_NAMESPACES.add(namespace)


@dataclass(frozen=True, order=True)
class EntityId:
    namespace: str
    local_id: str

    def __post_init__(self):
        if not self.local_id:
            raise ValueError("EntityId local_id must be non-empty")
        if self.namespace not in REGISTERED_NAMESPACES:
            raise ValueError(f"Unregistered namespace {self.namespace!r}")

    @classmethod
    def parse(cls, text: str) -> "EntityId":
        """Parse '<namespace>:<local_id>'"""
        namespace, sep, local_id = text.partition(":")
        if not sep:
            raise ValueError(f"Entity id {text!r} has no namespace prefix")
        return cls(namespace, local_id)

    def __str__(self) -> str:
        return f"{self.namespace}:{self.local_id}"


@dataclass(frozen=True)
class EmbeddingMatrix:
    """One dense row per entity id, in file order."""

    ids: Tuple[EntityId, ...]
    values: np.ndarray
    dim: int

    def __post_init__(self):
        if self.dim <= 0:
            raise ValueError("dim must be positive")
        values = np.asarray(self.values, dtype=np.float64)
        if values.size == 0:
            values = values.reshape(0, self.dim)
        if values.ndim != 2 or values.shape[1] != self.dim:
            raise ShapeError(f"Embedding values of shape {values.shape} do not match dim {self.dim}")
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "values", values)
        if values.shape[0] != len(self.ids):
            raise ShapeError(f"{values.shape[0]} rows for {len(self.ids)} ids")
        if not np.all(np.isfinite(values)):
            raise ValueError("Embedding values must be finite")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("Duplicate entity ids in embedding matrix")

    def __len__(self) -> int:
        return len(self.ids)

    def index(self) -> Dict[EntityId, int]:
        return {eid: i for i, eid in enumerate(self.ids)}

    def select(self, ids: Sequence[EntityId]) -> "EmbeddingMatrix":
        """Rows for the given ids, in the given order"""
        lookup = self.index()
        rows = [lookup[eid] for eid in ids]
        return EmbeddingMatrix(tuple(ids), self.values[rows], self.dim)

    def by_namespace(self, namespace: str) -> "EmbeddingMatrix":
        ids = [eid for eid in self.ids if eid.namespace == namespace]
        return self.select(ids)


@dataclass(frozen=True)
class SimilarityMatrix:
    ids: Tuple[EntityId, ...]
    values: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


def _zero_rows(values: np.ndarray) -> np.ndarray:
    return np.flatnonzero(np.linalg.norm(values, axis=1) == 0.0)


def load_embeddings(path: str) -> EmbeddingMatrix:
    """Load an embedding TSV: header 'dim <d>' then '<ns>:<id>\\t<f1> ... <fd>' rows"""
    ids: List[EntityId] = []
    rows: List[List[float]] = []
    seen: Set[EntityId] = set()
    dim = None

    with open(path, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, 1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue

            if dim is None:
                parts = line.split()
                if len(parts) != 2 or parts[0] != "dim":
                    raise FormatError("malformed header, expected 'dim <d>'", path, line_no)
                try:
                    dim = int(parts[1])
                except ValueError:
                    raise FormatError(f"non-integer dimension {parts[1]!r}", path, line_no)
                if dim <= 0:
                    raise FormatError("dimension must be positive", path, line_no)
                continue

            name, sep, payload = line.partition("\t")
            if not sep:
                raise FormatError("expected '<id>\\t<values>'", path, line_no)
            try:
                eid = EntityId.parse(name.strip())
            except ValueError as e:
                raise FormatError(str(e), path, line_no)
            if eid in seen:
                raise FormatError(f"duplicate id {eid}", path, line_no)

            fields = payload.split()
            if len(fields) != dim:
                raise FormatError(f"dimension mismatch: {len(fields)} values under dim {dim}", path, line_no)
            try:
                vec = [float(x) for x in fields]
            except ValueError:
                raise FormatError("non-numeric value", path, line_no)
            if not all(math.isfinite(x) for x in vec):
                raise FormatError(f"non-finite value for {eid}", path, line_no)
            if not any(vec):
                raise FormatError(f"zero-norm row for {eid}", path, line_no)

            seen.add(eid)
            ids.append(eid)
            rows.append(vec)

    if dim is None:
        raise FormatError("missing 'dim <d>' header", path, 1)

    values = np.array(rows, dtype=np.float64).reshape(len(rows), dim)
    logger.info(f"📄 Loaded {len(ids)} embeddings (dim {dim}) from {path}")
    return EmbeddingMatrix(tuple(ids), values, dim)


def save_embeddings(m: EmbeddingMatrix, path: str) -> None:
    """Write an embedding TSV; floats use repr so reloads are exact"""
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"dim {m.dim}\n")
        for eid, row in zip(m.ids, m.values):
            f.write(f"{eid}\t{' '.join(repr(float(x)) for x in row)}\n")


def concat_embeddings(parts: Iterable[EmbeddingMatrix]) -> EmbeddingMatrix:
    parts = list(parts)
    dims = {p.dim for p in parts}
    if len(dims) != 1:
        raise ShapeError(f"Cannot concatenate embeddings of dims {sorted(dims)}")
    ids = tuple(eid for p in parts for eid in p.ids)
    return EmbeddingMatrix(ids, np.vstack([p.values for p in parts]), dims.pop())


def l2_normalize(m: EmbeddingMatrix) -> EmbeddingMatrix:
    """Scale every row to unit Euclidean norm"""
    zero = _zero_rows(m.values)
    if zero.size:
        raise ZeroRowError(f"Zero-norm embedding row for {m.ids[zero[0]]}", m.ids[zero[0]])
    norms = np.linalg.norm(m.values, axis=1, keepdims=True)
    return EmbeddingMatrix(m.ids, m.values / norms, m.dim)


def cosine_similarity_matrix(m: EmbeddingMatrix) -> SimilarityMatrix:
    """Dense M x M cosine similarity between the rows of m"""
    if len(m) == 0:
        raise ShapeError("Cannot compute similarity of an empty embedding matrix")
    unit = l2_normalize(m).values
    sim = unit @ unit.T
    # Exact symmetry and unit diagonal; rounding can push |cos| past 1.
    sim = 0.5 * (sim + sim.T)
    np.fill_diagonal(sim, 1.0)
    np.clip(sim, -1.0, 1.0, out=sim)
    return SimilarityMatrix(m.ids, sim)
