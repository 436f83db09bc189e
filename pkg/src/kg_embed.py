# src/kg_embed.py
"""Knowledge-graph embedding families, the KG + pseudo-alignment loss, training and ranking."""
import logging
import math
import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from src.errors import FormatError, TrainingDivergedError
from src.kg_store import KnowledgeGraph, TripleBatch, allocate, sample_batch

logger = logging.getLogger(__name__)

DTYPE = torch.float64

PAIRRE = "pairre"
ROTATE = "rotate"
MURE = "mure"
TORUSE = "toruse"
COMPLEX = "complex"
FAMILIES = (PAIRRE, ROTATE, MURE, TORUSE, COMPLEX)
FAMILY_ALIASES = {"complex_ff": COMPLEX}

TAIL = "tail"
HEAD = "head"

LOGIT_CLAMP = 30.0
# Keeps the complex modulus differentiable at zero distance.
MODULUS_EPS = 1e-30

CHECKPOINT_MAGIC = b"KGE1"


def canonical_family(family: str) -> str:
    name = FAMILY_ALIASES.get(family.lower(), family.lower())
    if name not in FAMILIES:
        raise ValueError(f"Unknown embedding family {family!r}; expected one of {FAMILIES}")
    return name


@dataclass(frozen=True)
class KgTrainConfig:
    family: str = ROTATE
    alpha: float = 0.1
    batch_size: int = 1024
    learning_rate: float = 1e-3
    epochs: int = 100
    negatives_per_positive: int = 1
    seed: int = 0
    dim: int = 256
    gamma: float = 6.0
    proportions: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    include_pseudo_in_kg: bool = False
    squash_pseudo: bool = True

    def __post_init__(self):
        object.__setattr__(self, "family", canonical_family(self.family))
        object.__setattr__(self, "proportions", tuple(float(p) for p in self.proportions))
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        for name in ("batch_size", "learning_rate", "epochs", "negatives_per_positive", "dim"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if len(self.proportions) != 3 or min(self.proportions) < 0 or self.proportions[0] <= 0:
            raise ValueError("proportions must be (real > 0, pseudo >= 0, negative >= 0)")


class KgModel(nn.Module, ABC):
    """Entity and relation tables plus a family-specific plausibility score f(h, r, t)."""

    family: str = ""

    def __init__(self, num_entities: int, num_relations: int, dim: int, gamma: float = 6.0,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        if num_entities < 1 or num_relations < 1 or dim < 1:
            raise ValueError("Entity/relation counts and dim must be positive")
        self.num_entities = num_entities
        self.num_relations = num_relations
        self.dim = dim
        self.gamma = float(gamma)
        self.bound = 6.0 / math.sqrt(dim)
        self.entity = nn.Parameter(self._uniform((num_entities, dim), -self.bound, self.bound, generator))
        self._build_relations(generator)

    @staticmethod
    def _uniform(shape, low: float, high: float, generator: Optional[torch.Generator]) -> torch.Tensor:
        return torch.empty(shape, dtype=DTYPE).uniform_(low, high, generator=generator)

    @abstractmethod
    def _build_relations(self, generator: Optional[torch.Generator]) -> None:
        pass

    @abstractmethod
    def score(self, h: torch.Tensor, r: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """f(h, r, t) for index tensors of equal shape; higher is more plausible"""

    def tables(self) -> List[nn.Parameter]:
        """Parameter tables in checkpoint order"""
        return list(self.parameters())

    def constrain_(self) -> None:
        """Map parameters back onto their domain after an optimizer step"""

    def score_triple(self, h: int, r: int, t: int) -> float:
        for name, idx, size in (("head", h, self.num_entities), ("relation", r, self.num_relations),
                                ("tail", t, self.num_entities)):
            if not 0 <= idx < size:
                raise IndexError(f"{name} index {idx} out of range [0, {size})")
        with torch.no_grad():
            return float(self.score(*(torch.tensor([x]) for x in (h, r, t)))[0])


def _halves(x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    return torch.chunk(x, 2, dim=-1)


class PairRE(KgModel):
    family = PAIRRE

    def _build_relations(self, generator):
        shape = (self.num_relations, self.dim)
        self.rel_head = nn.Parameter(self._uniform(shape, -self.bound, self.bound, generator))
        self.rel_tail = nn.Parameter(self._uniform(shape, -self.bound, self.bound, generator))

    def score(self, h, r, t):
        diff = self.entity[h] * self.rel_head[r] - self.entity[t] * self.rel_tail[r]
        return self.gamma - diff.abs().sum(dim=-1)


class RotatE(KgModel):
    """Entities are dim/2 complex numbers (real half, imaginary half); relations are phases."""

    family = ROTATE

    def _build_relations(self, generator):
        if self.dim % 2:
            raise ValueError("rotate needs an even dim")
        self.phase = nn.Parameter(self._uniform((self.num_relations, self.dim // 2), 0.0, 2 * math.pi, generator))

    def score(self, h, r, t):
        h_re, h_im = _halves(self.entity[h])
        t_re, t_im = _halves(self.entity[t])
        phase = self.phase[r]
        r_re, r_im = torch.cos(phase), torch.sin(phase)
        re = h_re * r_re - h_im * r_im - t_re
        im = h_re * r_im + h_im * r_re - t_im
        return self.gamma - torch.sqrt(re ** 2 + im ** 2 + MODULUS_EPS).sum(dim=-1)

    def constrain_(self):
        with torch.no_grad():
            self.phase.remainder_(2 * math.pi)


class MuRE(KgModel):
    family = MURE

    def _build_relations(self, generator):
        shape = (self.num_relations, self.dim)
        self.rel_diag = nn.Parameter(self._uniform(shape, -self.bound, self.bound, generator))
        self.rel_vec = nn.Parameter(self._uniform(shape, -self.bound, self.bound, generator))
        self.bias = nn.Parameter(torch.zeros(self.num_entities, dtype=DTYPE))

    def tables(self):
        return [self.entity, self.bias, self.rel_diag, self.rel_vec]

    def score(self, h, r, t):
        diff = self.rel_diag[r] * self.entity[h] + self.rel_vec[r] - self.entity[t]
        return -(diff ** 2).sum(dim=-1) + self.bias[h] + self.bias[t]


class TorusE(KgModel):
    """Coordinates live on the unit torus [0, 1)^dim."""

    family = TORUSE

    def __init__(self, num_entities, num_relations, dim, gamma=6.0, generator=None):
        super().__init__(num_entities, num_relations, dim, gamma, generator)
        with torch.no_grad():
            self.entity.copy_(self._uniform(self.entity.shape, 0.0, 1.0, generator))

    def _build_relations(self, generator):
        self.translation = nn.Parameter(self._uniform((self.num_relations, self.dim), 0.0, 1.0, generator))

    def score(self, h, r, t):
        frac = torch.remainder(self.entity[h] + self.translation[r] - self.entity[t], 1.0)
        return self.gamma - 2.0 * torch.minimum(frac, 1.0 - frac).sum(dim=-1)

    def constrain_(self):
        with torch.no_grad():
            self.entity.remainder_(1.0)
            self.translation.remainder_(1.0)


class ComplEx(KgModel):
    family = COMPLEX

    def _build_relations(self, generator):
        if self.dim % 2:
            raise ValueError("complex needs an even dim")
        self.relation = nn.Parameter(self._uniform((self.num_relations, self.dim), -self.bound, self.bound, generator))

    def score(self, h, r, t):
        h_re, h_im = _halves(self.entity[h])
        r_re, r_im = _halves(self.relation[r])
        t_re, t_im = _halves(self.entity[t])
        # Re(<h, r, conj(t)>)
        return (h_re * r_re * t_re + h_im * r_re * t_im + h_re * r_im * t_im - h_im * r_im * t_re).sum(dim=-1)


MODEL_CLASSES = {cls.family: cls for cls in (PairRE, RotatE, MuRE, TorusE, ComplEx)}


def build_model(family: str, num_entities: int, num_relations: int, dim: int = 256, gamma: float = 6.0,
                seed: Optional[int] = None) -> KgModel:
    generator = torch.Generator().manual_seed(seed) if seed is not None else None
    return MODEL_CLASSES[canonical_family(family)](num_entities, num_relations, dim, gamma, generator)


def _split_columns(rows) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    rows = torch.as_tensor(np.asarray(rows, dtype=np.int64).reshape(-1, 3))
    return rows[:, 0], rows[:, 1], rows[:, 2]


def kg_nll(pos_scores: torch.Tensor, neg_scores: torch.Tensor) -> torch.Tensor:
    """Mean of -log sigma(f) over positives and -log sigma(-f) over negatives"""
    if pos_scores.numel() == 0 or neg_scores.numel() == 0:
        raise ValueError("kg loss needs at least one positive and one negative")
    pos = torch.clamp(pos_scores, -LOGIT_CLAMP, LOGIT_CLAMP)
    neg = torch.clamp(neg_scores, -LOGIT_CLAMP, LOGIT_CLAMP)
    total = F.softplus(-pos).sum() + F.softplus(neg).sum()
    return total / (pos.numel() + neg.numel())


def pseudo_alignment(scores: torch.Tensor, targets: torch.Tensor, squash: bool = True) -> torch.Tensor:
    """Mean squared error between (squashed) pseudo-edge scores and their target weights"""
    if scores.numel() == 0:
        raise ValueError("pseudo alignment needs at least one pair")
    targets = torch.as_tensor(targets, dtype=scores.dtype)
    if not bool(torch.all(torch.isfinite(targets))):
        raise ValueError("pseudo targets must be finite")
    predicted = torch.sigmoid(scores) if squash else scores
    return ((predicted - targets) ** 2).mean()


def l_kg(model: KgModel, positives, negatives) -> torch.Tensor:
    pos = model.score(*_split_columns(positives))
    neg = model.score(*_split_columns(negatives))
    return kg_nll(pos, neg)


def l_pseudo(model: KgModel, pairs, weights, squash: bool = True) -> torch.Tensor:
    return pseudo_alignment(model.score(*_split_columns(pairs)), torch.as_tensor(weights, dtype=DTYPE), squash)


def l_total(model: KgModel, batch: TripleBatch, alpha: float, squash: bool = True,
            include_pseudo_in_kg: bool = False) -> torch.Tensor:
    """l_kg(real, negative) + alpha * l_pseudo(pseudo); the pseudo term is 0 when empty"""
    positives = batch.real
    if include_pseudo_in_kg and len(batch.pseudo):
        positives = np.concatenate([batch.real, batch.pseudo])
    loss = l_kg(model, positives, batch.negatives)
    if alpha == 0 or len(batch.pseudo) == 0:
        return loss
    return loss + alpha * l_pseudo(model, batch.pseudo, batch.pseudo_weights, squash)


@dataclass
class KgTrainResult:
    model: KgModel
    trace: List[float] = field(default_factory=list)


def train_kg(kg: KnowledgeGraph, family: Optional[str] = None, cfg: KgTrainConfig = KgTrainConfig(),
             progress: bool = False) -> KgTrainResult:
    """Adam on l_total over sampled batches; one epoch covers the real triples once on average"""
    if not kg.real_triples:
        raise ValueError("Cannot train on a graph without real triples")
    family = canonical_family(family or cfg.family)
    model = build_model(family, kg.num_entities, kg.num_relations, cfg.dim, cfg.gamma, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)

    real, pseudo, negative = cfg.proportions
    if cfg.alpha == 0 or not kg.pseudo_triples:
        pseudo = 0.0
    proportions = (real, pseudo, negative)
    n_real = max(1, allocate(cfg.batch_size, proportions)[0])
    steps = max(1, math.ceil(len(kg.real_triples) / n_real))
    logger.info(f"🎯 Training {family} (d={cfg.dim}) on {len(kg.real_triples)} real and "
                f"{len(kg.pseudo_triples) if pseudo else 0} pseudo triples, alpha={cfg.alpha}")

    trace: List[float] = []
    for epoch in tqdm(range(1, cfg.epochs + 1), desc=f"kg {family}", disable=not progress):
        losses = []
        for step in range(steps):
            batch = sample_batch(kg, cfg.batch_size, cfg.negatives_per_positive, proportions, rng)
            optimizer.zero_grad()
            loss = l_total(model, batch, cfg.alpha, cfg.squash_pseudo, cfg.include_pseudo_in_kg)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"KG loss became {float(loss)} at epoch {epoch}, step {step}",
                                            epoch, step, trace)
            loss.backward()
            optimizer.step()
            model.constrain_()
            losses.append(float(loss))
        trace.append(float(np.mean(losses)))
        logger.debug(f"kg epoch {epoch}: loss {trace[-1]:.5f}")

    logger.info(f"✅ {family} trained: loss {trace[0]:.4f} -> {trace[-1]:.4f}")
    return KgTrainResult(model, trace)


def rank_candidates(model: KgModel, anchor: int, relation: int, direction: str, candidates: Sequence[int],
                    known: Optional[Set[Tuple[int, int, int]]] = None,
                    keep: Optional[int] = None) -> List[Tuple[int, float]]:
    """Candidates for the open slot, best first; ties go to the lower entity index.

    Candidates that complete a triple in `known` are dropped, except `keep`
    (the entity being evaluated).
    """
    if direction not in (TAIL, HEAD):
        raise ValueError(f"direction must be {TAIL!r} or {HEAD!r}")
    known = known or set()

    def triple(c: int) -> Tuple[int, int, int]:
        return (anchor, relation, c) if direction == TAIL else (c, relation, anchor)

    kept = np.asarray([int(c) for c in candidates if c == keep or triple(int(c)) not in known], dtype=np.int64)
    if not len(kept):
        return []
    cand = torch.as_tensor(kept)
    fixed = torch.full_like(cand, anchor)
    rel = torch.full_like(cand, relation)
    with torch.no_grad():
        scores = (model.score(fixed, rel, cand) if direction == TAIL else model.score(cand, rel, fixed)).numpy()
    order = np.lexsort((kept, -scores))
    return [(int(kept[i]), float(scores[i])) for i in order]


def save_kg_model(model: KgModel, path: str) -> None:
    """KGE1: magic, family byte, u32 dim, u32 entities, u32 relations, f64 gamma, f64 tables"""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<BIIId", FAMILIES.index(model.family), model.dim,
                            model.num_entities, model.num_relations, model.gamma))
        for table in model.tables():
            f.write(np.ascontiguousarray(table.detach().numpy(), dtype="<f8").tobytes())


def load_kg_model(path: str) -> KgModel:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a KGE1 checkpoint", path)
    header = struct.Struct("<BIIId")
    try:
        tag, dim, n_ent, n_rel, gamma = header.unpack_from(blob, 4)
    except struct.error:
        raise FormatError("truncated checkpoint header", path)
    if tag >= len(FAMILIES):
        raise FormatError(f"unknown family tag {tag}", path)

    model = build_model(FAMILIES[tag], n_ent, n_rel, dim, gamma)
    offset = 4 + header.size
    with torch.no_grad():
        for table in model.tables():
            n_bytes = table.numel() * 8
            if offset + n_bytes > len(blob):
                raise FormatError("truncated checkpoint tables", path)
            values = np.frombuffer(blob, dtype="<f8", count=table.numel(), offset=offset)
            table.copy_(torch.from_numpy(values.reshape(table.shape).copy()))
            offset += n_bytes
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes in checkpoint", path)
    return model
