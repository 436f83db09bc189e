# src/pseudo_labeler.py
"""Similarity-constrained OT pseudo-labels plus the baseline labeling strategies."""
import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Tuple, Union

import numpy as np
import torch

from src.embeddings import EntityId, SimilarityMatrix
from src.errors import ConvergenceError, FormatError, ShapeError
from src.ot_core import (DTYPE, FROM_SCORES, CostMatrix, MarginalPair, OtConfig, TransportPlan,
                         feasibility_project, sinkhorn, transport_cost)
from src.score_model import ScoreMatrix

logger = logging.getLogger(__name__)

OT_SIM = "ot_sim"
OT_PLAIN = "ot_plain"
TOPK = "topk"
RANDOM = "random"
NONE = "none"
STRATEGIES = (OT_SIM, OT_PLAIN, TOPK, RANDOM, NONE)
OT_STRATEGIES = (OT_SIM, OT_PLAIN)

# Ablation labels; ot_high_entropy is ot_sim at a large epsilon.
OT_HIGH_ENTROPY = "ot_high_entropy"
HIGH_ENTROPY_EPSILON = 0.1
ABLATION_STRATEGIES = (NONE, RANDOM, TOPK, OT_PLAIN, OT_HIGH_ENTROPY, OT_SIM)

THRESHOLD_SCORE = "score"
THRESHOLD_NORMALIZED_PLAN = "normalized_plan"
THRESHOLD_SOURCES = (THRESHOLD_SCORE, THRESHOLD_NORMALIZED_PLAN)


@dataclass(frozen=True)
class PseudoConfig:
    lambda_: float = 0.1
    eta: float = 1.0
    epsilon: float = 0.01
    outer_max_iter: int = 50
    delta: float = 0.5
    threshold_source: str = THRESHOLD_SCORE
    strategy: str = OT_SIM
    topk_k: int = 5
    projection_rounds: int = 20
    sinkhorn_tol: float = 1e-6
    sinkhorn_max_iter: int = 1000
    random_count: Optional[int] = None

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ValueError("lambda must be non-negative")
        for name in ("eta", "epsilon", "outer_max_iter", "topk_k", "projection_rounds",
                     "sinkhorn_tol", "sinkhorn_max_iter"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.threshold_source not in THRESHOLD_SOURCES:
            raise ValueError(f"threshold_source must be one of {THRESHOLD_SOURCES}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.random_count is not None and self.random_count < 0:
            raise ValueError("random_count must be non-negative")


PseudoPair = Tuple[EntityId, EntityId, float]


@dataclass(frozen=True)
class PseudoLabelSet:
    pairs: Tuple[PseudoPair, ...] = ()

    def __post_init__(self):
        pairs = tuple((m, p, float(w)) for m, p, w in self.pairs)
        seen = set()
        for mol, prot, weight in pairs:
            if (mol, prot) in seen:
                raise ValueError(f"Duplicate pseudo-label pair ({mol}, {prot})")
            if not (np.isfinite(weight) and 0 < weight <= 1):
                raise ValueError(f"Pseudo-label weight {weight} for ({mol}, {prot}) outside (0, 1]")
            seen.add((mol, prot))
        object.__setattr__(self, "pairs", pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self) -> Iterator[PseudoPair]:
        return iter(self.pairs)

    def as_dict(self):
        return {(m, p): w for m, p, w in self.pairs}

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write("# mol\tprot\tweight\n")
            for mol, prot, weight in self.pairs:
                f.write(f"{mol}\t{prot}\t{weight!r}\n")


def load_pseudo_labels(path: str) -> PseudoLabelSet:
    pairs: List[PseudoPair] = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, 1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise FormatError(f"expected 3 tab-separated fields, got {len(fields)}", path, line_no)
            try:
                pairs.append((EntityId.parse(fields[0]), EntityId.parse(fields[1]), float(fields[2])))
            except ValueError as e:
                raise FormatError(str(e), path, line_no)
    try:
        return PseudoLabelSet(tuple(pairs))
    except ValueError as e:
        raise FormatError(str(e), path)


@dataclass
class PseudoPlan(TransportPlan):
    """Final adjusted plan with the objective recorded after every outer round."""

    objectives: List[float] = field(default_factory=list)


def strategy_config(base: PseudoConfig, name: str) -> PseudoConfig:
    """Concrete config for an ablation strategy label"""
    if name == OT_HIGH_ENTROPY:
        return dataclasses.replace(base, strategy=OT_SIM, epsilon=HIGH_ENTROPY_EPSILON)
    if name not in STRATEGIES:
        raise ValueError(f"Unknown strategy {name!r}; expected one of {ABLATION_STRATEGIES}")
    return dataclasses.replace(base, strategy=name)


def _plan_tensor(T: Union[TransportPlan, torch.Tensor]) -> torch.Tensor:
    values = T.values if isinstance(T, TransportPlan) else T
    return torch.as_tensor(values, dtype=DTYPE)


def _sim_tensor(sim: Union[SimilarityMatrix, np.ndarray, torch.Tensor]) -> torch.Tensor:
    values = sim.values if isinstance(sim, SimilarityMatrix) else sim
    return torch.as_tensor(np.asarray(values), dtype=DTYPE).clamp(0.0, 1.0)


def _residual(T: torch.Tensor, sim: torch.Tensor) -> torch.Tensor:
    if T.ndim != 2 or sim.shape != (T.shape[0], T.shape[0]):
        raise ShapeError(f"Plan of shape {tuple(T.shape)} needs a {T.shape[0]}x{T.shape[0]} "
                         f"similarity matrix, got {tuple(sim.shape)}")
    return sim - T @ T.T


def similarity_penalty(T, sim) -> float:
    """sum_ik (Sim_ik - (T T^T)_ik)^2 with Sim clamped to [0, 1]"""
    T = _plan_tensor(T)
    return float((_residual(T, _sim_tensor(sim)) ** 2).sum())


def similarity_gradient(T, sim, lambda_: float) -> torch.Tensor:
    """Gradient of lambda * similarity_penalty with respect to T: -4 lambda (Sim - T T^T) T"""
    T = _plan_tensor(T)
    return -4.0 * lambda_ * (_residual(T, _sim_tensor(sim)) @ T)


def plan_objective(T, C, sim, lambda_: float) -> float:
    """<T, C> + lambda * similarity_penalty(T, sim)"""
    return transport_cost(_plan_tensor(T), C) + lambda_ * similarity_penalty(T, sim)


def generate_plan(S: ScoreMatrix, sim, cfg: PseudoConfig, m: Optional[MarginalPair] = None) -> PseudoPlan:
    """Alternate Sinkhorn, similarity adjustment and feasibility projection.

    Every round solves Sinkhorn on C = 1 - S (later rounds resume from the
    previous column scaling) and steps the fresh plan along the similarity
    gradient taken at the previous round's adjusted plan. The rounds settle
    on a fixed point anchored to the cost. Uniform marginals are used when m
    is omitted.
    """
    if cfg.strategy not in OT_STRATEGIES:
        raise ValueError(f"generate_plan needs an OT strategy, got {cfg.strategy!r}")
    scores = torch.as_tensor(S.values, dtype=DTYPE)
    M, N = scores.shape
    if m is None:
        m = MarginalPair.uniform(M, N)
    cost = CostMatrix(1.0 - scores, FROM_SCORES)
    sim_t = _sim_tensor(sim)
    if sim_t.shape != (M, M):
        raise ShapeError(f"Similarity matrix {tuple(sim_t.shape)} does not match {M} molecules")

    ot_cfg = OtConfig(epsilon=cfg.epsilon, tol=cfg.sinkhorn_tol, max_inner_iter=cfg.sinkhorn_max_iter)
    adjust = cfg.strategy == OT_SIM
    logger.info(f"🎯 Generating {cfg.strategy} plan for {M}x{N} scores "
                f"(eps={cfg.epsilon}, lambda={cfg.lambda_}, rounds={cfg.outer_max_iter})")

    T: Optional[torch.Tensor] = None
    log_v: Optional[torch.Tensor] = None
    projected: Optional[TransportPlan] = None
    objectives: List[float] = []
    for round_index in range(1, cfg.outer_max_iter + 1):
        plan = sinkhorn(cost, m, ot_cfg, init_log_v=log_v)
        if not plan.converged:
            raise ConvergenceError(f"Sinkhorn did not converge in outer round {round_index} "
                                   f"(violation {plan.violation:.3e})", plan.violation, round_index)
        log_v = plan.state.log_v.detach()
        fresh = plan.values.detach()
        anchor = fresh if T is None else T
        T = fresh - cfg.eta * similarity_gradient(anchor, sim_t, cfg.lambda_) if adjust else fresh
        projected = feasibility_project(T, m, rounds=cfg.projection_rounds)
        T = projected.values
        objectives.append(plan_objective(T, cost, sim_t, cfg.lambda_))
        logger.debug(f"outer round {round_index}: objective {objectives[-1]:.6f}, "
                     f"violation {projected.violation:.2e}")

    logger.info(f"✅ Plan ready: objective {objectives[-1]:.6f}, marginal violation {projected.violation:.2e}")
    return PseudoPlan(T, m, projected.converged, projected.violation, cfg.outer_max_iter,
                      objectives=objectives)


def extract_pseudo_labels(S: ScoreMatrix, T, cfg: PseudoConfig) -> PseudoLabelSet:
    """Pairs whose score (or row-max normalized plan mass) strictly exceeds cfg.delta, row-major"""
    scores = np.asarray(torch.as_tensor(S.values, dtype=DTYPE).detach())
    if cfg.threshold_source == THRESHOLD_SCORE:
        values = scores
    else:
        plan = np.asarray(_plan_tensor(T).detach())
        if plan.shape != scores.shape:
            raise ShapeError(f"Plan shape {plan.shape} does not match score shape {scores.shape}")
        row_max = plan.max(axis=1, initial=0.0)
        values = np.zeros_like(plan)
        for i in np.flatnonzero(row_max <= 0):
            logger.warning(f"⚠️  Plan row for {S.mol_ids[i]} has no mass; no pseudo-labels from it")
        live = row_max > 0
        values[live] = plan[live] / row_max[live, None]

    rows, cols = np.nonzero(values > cfg.delta)
    pairs = tuple((S.mol_ids[i], S.prot_ids[j], float(values[i, j])) for i, j in zip(rows, cols))
    return PseudoLabelSet(pairs)


def baseline_pseudo(S: ScoreMatrix, cfg: PseudoConfig, seed: int, count: Optional[int] = None) -> PseudoLabelSet:
    """none / topk (per protein) / random (matched count) pseudo-labels"""
    scores = np.asarray(torch.as_tensor(S.values, dtype=DTYPE).detach())
    M, N = scores.shape
    if cfg.strategy == NONE:
        return PseudoLabelSet()

    if cfg.strategy == TOPK:
        picked = []
        k = min(cfg.topk_k, M)
        for j in range(N):
            # Highest score first, lower molecule index on ties.
            order = np.lexsort((np.arange(M), -scores[:, j]))
            picked.extend((int(i), j) for i in order[:k])
        picked.sort()
        return PseudoLabelSet(tuple((S.mol_ids[i], S.prot_ids[j], float(scores[i, j])) for i, j in picked))

    if cfg.strategy == RANDOM:
        count = cfg.random_count if count is None else count
        if count is None:
            raise ValueError("Random pseudo-labels need a pair count")
        if count > M * N:
            raise ValueError(f"Cannot sample {count} random pairs from a {M}x{N} grid")
        rng = np.random.default_rng(seed)
        flat = np.sort(rng.choice(M * N, size=count, replace=False))
        return PseudoLabelSet(tuple((S.mol_ids[f // N], S.prot_ids[f % N], 1.0) for f in flat))

    raise ValueError(f"baseline_pseudo does not handle strategy {cfg.strategy!r}")


def label_pairs(S: ScoreMatrix, sim, cfg: PseudoConfig, seed: int,
                count: Optional[int] = None) -> Tuple[PseudoLabelSet, Optional[PseudoPlan]]:
    """Run the configured strategy end to end; the plan is None for baselines"""
    if cfg.strategy in OT_STRATEGIES:
        plan = generate_plan(S, sim, cfg)
        return extract_pseudo_labels(S, plan, cfg), plan
    return baseline_pseudo(S, cfg, seed, count), None
