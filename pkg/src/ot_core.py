# src/ot_core.py
"""Entropic optimal transport: log-domain Sinkhorn, feasibility projection,
transport cost and an exhaustive permutation oracle for small square problems."""
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import torch

from src.errors import ShapeError, ZeroRowError

logger = logging.getLogger(__name__)

DTYPE = torch.float64

FROM_SCORES = "from_scores"
GROUND_TRUTH = "ground_truth"
PROVENANCES = (FROM_SCORES, GROUND_TRUTH)

# Largest N accepted by the permutation oracle (N! plans are enumerated).
MAX_ORACLE_N = 8


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(x, dtype=DTYPE)


@dataclass(frozen=True)
class MarginalPair:
    r: torch.Tensor
    c: torch.Tensor

    def __post_init__(self):
        r = _as_tensor(self.r).detach().reshape(-1)
        c = _as_tensor(self.c).detach().reshape(-1)
        for name, vec in (("r", r), ("c", c)):
            if vec.numel() == 0:
                raise ValueError(f"Marginal {name} is empty")
            if not bool(torch.all(vec > 0)):
                raise ValueError(f"Marginal {name} must be strictly positive")
            if abs(float(vec.sum()) - 1.0) > 1e-9:
                raise ValueError(f"Marginal {name} sums to {float(vec.sum())}, expected 1")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "c", c)

    @classmethod
    def uniform(cls, m: int, n: int) -> "MarginalPair":
        return cls(torch.full((m,), 1.0 / m, dtype=DTYPE), torch.full((n,), 1.0 / n, dtype=DTYPE))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.r.numel(), self.c.numel()


@dataclass(frozen=True)
class CostMatrix:
    values: torch.Tensor
    provenance: str = FROM_SCORES

    def __post_init__(self):
        values = _as_tensor(self.values)
        if values.ndim != 2:
            raise ShapeError(f"Cost matrix must be 2-D, got shape {tuple(values.shape)}")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"Unknown cost provenance {self.provenance!r}")
        detached = values.detach()
        if not bool(torch.all(torch.isfinite(detached))):
            raise ValueError("Cost matrix has non-finite entries")
        if self.provenance == FROM_SCORES and detached.numel():
            if float(detached.min()) < -1e-12 or float(detached.max()) > 1.0 + 1e-12:
                raise ValueError("Score-derived costs must lie in [0, 1]")
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.values.shape)


@dataclass(frozen=True)
class OtConfig:
    epsilon: float = 0.01
    tol: float = 1e-6
    max_inner_iter: int = 1000
    eps_scaling: bool = True

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_inner_iter < 1:
            raise ValueError("max_inner_iter must be a positive integer")


@dataclass
class SinkhornState:
    """Scalings in the log domain: plan = diag(u) K diag(v) with K = exp(log_kernel)."""

    log_u: torch.Tensor
    log_v: torch.Tensor
    log_kernel: torch.Tensor

    def log_plan(self) -> torch.Tensor:
        return self.log_u[:, None] + self.log_kernel + self.log_v[None, :]

    def plan(self) -> torch.Tensor:
        return torch.exp(self.log_plan())


@dataclass
class TransportPlan:
    values: torch.Tensor
    marginals: MarginalPair
    converged: bool = True
    violation: float = 0.0
    n_iter: int = 0
    state: Optional[SinkhornState] = field(default=None, repr=False)

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.values.shape)

    @property
    def log_values(self) -> torch.Tensor:
        if self.state is not None:
            return self.state.log_plan()
        return torch.log(self.values)


def marginal_violation(T: torch.Tensor, m: MarginalPair) -> float:
    """max(|T 1 - r|_inf, |T^T 1 - c|_inf)"""
    T = _as_tensor(T).detach()
    rows = (T.sum(dim=1) - m.r).abs().max()
    cols = (T.sum(dim=0) - m.c).abs().max()
    return float(torch.maximum(rows, cols))


def _check_shapes(shape: Tuple[int, int], m: MarginalPair) -> None:
    if tuple(shape) != m.shape:
        raise ShapeError(f"Matrix of shape {tuple(shape)} does not match marginals {m.shape}")


def _sinkhorn_log(log_kernel: torch.Tensor, m: MarginalPair, tol: float, max_iter: int,
                  log_v: torch.Tensor) -> Tuple[SinkhornState, int, float, bool]:
    log_r = torch.log(m.r)
    log_c = torch.log(m.c)
    violation = math.inf
    log_u = torch.zeros_like(log_r)
    for it in range(1, max_iter + 1):
        log_u = log_r - torch.logsumexp(log_kernel + log_v[None, :], dim=1)
        log_v = log_c - torch.logsumexp(log_kernel + log_u[:, None], dim=0)

        with torch.no_grad():
            log_plan = log_u[:, None] + log_kernel + log_v[None, :]
            row_err = (torch.exp(torch.logsumexp(log_plan, dim=1)) - m.r).abs().max()
            col_err = (torch.exp(torch.logsumexp(log_plan, dim=0)) - m.c).abs().max()
            violation = float(torch.maximum(row_err, col_err))
        if it % 100 == 0:
            logger.debug(f"sinkhorn iter {it}: violation {violation:.3e}")
        if violation <= tol:
            return SinkhornState(log_u, log_v, log_kernel), it, violation, True
    return SinkhornState(log_u, log_v, log_kernel), max_iter, violation, False


def _epsilon_schedule(C: torch.Tensor, epsilon: float) -> List[float]:
    span = float(C.detach().abs().max()) if C.numel() else 0.0
    if span <= 0 or epsilon >= 0.01 * span:
        return [epsilon]
    schedule = []
    eps = span
    while eps > epsilon * 10:
        schedule.append(eps)
        eps /= 10.0
    schedule.append(epsilon)
    return schedule


def sinkhorn(C: Union[CostMatrix, torch.Tensor], m: MarginalPair, cfg: OtConfig = OtConfig(),
             init_log_kernel: Optional[torch.Tensor] = None,
             init_log_v: Optional[torch.Tensor] = None) -> TransportPlan:
    """Entropy-regularized OT plan between m.r and m.c for cost C.

    Iterations run in the log domain (log-sum-exp updates of the scalings), so
    small epsilon does not underflow the kernel exp(-C/eps). If the marginal
    violation is still above cfg.tol after cfg.max_inner_iter iterations the
    plan is returned with converged=False and the achieved violation.

    init_log_kernel replaces -C/eps as the kernel, used to resume iterations
    from an existing plan. init_log_v resumes from the column scaling of an
    earlier solve at the same epsilon and skips the epsilon schedule.
    """
    if isinstance(C, CostMatrix):
        C = C.values
    C = _as_tensor(C)
    _check_shapes(C.shape, m)
    if init_log_kernel is not None and init_log_v is not None:
        raise ValueError("Pass init_log_kernel or init_log_v, not both")

    if init_log_kernel is not None:
        log_kernel = _as_tensor(init_log_kernel)
        _check_shapes(log_kernel.shape, m)
        state, n_iter, violation, converged = _sinkhorn_log(
            log_kernel, m, cfg.tol, cfg.max_inner_iter, torch.zeros_like(m.c))
    elif init_log_v is not None:
        log_v = _as_tensor(init_log_v).detach()
        if log_v.shape != m.c.shape:
            raise ShapeError(f"init_log_v has shape {tuple(log_v.shape)}, expected {tuple(m.c.shape)}")
        state, n_iter, violation, converged = _sinkhorn_log(
            -C / cfg.epsilon, m, cfg.tol, cfg.max_inner_iter, log_v)
    else:
        schedule = _epsilon_schedule(C, cfg.epsilon) if cfg.eps_scaling else [cfg.epsilon]
        log_v = torch.zeros_like(m.c)
        prev_eps = schedule[0]
        n_iter = 0
        for eps in schedule:
            # Potentials g = eps * log_v carry over between epsilon stages.
            log_v = log_v * (prev_eps / eps)
            state, stage_iter, violation, converged = _sinkhorn_log(
                -C / eps, m, cfg.tol, cfg.max_inner_iter, log_v)
            log_v = state.log_v
            prev_eps = eps
            n_iter += stage_iter

    values = state.plan()
    if not bool(torch.all(torch.isfinite(values.detach()))):
        raise RuntimeError("Sinkhorn produced non-finite plan entries")
    if not converged:
        logger.warning(f"⚠️  Sinkhorn did not converge in {cfg.max_inner_iter} iterations "
                       f"(violation {violation:.3e} > tol {cfg.tol:.1e})")
    return TransportPlan(values, m, converged, violation, n_iter, state)


def feasibility_project(T: torch.Tensor, m: MarginalPair, rounds: int = 20,
                        tol: float = 1e-6) -> TransportPlan:
    """Clamp negatives to zero, then alternate row and column rescaling `rounds` times."""
    if rounds < 1:
        raise ValueError("rounds must be a positive integer")
    T = _as_tensor(T)
    _check_shapes(T.shape, m)
    T = torch.clamp(T, min=0.0)

    for _ in range(rounds):
        row_sums = T.sum(dim=1)
        empty = torch.nonzero(row_sums <= 0)
        if empty.numel():
            idx = int(empty[0])
            raise ZeroRowError(f"Plan row {idx} has no mass after clamping", idx)
        T = T * (m.r / row_sums)[:, None]

        col_sums = T.sum(dim=0)
        empty = torch.nonzero(col_sums <= 0)
        if empty.numel():
            idx = int(empty[0])
            raise ZeroRowError(f"Plan column {idx} has no mass after clamping", idx)
        T = T * (m.c / col_sums)[None, :]

    violation = marginal_violation(T, m)
    return TransportPlan(T, m, violation <= tol, violation, rounds)


def transport_cost(T: Union[TransportPlan, torch.Tensor], C: Union[CostMatrix, torch.Tensor]) -> float:
    """sum_ij T_ij C_ij"""
    T = T.values if isinstance(T, TransportPlan) else _as_tensor(T)
    C = C.values if isinstance(C, CostMatrix) else _as_tensor(C)
    if T.shape != C.shape:
        raise ShapeError(f"Plan shape {tuple(T.shape)} does not match cost shape {tuple(C.shape)}")
    return float((T.detach() * C.detach()).sum())


def exact_ot_square_uniform(C: Union[CostMatrix, torch.Tensor]) -> Tuple[TransportPlan, float]:
    """Unregularized OT with uniform marginals by enumerating all N! permutations.

    A minimum-cost permutation matrix scaled by 1/N is an optimal vertex of the
    transport polytope (Birkhoff), so this is exact for N <= MAX_ORACLE_N.
    """
    C = C.values if isinstance(C, CostMatrix) else _as_tensor(C)
    C = C.detach()
    n, n2 = C.shape
    if n != n2:
        raise ShapeError(f"Permutation oracle needs a square cost matrix, got {tuple(C.shape)}")
    if n > MAX_ORACLE_N:
        raise ValueError(f"Permutation oracle limited to N <= {MAX_ORACLE_N}, got {n}")

    cost_rows = C.tolist()
    best_perm, best_cost = None, math.inf
    for perm in itertools.permutations(range(n)):
        total = sum(cost_rows[i][j] for i, j in enumerate(perm))
        if total < best_cost:
            best_perm, best_cost = perm, total

    plan = torch.zeros((n, n), dtype=DTYPE)
    for i, j in enumerate(best_perm):
        plan[i, j] = 1.0 / n
    cost = best_cost / n
    return TransportPlan(plan, MarginalPair.uniform(n, n), True, 0.0, 0), cost
