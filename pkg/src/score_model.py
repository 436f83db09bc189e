# src/score_model.py
"""Pairwise molecule-protein scorer S(x, y) = sigmoid(W(x ⊕ y)) and its training losses."""
import copy
import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from src.embeddings import EmbeddingMatrix, EntityId
from src.errors import ConvergenceError, FormatError, ShapeError, TrainingDivergedError
from src.ot_core import (DTYPE, FROM_SCORES, GROUND_TRUTH, CostMatrix, MarginalPair, OtConfig,
                         sinkhorn)

logger = logging.getLogger(__name__)

OT_KL = "ot_kl"
INFONCE = "infonce"
LOSS_KINDS = (OT_KL, INFONCE)

CHECKPOINT_MAGIC = b"SMP1"

# Plan entries at or below this mass contribute nothing to the KL sum.
KL_FLOOR = 1e-30


@dataclass(frozen=True)
class ScoreTrainConfig:
    batch_size: int = 128
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    max_epochs: int = 50
    early_stop_patience: int = 5
    loss_kind: str = OT_KL
    epsilon: float = 0.1
    temperature: float = 0.1
    hidden_dims: Tuple[int, ...] = (512, 256)
    val_fraction: float = 0.1
    sinkhorn_tol: float = 1e-9
    sinkhorn_max_iter: int = 2000

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        for name in ("learning_rate", "max_epochs", "early_stop_patience", "epsilon",
                     "temperature", "sinkhorn_tol", "sinkhorn_max_iter"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden_dims must be positive")


@dataclass(frozen=True)
class ScoreMatrix:
    mol_ids: Tuple[EntityId, ...]
    prot_ids: Tuple[EntityId, ...]
    values: torch.Tensor

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.values.shape)


@dataclass
class TrainBatch:
    """Row i pairs mol_emb[i] with prot_emb[i]; every j != i is an in-batch negative."""

    pairs: torch.Tensor
    mol_emb: torch.Tensor
    prot_emb: torch.Tensor

    def __post_init__(self):
        if self.pairs.shape[0] < 2:
            raise ValueError("A training batch needs at least 2 pairs")


@dataclass
class ScoreTrainResult:
    model: "ScoreModel"
    trace: List[Dict[str, float]] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False


class ScoreModel(nn.Module):
    """Feed-forward scorer over concatenated embeddings.

    layer_dims = [2*dim, hidden..., 1]; ReLU between layers, logistic at the output.
    """

    def __init__(self, layer_dims: Sequence[int], generator: Optional[torch.Generator] = None):
        super().__init__()
        dims = tuple(int(d) for d in layer_dims)
        if len(dims) < 2 or dims[-1] != 1 or dims[0] % 2 or min(dims) < 1:
            raise ValueError(f"layer_dims must be [2*dim, ..., 1], got {list(dims)}")
        self.layer_dims = dims
        self.layers = nn.ModuleList(
            nn.Linear(a, b, dtype=DTYPE) for a, b in zip(dims[:-1], dims[1:])
        )
        self.reset_parameters(generator)

    @property
    def emb_dim(self) -> int:
        return self.layer_dims[0] // 2

    def reset_parameters(self, generator: Optional[torch.Generator] = None) -> None:
        """Uniform fan-in initialization U(-1/sqrt(fan_in), 1/sqrt(fan_in))"""
        with torch.no_grad():
            for layer in self.layers:
                bound = 1.0 / math.sqrt(layer.in_features)
                layer.weight.uniform_(-bound, bound, generator=generator)
                layer.bias.uniform_(-bound, bound, generator=generator)

    def _tail(self, h: torch.Tensor) -> torch.Tensor:
        for layer in self.layers[1:]:
            h = layer(torch.relu(h))
        return h.squeeze(-1)

    def forward(self, mol: torch.Tensor, prot: torch.Tensor) -> torch.Tensor:
        """Logits for aligned rows of mol and prot"""
        return self._tail(self.layers[0](torch.cat([mol, prot], dim=-1)))

    def pairwise_logits(self, mols: torch.Tensor, prots: torch.Tensor) -> torch.Tensor:
        """M x N logits for every (mol, prot) combination.

        The first layer is linear in the concatenation, so W(x ⊕ y) splits into
        W_x x + W_y y and is evaluated once per row instead of once per pair.
        """
        first = self.layers[0]
        d = self.emb_dim
        left = mols @ first.weight[:, :d].T
        right = prots @ first.weight[:, d:].T
        h = left[:, None, :] + right[None, :, :] + first.bias
        return self._tail(h)


def _squash(logits: torch.Tensor) -> torch.Tensor:
    # Keep outputs strictly inside (0, 1) even when the logistic saturates in float64.
    return torch.sigmoid(logits).clamp(np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).epsneg)


def _check_dim(model: ScoreModel, dim: int, what: str) -> None:
    if dim != model.emb_dim:
        raise ShapeError(f"{what} embedding dim {dim} does not match model input dim {model.emb_dim}")


def score_pair(model: ScoreModel, mol_emb, prot_emb) -> float:
    """S(x, y) for one molecule and one protein embedding"""
    mol = torch.as_tensor(np.asarray(mol_emb), dtype=DTYPE).reshape(-1)
    prot = torch.as_tensor(np.asarray(prot_emb), dtype=DTYPE).reshape(-1)
    _check_dim(model, mol.numel(), "molecule")
    _check_dim(model, prot.numel(), "protein")
    with torch.no_grad():
        return float(_squash(model(mol[None, :], prot[None, :]))[0])


def score_matrix(model: ScoreModel, mols: EmbeddingMatrix, prots: EmbeddingMatrix,
                 chunk_size: int = 1024) -> ScoreMatrix:
    """Dense M x N score matrix, evaluated in molecule chunks"""
    _check_dim(model, mols.dim, "molecule")
    _check_dim(model, prots.dim, "protein")
    prot_t = torch.as_tensor(prots.values, dtype=DTYPE)
    mol_t = torch.as_tensor(mols.values, dtype=DTYPE)
    chunks = []
    with torch.no_grad():
        for start in range(0, len(mols), chunk_size):
            chunks.append(_squash(model.pairwise_logits(mol_t[start:start + chunk_size], prot_t)))
    values = torch.cat(chunks, dim=0) if chunks else torch.zeros((0, len(prots)), dtype=DTYPE)
    return ScoreMatrix(mols.ids, prots.ids, values)


def build_gt_cost(batch_size: int) -> CostMatrix:
    """Zero cost on the diagonal (positive pairs), one elsewhere"""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    return CostMatrix(1.0 - torch.eye(batch_size, dtype=DTYPE), GROUND_TRUTH)


def ot_kl_loss(C_pred: CostMatrix, C_gt: CostMatrix, epsilon: float, tol: float = 1e-9,
               max_iter: int = 2000) -> torch.Tensor:
    """KL(T_pred || T_gt) between the Sinkhorn plans of both costs at the same epsilon.

    Returns a 0-d tensor that carries gradients back through the unrolled
    Sinkhorn iterations of C_pred.
    """
    pred = C_pred.values if isinstance(C_pred, CostMatrix) else torch.as_tensor(C_pred, dtype=DTYPE)
    gt = C_gt.values if isinstance(C_gt, CostMatrix) else torch.as_tensor(C_gt, dtype=DTYPE)
    if pred.ndim != 2 or pred.shape[0] != pred.shape[1]:
        raise ShapeError(f"Predicted cost must be square, got {tuple(pred.shape)}")
    if gt.shape != pred.shape:
        raise ShapeError(f"Cost shapes differ: {tuple(pred.shape)} vs {tuple(gt.shape)}")

    b = pred.shape[0]
    marginals = MarginalPair.uniform(b, b)
    cfg = OtConfig(epsilon=epsilon, tol=tol, max_inner_iter=max_iter)
    plan_pred = sinkhorn(pred, marginals, cfg)
    plan_gt = sinkhorn(gt, marginals, cfg)
    for name, plan in (("predicted", plan_pred), ("ground-truth", plan_gt)):
        if not plan.converged:
            raise ConvergenceError(f"Sinkhorn on the {name} cost did not converge "
                                   f"(violation {plan.violation:.3e})", plan.violation)

    t_pred = plan_pred.values
    log_ratio = plan_pred.log_values - plan_gt.log_values
    terms = torch.where(t_pred > KL_FLOOR, t_pred * log_ratio, torch.zeros_like(t_pred))
    return terms.sum()


def infonce_loss(scores: torch.Tensor, temperature: float) -> torch.Tensor:
    """Symmetric InfoNCE over a B x B score matrix with positives on the diagonal"""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    scores = torch.as_tensor(scores, dtype=DTYPE)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ShapeError(f"InfoNCE needs a square score matrix, got {tuple(scores.shape)}")
    if scores.shape[0] < 2:
        raise ValueError("InfoNCE needs at least 2 pairs")
    logits = scores / temperature
    targets = torch.arange(scores.shape[0])
    return 0.5 * (F.cross_entropy(logits, targets) + F.cross_entropy(logits.T, targets))


def batch_loss(model: ScoreModel, batch: TrainBatch, cfg: ScoreTrainConfig) -> torch.Tensor:
    """Configured loss on one batch"""
    scores = torch.sigmoid(model.pairwise_logits(batch.mol_emb, batch.prot_emb))
    if cfg.loss_kind == OT_KL:
        c_pred = CostMatrix(1.0 - scores, FROM_SCORES)
        return ot_kl_loss(c_pred, build_gt_cost(scores.shape[0]), cfg.epsilon,
                          tol=cfg.sinkhorn_tol, max_iter=cfg.sinkhorn_max_iter)
    return infonce_loss(scores, cfg.temperature)


def _chunk(indices: torch.Tensor, size: int) -> List[torch.Tensor]:
    chunks = list(torch.split(indices, size))
    # A trailing singleton has no in-batch negative; fold it into its neighbour.
    if len(chunks) > 1 and chunks[-1].numel() < 2:
        chunks[-2] = torch.cat([chunks[-2], chunks.pop()])
    return chunks


def train_score_model(pairs: Sequence[Tuple[int, int]], mols: EmbeddingMatrix, prots: EmbeddingMatrix,
                      cfg: ScoreTrainConfig, seed: int, progress: bool = False) -> ScoreTrainResult:
    """Fit the scorer on labeled positive (mol index, prot index) pairs.

    A seeded validation split (cfg.val_fraction) drives early stopping; the
    returned model holds the best-validation parameters.
    """
    if mols.dim != prots.dim:
        raise ShapeError(f"Molecule dim {mols.dim} != protein dim {prots.dim}")
    pair_t = torch.as_tensor(np.asarray(pairs, dtype=np.int64).reshape(-1, 2))
    n = pair_t.shape[0]
    if n < 2 * cfg.batch_size:
        raise ValueError(f"Need at least {2 * cfg.batch_size} positive pairs, got {n}")

    gen = torch.Generator().manual_seed(seed)
    perm = torch.randperm(n, generator=gen)
    n_val = max(2, int(round(cfg.val_fraction * n)))
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    mol_t = torch.as_tensor(mols.values, dtype=DTYPE)
    prot_t = torch.as_tensor(prots.values, dtype=DTYPE)

    def make_batch(idx: torch.Tensor) -> TrainBatch:
        chosen = pair_t[idx]
        return TrainBatch(chosen, mol_t[chosen[:, 0]], prot_t[chosen[:, 1]])

    val_batches = [make_batch(idx) for idx in _chunk(val_idx, cfg.batch_size)]

    model = ScoreModel([2 * mols.dim, *cfg.hidden_dims, 1], generator=gen)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)

    def validation_loss() -> float:
        with torch.no_grad():
            losses = [float(batch_loss(model, b, cfg)) for b in val_batches]
        return float(np.mean(losses))

    best_val = validation_loss()
    trace: List[Dict[str, float]] = [{"epoch": 0, "train_loss": math.nan, "val_loss": best_val}]
    best_state = copy.deepcopy(model.state_dict())
    best_epoch, stale, stopped_early = 0, 0, False
    logger.info(f"🎯 Training score model ({cfg.loss_kind}) on {len(train_idx)} pairs, "
                f"validating on {n_val}; initial val loss {best_val:.4f}")

    epochs = tqdm(range(1, cfg.max_epochs + 1), desc="score model", disable=not progress)
    for epoch in epochs:
        order = train_idx[torch.randperm(len(train_idx), generator=gen)]
        losses = []
        for b, idx in enumerate(_chunk(order, cfg.batch_size)):
            optimizer.zero_grad()
            loss = batch_loss(model, make_batch(idx), cfg)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"Score model loss became {float(loss)} at epoch {epoch}, "
                                            f"batch {b}", epoch, b, trace)
            loss.backward()
            optimizer.step()
            losses.append(float(loss))

        val = validation_loss()
        if not math.isfinite(val):
            raise TrainingDivergedError(f"Validation loss became {val} at epoch {epoch}", epoch, -1, trace)
        trace.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val})
        logger.debug(f"epoch {epoch}: train {trace[-1]['train_loss']:.5f} val {val:.5f}")

        if val < best_val:
            best_val, best_epoch, stale = val, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                stopped_early = True
                logger.info(f"Early stopping at epoch {epoch} (best epoch {best_epoch})")
                break

    model.load_state_dict(best_state)
    logger.info(f"✅ Score model trained: best val loss {best_val:.4f} at epoch {best_epoch}")
    return ScoreTrainResult(model, trace, best_epoch, stopped_early)


def save_score_model(model: ScoreModel, path: str) -> None:
    """SMP1: magic, u32 layer count, u32 layer dims, then f64 weights/biases per layer"""
    dims = model.layer_dims
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack(f"<I{len(dims)}I", len(dims), *dims))
        for layer in model.layers:
            f.write(np.ascontiguousarray(layer.weight.detach().numpy(), dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(layer.bias.detach().numpy(), dtype="<f8").tobytes())


def load_score_model(path: str) -> ScoreModel:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not an SMP1 score-model checkpoint", path)
    try:
        (count,) = struct.unpack_from("<I", blob, 4)
        dims = struct.unpack_from(f"<{count}I", blob, 8)
    except struct.error:
        raise FormatError("truncated checkpoint header", path)
    offset = 8 + 4 * count

    model = ScoreModel(dims)
    with torch.no_grad():
        for layer in model.layers:
            for param in (layer.weight, layer.bias):
                n_bytes = param.numel() * 8
                if offset + n_bytes > len(blob):
                    raise FormatError("truncated checkpoint parameters", path)
                values = np.frombuffer(blob, dtype="<f8", count=param.numel(), offset=offset)
                param.copy_(torch.from_numpy(values.reshape(param.shape).copy()))
                offset += n_bytes
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes in checkpoint", path)
    return model
