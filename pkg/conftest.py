import numpy as np
import pytest
import torch

from src.embeddings import MOL, PROT, EmbeddingMatrix, EntityId


def central_fd(f, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Central finite-difference gradient of scalar f at x (float64)"""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, out = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = float(f(x))
        flat[i] = orig - h
        down = float(f(x))
        flat[i] = orig
        out[i] = (up - down) / (2 * h)
    return grad


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    a, b = torch.as_tensor(a, dtype=torch.float64), torch.as_tensor(b, dtype=torch.float64)
    scale = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / scale


def make_matrix(namespace: str, values) -> EmbeddingMatrix:
    values = np.asarray(values, dtype=np.float64)
    ids = tuple(EntityId(namespace, f"{namespace.lower()}{i}") for i in range(len(values)))
    return EmbeddingMatrix(ids, values, values.shape[1])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def mols_prots(rng):
    mols = make_matrix(MOL, rng.normal(size=(6, 4)))
    prots = make_matrix(PROT, rng.normal(size=(5, 4)))
    return mols, prots
