import math

import numpy as np
import pytest
import torch

from conftest import central_fd
from src.embeddings import MOL, PROT, EntityId
from src.errors import FormatError
from src.kg_embed import (FAMILIES, KgTrainConfig, build_model, canonical_family, kg_nll, l_kg, l_pseudo, l_total,
                          load_kg_model, pseudo_alignment, rank_candidates, save_kg_model, train_kg)
from src.kg_store import KnowledgeGraph, Triple, TripleBatch

T64 = torch.float64


def rows(*triples):
    return np.asarray(triples, dtype=np.int64).reshape(-1, 3)


def toy_batch(with_pseudo=True):
    pseudo = rows((1, 1, 2)) if with_pseudo else rows()
    weights = np.asarray([0.7] if with_pseudo else [], dtype=np.float64)
    return TripleBatch(rows((0, 0, 1), (2, 1, 3)), pseudo, weights, rows((0, 0, 4), (3, 1, 1)))


def mapping_graph(n=25):
    return KnowledgeGraph(Triple(EntityId(MOL, f"a{i}"), "maps", EntityId(PROT, f"b{i}")) for i in range(n))


def test_canonical_family():
    assert canonical_family("ComplEx_FF") == "complex"
    assert canonical_family("RotatE") == "rotate"
    with pytest.raises(ValueError):
        canonical_family("transe")
    assert KgTrainConfig(family="complex_ff").family == "complex"
    with pytest.raises(ValueError):
        KgTrainConfig(proportions=(0, 1, 1))
    with pytest.raises(ValueError):
        KgTrainConfig(alpha=-1)


def test_odd_dim_rejected_for_complex_families():
    for family in ("rotate", "complex"):
        with pytest.raises(ValueError):
            build_model(family, 3, 1, dim=3)


def test_rotate_identity_rotation_scores_gamma():
    model = build_model("rotate", 2, 1, dim=4, gamma=6.0, seed=0)
    with torch.no_grad():
        model.entity[1] = model.entity[0]
        model.phase.zero_()
    assert model.score_triple(0, 0, 1) == pytest.approx(6.0, abs=1e-12)


def test_complex_zero_relation_scores_zero():
    model = build_model("complex", 3, 1, dim=4, seed=0)
    with torch.no_grad():
        model.relation.zero_()
    assert model.score_triple(0, 0, 2) == 0.0


def test_toruse_wraps_around():
    model = build_model("toruse", 2, 1, dim=1, gamma=6.0, seed=0)
    with torch.no_grad():
        model.entity.copy_(torch.tensor([[0.9], [0.1]], dtype=T64))
        model.translation.copy_(torch.tensor([[0.2]], dtype=T64))
    assert model.score_triple(0, 0, 1) == pytest.approx(6.0, abs=1e-12)


def test_pairre_and_mure_formulas():
    pairre = build_model("pairre", 2, 1, dim=2, gamma=6.0, seed=0)
    with torch.no_grad():
        pairre.entity.copy_(torch.tensor([[1.0, 2.0], [3.0, -1.0]], dtype=T64))
        pairre.rel_head.copy_(torch.tensor([[1.0, 1.0]], dtype=T64))
        pairre.rel_tail.copy_(torch.tensor([[0.5, 2.0]], dtype=T64))
    # |1 - 1.5| + |2 + 2| = 4.5
    assert pairre.score_triple(0, 0, 1) == pytest.approx(1.5)

    mure = build_model("mure", 2, 1, dim=2, seed=0)
    with torch.no_grad():
        mure.entity.copy_(torch.tensor([[1.0, 1.0], [2.0, 0.0]], dtype=T64))
        mure.rel_diag.copy_(torch.tensor([[2.0, 1.0]], dtype=T64))
        mure.rel_vec.copy_(torch.tensor([[0.0, -1.0]], dtype=T64))
        mure.bias.copy_(torch.tensor([0.25, 0.5], dtype=T64))
    assert mure.score_triple(0, 0, 1) == pytest.approx(0.75)


def test_score_triple_checks_indices():
    model = build_model("pairre", 3, 2, dim=4, seed=0)
    with pytest.raises(IndexError):
        model.score_triple(3, 0, 1)
    with pytest.raises(IndexError):
        model.score_triple(0, 2, 1)


@pytest.mark.parametrize("family", FAMILIES)
def test_scores_are_deterministic_and_finite(family):
    a = build_model(family, 6, 2, dim=8, seed=3)
    b = build_model(family, 6, 2, dim=8, seed=3)
    h, r, t = torch.tensor([0, 1, 5]), torch.tensor([0, 1, 1]), torch.tensor([2, 3, 4])
    sa, sb = a.score(h, r, t), b.score(h, r, t)
    assert torch.equal(sa, sb)
    assert torch.all(torch.isfinite(sa))


def test_kg_nll_examples():
    assert float(kg_nll(torch.tensor([30.0], dtype=T64), torch.tensor([-30.0], dtype=T64))) == pytest.approx(0, abs=1e-12)
    assert float(kg_nll(torch.zeros(1, dtype=T64), torch.zeros(1, dtype=T64))) == pytest.approx(math.log(2))
    value = kg_nll(torch.tensor([1.0, -1.0], dtype=T64), torch.tensor([1.0], dtype=T64))
    assert float(value) == pytest.approx(0.9800, abs=1e-4)
    big = kg_nll(torch.tensor([-1e6], dtype=T64), torch.tensor([1e6], dtype=T64))
    assert math.isfinite(float(big))
    with pytest.raises(ValueError):
        kg_nll(torch.zeros(0, dtype=T64), torch.zeros(1, dtype=T64))


def test_pseudo_alignment_examples():
    logit = math.log(0.8 / 0.2)
    assert float(pseudo_alignment(torch.tensor([logit], dtype=T64), [0.8])) == pytest.approx(0.0, abs=1e-15)
    assert float(pseudo_alignment(torch.tensor([60.0], dtype=T64), [0.0])) == pytest.approx(1.0)
    assert float(pseudo_alignment(torch.tensor([logit], dtype=T64), [0.5])) == pytest.approx(0.09)
    assert float(pseudo_alignment(torch.tensor([0.8], dtype=T64), [0.5], squash=False)) == pytest.approx(0.09)
    with pytest.raises(ValueError):
        pseudo_alignment(torch.zeros(0, dtype=T64), [])
    with pytest.raises(ValueError):
        pseudo_alignment(torch.zeros(1, dtype=T64), [float("nan")])


def test_l_total_combines_terms():
    model = build_model("pairre", 5, 2, dim=4, seed=1)
    batch = toy_batch()
    kg = float(l_kg(model, batch.real, batch.negatives))
    pseudo = float(l_pseudo(model, batch.pseudo, batch.pseudo_weights))
    assert float(l_total(model, batch, 0.0)) == kg
    assert float(l_total(model, batch, 0.1)) == pytest.approx(kg + 0.1 * pseudo, abs=1e-12)
    assert float(l_total(model, toy_batch(with_pseudo=False), 0.1)) == kg


def test_l_total_can_count_pseudo_as_positives():
    model = build_model("rotate", 5, 2, dim=4, seed=1)
    batch = toy_batch()
    positives = np.concatenate([batch.real, batch.pseudo])
    expected = float(l_kg(model, positives, batch.negatives))
    assert float(l_total(model, batch, 0.0, include_pseudo_in_kg=True)) == pytest.approx(expected)


def random_batch(seed, n_entities=5, n_relations=2):
    rng = np.random.default_rng(seed)

    def triples(n):
        return np.stack([rng.integers(0, n_entities, n), rng.integers(0, n_relations, n),
                         rng.integers(0, n_entities, n)], axis=1).astype(np.int64)

    return TripleBatch(triples(3), triples(2), rng.uniform(0.1, 1.0, size=2), triples(3))


@pytest.mark.parametrize("family", FAMILIES)
def test_l_total_gradients_match_finite_differences(family):
    for seed in range(20):
        model = build_model(family, 5, 2, dim=4, seed=seed)
        batch = random_batch(100 + seed)

        model.zero_grad()
        l_total(model, batch, 0.1).backward()
        for param in model.tables():
            analytic = param.grad.detach().clone()
            original = param.detach().clone()

            def f(x, param=param):
                with torch.no_grad():
                    param.copy_(x)
                return l_total(model, batch, 0.1)

            numeric = central_fd(f, original)
            with torch.no_grad():
                param.copy_(original)
            # Rows the batch never touches have an exact zero numeric gradient.
            assert torch.allclose(analytic, numeric, rtol=1e-4, atol=1e-8), (family, seed)


def test_torus_periodicity():
    model = build_model("toruse", 4, 1, dim=3, seed=2)
    h, r, t = torch.tensor([0, 1, 2]), torch.tensor([0, 0, 0]), torch.tensor([3, 2, 1])
    before = model.score(h, r, t).detach()
    with torch.no_grad():
        model.entity += torch.tensor([1.0, -2.0, 3.0], dtype=T64)
        model.translation += 5.0
    assert torch.allclose(model.score(h, r, t).detach(), before, atol=1e-9)


def test_rotate_phase_periodicity():
    model = build_model("rotate", 4, 1, dim=6, seed=2)
    h, r, t = torch.tensor([0, 1]), torch.tensor([0, 0]), torch.tensor([3, 2])
    before = model.score(h, r, t).detach()
    with torch.no_grad():
        model.phase += 2 * math.pi
    assert torch.allclose(model.score(h, r, t).detach(), before, atol=1e-9)


def test_complex_conjugate_relation_swaps_roles():
    model = build_model("complex", 3, 2, dim=6, seed=4)
    with torch.no_grad():
        re, im = torch.chunk(model.relation[0].clone(), 2)
        model.relation[1] = torch.cat([re, -im])
    for h, t in ((0, 1), (2, 0), (1, 1)):
        assert model.score_triple(h, 1, t) == pytest.approx(model.score_triple(t, 0, h), abs=1e-9)


@pytest.mark.parametrize("family", ["pairre", "rotate", "toruse"])
def test_gamma_shift_keeps_rankings(family):
    base = build_model(family, 8, 1, dim=4, gamma=6.0, seed=5)
    shifted = build_model(family, 8, 1, dim=4, gamma=11.0, seed=5)
    ranked = rank_candidates(base, 0, 0, "tail", range(8))
    moved = rank_candidates(shifted, 0, 0, "tail", range(8))
    assert [c for c, _ in ranked] == [c for c, _ in moved]
    for (_, a), (_, b) in zip(ranked, moved):
        assert b - a == pytest.approx(5.0, abs=1e-9)


def test_rank_candidates_examples():
    model = build_model("rotate", 4, 1, dim=4, seed=6)
    assert rank_candidates(model, 0, 0, "tail", [2])[0][0] == 2

    with torch.no_grad():
        model.phase.zero_()
        model.entity[2] = model.entity[0]
    ranked = rank_candidates(model, 0, 0, "tail", [1, 2, 3])
    assert ranked[0][0] == 2

    filtered = rank_candidates(model, 0, 0, "tail", [1, 2, 3], known={(0, 0, 2), (0, 0, 3)}, keep=3)
    assert sorted(c for c, _ in filtered) == [1, 3]
    head = rank_candidates(model, 0, 0, "head", [1, 2], known={(1, 0, 0)})
    assert [c for c, _ in head] == [2]
    with pytest.raises(ValueError):
        rank_candidates(model, 0, 0, "sideways", [1])


def test_rank_ties_go_to_lower_index():
    model = build_model("complex", 4, 1, dim=4, seed=0)
    with torch.no_grad():
        model.relation.zero_()
    assert [c for c, _ in rank_candidates(model, 0, 0, "tail", [3, 1, 2])] == [1, 2, 3]


def test_training_reduces_loss():
    cfg = KgTrainConfig(family="rotate", dim=16, batch_size=32, learning_rate=0.05, epochs=200,
                        proportions=(1, 0, 1), seed=0)
    result = train_kg(mapping_graph(), cfg=cfg)
    assert len(result.trace) == 200
    assert result.trace[-1] <= 0.5 * result.trace[0]


def test_training_is_deterministic():
    kg = mapping_graph(10)
    cfg = KgTrainConfig(family="mure", dim=8, batch_size=12, epochs=3, seed=9)
    a, b = train_kg(kg, cfg=cfg), train_kg(kg, cfg=cfg)
    assert a.trace == b.trace
    for ta, tb in zip(a.model.tables(), b.model.tables()):
        assert torch.equal(ta, tb)


def test_training_keeps_domains():
    cfg = KgTrainConfig(family="toruse", dim=4, batch_size=8, epochs=2, learning_rate=0.5, seed=1)
    model = train_kg(mapping_graph(6), cfg=cfg).model
    assert torch.all((model.entity >= 0) & (model.entity <= 1))
    rotate = train_kg(mapping_graph(6), "rotate", KgTrainConfig(dim=4, batch_size=8, epochs=2, learning_rate=0.5))
    assert torch.all((rotate.model.phase >= 0) & (rotate.model.phase <= 2 * math.pi))


def test_training_needs_real_triples():
    with pytest.raises(ValueError):
        train_kg(KnowledgeGraph(), cfg=KgTrainConfig(dim=4))


@pytest.mark.parametrize("family", FAMILIES)
def test_checkpoint_roundtrip(tmp_path, family):
    model = build_model(family, 5, 3, dim=4, gamma=4.5, seed=8)
    path = str(tmp_path / "model.kge")
    save_kg_model(model, path)
    back = load_kg_model(path)
    assert back.family == model.family and back.gamma == 4.5
    for a, b in zip(model.tables(), back.tables()):
        assert torch.equal(a, b)


def test_checkpoint_format_errors(tmp_path):
    bad = tmp_path / "bad.kge"
    bad.write_bytes(b"NOPE")
    with pytest.raises(FormatError):
        load_kg_model(str(bad))
    path = tmp_path / "model.kge"
    save_kg_model(build_model("pairre", 2, 1, dim=2, seed=0), str(path))
    long = tmp_path / "long.kge"
    long.write_bytes(path.read_bytes() + b"\x00" * 8)
    with pytest.raises(FormatError):
        load_kg_model(str(long))
