# src/pipeline.py
"""Pipeline stages: synthetic data, score model, pseudo-labels, KG training, evaluation and ablations."""
import dataclasses
import functools
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import pandas as pd

from src.config import (ABLATE_LOSS, ABLATE_PSEUDO, ABLATE_RELATIONS, LINK_PREDICTION, Config, RunConfig,
                        stage_seed)
from src.embeddings import (MOL, PROT, EmbeddingMatrix, EntityId, concat_embeddings, cosine_similarity_matrix,
                            l2_normalize, load_embeddings, save_embeddings)
from src.errors import FormatError, PipelineError, ShapeError, StageError
from src.kg_embed import KgModel, KgTrainResult, load_kg_model, save_kg_model, train_kg
from src.kg_store import (KnowledgeGraph, Split, Triple, holdout_split, inject_pseudo_edges, load_triples,
                          save_triples, with_relations)
from src.metrics import (LabeledScores, MetricsReport, evaluate_link_prediction, evaluate_screening)
from src.pseudo_labeler import (NONE, OT_SIM, PseudoLabelSet, label_pairs, load_pseudo_labels, strategy_config)
from src.score_model import (ScoreModel, ScoreTrainResult, load_score_model, save_score_model, score_matrix,
                             train_score_model)
from src.synth import INTERACTS, context_relations, gen_embeddings, gen_planted_kg, load_pairs, save_pairs

logger = logging.getLogger(__name__)


def stage(name: str) -> Callable:
    """Tag any error escaping a stage with the stage name"""
    def decorator(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except Exception as e:
                raise StageError(name, e) from e
        return wrapper
    return decorator


def _write_json(data: Any, path: str) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2)
    logger.info(f"📄 {path}")


def _require(path: str) -> str:
    if not os.path.exists(path):
        raise FileNotFoundError(f"Required input not found: {path}")
    return path


# --- in-memory building blocks -------------------------------------------------

def synthesize(cfg: RunConfig) -> Tuple[EmbeddingMatrix, KnowledgeGraph, List[Tuple[EntityId, EntityId]]]:
    mols, prots, _ = gen_embeddings(cfg.synth)
    kg, hidden = gen_planted_kg(cfg.synth)
    return concat_embeddings([mols, prots]), kg, hidden


def make_split(cfg: RunConfig, kg: KnowledgeGraph) -> Split:
    return holdout_split(kg, cfg.split.relation, cfg.split.n_test, stage_seed(cfg.seed, 'split'))


def split_embeddings(embeddings: EmbeddingMatrix) -> Tuple[EmbeddingMatrix, EmbeddingMatrix]:
    """Unit-normalized molecule and protein matrices"""
    mols = embeddings.by_namespace(MOL)
    prots = embeddings.by_namespace(PROT)
    if not len(mols) or not len(prots):
        raise ShapeError("Embeddings need both MOL and PROT entities")
    return l2_normalize(mols), l2_normalize(prots)


def labeled_pairs(train: KnowledgeGraph, relation: str, mols: EmbeddingMatrix,
                  prots: EmbeddingMatrix) -> List[Tuple[int, int]]:
    """(mol row, prot row) for every training edge of `relation` with embedded endpoints"""
    mol_index, prot_index = mols.index(), prots.index()
    return [(mol_index[t.head], prot_index[t.tail]) for t in train.triples
            if t.relation == relation and t.head in mol_index and t.tail in prot_index]


def fit_scorer(cfg: RunConfig, embeddings: EmbeddingMatrix, train: KnowledgeGraph,
               progress: bool = False) -> ScoreTrainResult:
    mols, prots = split_embeddings(embeddings)
    pairs = labeled_pairs(train, cfg.split.relation, mols, prots)
    return train_score_model(pairs, mols, prots, cfg.score, stage_seed(cfg.seed, 'score-train'), progress)


def make_pseudo(cfg: RunConfig, model: ScoreModel, embeddings: EmbeddingMatrix,
                random_count: Optional[int] = None):
    """Score every (mol, prot) pair and run the configured labeling strategy"""
    mols, prots = split_embeddings(embeddings)
    scores = score_matrix(model, mols, prots)
    sim = cosine_similarity_matrix(mols)
    seed = stage_seed(cfg.seed, 'pseudo')
    count = random_count if random_count is not None else cfg.pseudo.random_count
    if cfg.pseudo.strategy == 'random' and count is None:
        # Match the pair count of the similarity-constrained OT run.
        count = len(label_pairs(scores, sim, strategy_config(cfg.pseudo, OT_SIM), seed)[0])
        logger.info(f"Random baseline matched to {count} ot_sim pairs")
    labels, plan = label_pairs(scores, sim, cfg.pseudo, seed, count)
    logger.info(f"✅ {cfg.pseudo.strategy}: {len(labels)} pseudo-labels")
    return labels, plan


def training_graph(train: KnowledgeGraph, labels: Optional[PseudoLabelSet]) -> KnowledgeGraph:
    return inject_pseudo_edges(train, labels) if labels else train


def fit_kg(cfg: RunConfig, train: KnowledgeGraph, labels: Optional[PseudoLabelSet],
           family: Optional[str] = None, progress: bool = False) -> Tuple[KnowledgeGraph, KgTrainResult]:
    graph = training_graph(train, labels)
    return graph, train_kg(graph, family or cfg.kg.family, cfg.kg, progress)


def link_metrics(cfg: RunConfig, model: KgModel, graph: KnowledgeGraph, test: Sequence[Triple]) -> MetricsReport:
    if model.num_entities != graph.num_entities or model.num_relations != graph.num_relations:
        raise FormatError(f"Model covers {model.num_entities} entities / {model.num_relations} relations, "
                          f"graph has {graph.num_entities} / {graph.num_relations}")
    report = evaluate_link_prediction(model, Split(graph, tuple(test)), ks=cfg.eval.ks)
    report.seed = cfg.seed
    return report


# --- file-backed stages ----------------------------------------------------------

def ensure_split(cfg: RunConfig) -> Split:
    """Load the materialized split, or hold out test triples once and save both halves"""
    train_path = cfg.path(Config.TRAIN_TRIPLES_FILE)
    test_path = cfg.path(Config.TEST_TRIPLES_FILE)
    if os.path.exists(train_path) and os.path.exists(test_path):
        train = load_triples(train_path)
        return Split(train, load_triples(test_path).triples)

    kg = load_triples(_require(cfg.input_path('triples', Config.TRIPLES_FILE)))
    split = make_split(cfg, kg)
    save_triples(split.train, train_path)
    save_triples(split.test, test_path)
    logger.info(f"📄 {train_path}")
    logger.info(f"📄 {test_path}")
    # Reload so every stage sees the same vocabulary order.
    return Split(load_triples(train_path), load_triples(test_path).triples)


def _existing_pseudo_labels(cfg: RunConfig) -> Optional[PseudoLabelSet]:
    path = cfg.input_path('pseudo_labels', Config.PSEUDO_LABELS_FILE)
    if not os.path.exists(path):
        if cfg.paths.pseudo_labels:
            raise FileNotFoundError(f"Required input not found: {path}")
        return None
    return load_pseudo_labels(path)


def _clear_derived(cfg: RunConfig) -> None:
    """Remove artifacts built from an earlier synth run in the same output directory"""
    stale = [cfg.path(name) for name in Config.DERIVED_FILES if os.path.exists(cfg.path(name))]
    for path in stale:
        os.remove(path)
    if stale:
        logger.warning(f"⚠️  Removed {len(stale)} artifacts derived from the previous synthetic data")


@stage('synth')
def cmd_synth(cfg: RunConfig) -> Dict[str, str]:
    logger.info(f"🎯 Generating synthetic data (seed {cfg.seed})")
    os.makedirs(cfg.paths.out_dir, exist_ok=True)
    _clear_derived(cfg)
    embeddings, kg, hidden = synthesize(cfg)
    files = {
        'embeddings': cfg.path(Config.EMBEDDINGS_FILE),
        'triples': cfg.path(Config.TRIPLES_FILE),
        'hidden_pairs': cfg.path(Config.HIDDEN_PAIRS_FILE),
    }
    save_embeddings(embeddings, files['embeddings'])
    save_triples(kg, files['triples'])
    save_pairs(hidden, files['hidden_pairs'])
    logger.info(f"📄 {files['embeddings']}: {len(embeddings)} embeddings (dim {embeddings.dim})")
    logger.info(f"📄 {files['triples']}: {len(kg)} triples, {kg.num_relations - 1} relations")
    logger.info(f"📄 {files['hidden_pairs']}: {len(hidden)} hidden pairs")
    return files


@stage('score-train')
def cmd_score_train(cfg: RunConfig, progress: bool = False) -> Dict[str, str]:
    os.makedirs(cfg.paths.out_dir, exist_ok=True)
    embeddings = load_embeddings(_require(cfg.input_path('embeddings', Config.EMBEDDINGS_FILE)))
    split = ensure_split(cfg)
    result = fit_scorer(cfg, embeddings, split.train, progress)

    files = {'score_model': cfg.path(Config.SCORE_MODEL_FILE), 'trace': cfg.path(Config.SCORE_TRACE_FILE)}
    save_score_model(result.model, files['score_model'])
    logger.info(f"📄 {files['score_model']}")
    _write_json({'loss_kind': cfg.score.loss_kind, 'best_epoch': result.best_epoch,
                 'stopped_early': result.stopped_early, 'trace': result.trace}, files['trace'])
    return files


@stage('pseudo')
def cmd_pseudo(cfg: RunConfig) -> Dict[str, str]:
    os.makedirs(cfg.paths.out_dir, exist_ok=True)
    model = load_score_model(_require(cfg.input_path('score_model', Config.SCORE_MODEL_FILE)))
    embeddings = load_embeddings(_require(cfg.input_path('embeddings', Config.EMBEDDINGS_FILE)))
    if model.emb_dim != embeddings.dim:
        raise ShapeError(f"Score model expects dim {model.emb_dim}, embeddings have dim {embeddings.dim}")
    labels, plan = make_pseudo(cfg, model, embeddings)

    files = {'pseudo_labels': cfg.path(Config.PSEUDO_LABELS_FILE), 'summary': cfg.path(Config.PSEUDO_SUMMARY_FILE)}
    labels.save(files['pseudo_labels'])
    logger.info(f"📄 {files['pseudo_labels']}: {len(labels)} pairs")
    summary = {
        'strategy': cfg.pseudo.strategy,
        'pair_count': len(labels),
        'threshold_source': cfg.pseudo.threshold_source,
        'delta': cfg.pseudo.delta,
        'epsilon': cfg.pseudo.epsilon,
        'lambda': cfg.pseudo.lambda_,
        'objectives': plan.objectives if plan is not None else [],
        'marginal_violation': plan.violation if plan is not None else None,
    }
    _write_json(summary, files['summary'])
    return files


@stage('kg-train')
def cmd_kg_train(cfg: RunConfig, progress: bool = False) -> Dict[str, str]:
    os.makedirs(cfg.paths.out_dir, exist_ok=True)
    split = ensure_split(cfg)
    labels = _existing_pseudo_labels(cfg)
    if labels is None:
        logger.info("No pseudo-label file; training on the knowledge graph alone")
    _, result = fit_kg(cfg, split.train, labels, progress=progress)

    files = {'kg_model': cfg.path(Config.KG_MODEL_FILE), 'trace': cfg.path(Config.KG_TRACE_FILE)}
    save_kg_model(result.model, files['kg_model'])
    logger.info(f"📄 {files['kg_model']}")
    _write_json({'family': result.model.family, 'alpha': cfg.kg.alpha, 'trace': result.trace}, files['trace'])
    return files


def screening_table(cfg: RunConfig) -> pd.DataFrame:
    """Per-protein molecule scores from the score model; held-out and hidden pairs are actives"""
    model = load_score_model(_require(cfg.input_path('score_model', Config.SCORE_MODEL_FILE)))
    embeddings = load_embeddings(_require(cfg.input_path('embeddings', Config.EMBEDDINGS_FILE)))
    split = ensure_split(cfg)
    hidden_path = cfg.input_path('hidden_pairs', Config.HIDDEN_PAIRS_FILE)
    hidden = load_pairs(hidden_path) if os.path.exists(hidden_path) else []

    mols, prots = split_embeddings(embeddings)
    scores = score_matrix(model, mols, prots).values.numpy()
    actives = {(t.head, t.tail) for t in split.test if t.relation == cfg.split.relation} | set(hidden)
    seen = {(t.head, t.tail) for t in split.train.triples if t.relation == cfg.split.relation}

    rows = []
    for j, prot in enumerate(prots.ids):
        for i, mol in enumerate(mols.ids):
            if (mol, prot) in seen:
                continue
            rows.append((str(prot), str(mol), float(scores[i, j]), int((mol, prot) in actives)))
    return pd.DataFrame(rows, columns=['target', 'item', 'score', 'label'])


def load_screening_scores(path: str) -> pd.DataFrame:
    """Read '<target>\\t<item>\\t<score>\\t<label>' rows ('#' comments allowed)"""
    try:
        table = pd.read_csv(path, sep='\t', comment='#', header=None,
                            names=['target', 'item', 'score', 'label'], dtype={'target': str, 'item': str})
    except pd.errors.ParserError as e:
        raise FormatError(str(e), path)
    if table[['score', 'label']].isna().any().any():
        raise FormatError("missing score or label values", path)
    if not table['label'].isin([0, 1]).all():
        raise FormatError("labels must be 0 or 1", path)
    return table


def screening_targets(table: pd.DataFrame) -> List[LabeledScores]:
    targets = []
    for target, group in table.groupby('target', sort=True):
        d = LabeledScores(group['score'].to_numpy(), group['label'].to_numpy(), str(target))
        if d.n_actives == 0 or d.n_decoys == 0:
            logger.warning(f"⚠️  Skipping target {target}: {d.n_actives} actives, {d.n_decoys} decoys")
            continue
        targets.append(d)
    return targets


@stage('eval')
def cmd_eval(cfg: RunConfig) -> Dict[str, str]:
    os.makedirs(cfg.paths.out_dir, exist_ok=True)
    if cfg.eval.mode == LINK_PREDICTION:
        split = ensure_split(cfg)
        model = load_kg_model(_require(cfg.input_path('kg_model', Config.KG_MODEL_FILE)))
        graph = training_graph(split.train, _existing_pseudo_labels(cfg))
        report = link_metrics(cfg, model, graph, split.test)
    else:
        if cfg.paths.screening_scores:
            table = load_screening_scores(_require(cfg.paths.screening_scores))
        else:
            table = screening_table(cfg)
            path = cfg.path(Config.SCREENING_SCORES_FILE)
            table.to_csv(path, sep='\t', header=False, index=False)
            logger.info(f"📄 {path}")
        report = evaluate_screening(screening_targets(table), cfg.eval.fractions, cfg.eval.bedroc_alpha)
        report.seed = cfg.seed

    report.config = {'mode': cfg.eval.mode, 'ks': list(cfg.eval.ks), 'fractions': list(cfg.eval.fractions),
                     'bedroc_alpha': cfg.eval.bedroc_alpha, 'family': cfg.kg.family}
    path = cfg.path(Config.METRICS_FILE)
    report.save(path)
    return {'metrics': path}


# --- ablations -----------------------------------------------------------------

def _run_variants(variants: Dict[str, Callable[[], MetricsReport]], workers: int) -> Dict[str, Any]:
    """Run variant closures (optionally threaded); results keep the variant order"""
    def safe(fn):
        try:
            return fn().values
        except PipelineError as e:
            return {'error': str(e)}
        except Exception as e:
            return {'error': f"{type(e).__name__}: {e}"}

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {name: pool.submit(safe, fn) for name, fn in variants.items()}
            return {name: futures[name].result() for name in variants}
    return {name: safe(fn) for name, fn in variants.items()}


def _pseudo_variants(cfg: RunConfig, embeddings, split: Split) -> Dict[str, Callable]:
    scorer = fit_scorer(cfg, embeddings, split.train).model
    labels: Dict[str, Optional[PseudoLabelSet]] = {NONE: None}

    def pseudo_for(name: str, count: Optional[int] = None) -> PseudoLabelSet:
        run_cfg = dataclasses.replace(cfg, pseudo=strategy_config(cfg.pseudo, name))
        return make_pseudo(run_cfg, scorer, embeddings, count)[0]

    # Labels are built up front, ot_sim first since the random baseline reuses its pair count.
    wanted = [name for name in cfg.ablate.strategies if name != NONE]
    if 'random' in wanted and cfg.pseudo.random_count is None:
        labels[OT_SIM] = pseudo_for(OT_SIM)
    for name in wanted:
        if name not in labels:
            count = len(labels[OT_SIM]) if name == 'random' and OT_SIM in labels else None
            labels[name] = pseudo_for(name, count)

    def run(name: str) -> MetricsReport:
        graph, result = fit_kg(cfg, split.train, labels[name], cfg.ablate.family)
        return link_metrics(cfg, result.model, graph, split.test)

    return {name: functools.partial(run, name) for name in cfg.ablate.strategies}


def _loss_variants(cfg: RunConfig, embeddings, split: Split) -> Dict[str, Callable]:
    def run(loss_kind: str) -> MetricsReport:
        run_cfg = dataclasses.replace(cfg, score=dataclasses.replace(cfg.score, loss_kind=loss_kind))
        scorer = fit_scorer(run_cfg, embeddings, split.train).model
        labels = make_pseudo(run_cfg, scorer, embeddings)[0] if cfg.pseudo.strategy != NONE else None
        graph, result = fit_kg(run_cfg, split.train, labels, cfg.ablate.family)
        return link_metrics(run_cfg, result.model, graph, split.test)

    return {kind: functools.partial(run, kind) for kind in cfg.ablate.loss_kinds}


def _relation_variants(cfg: RunConfig, embeddings, split: Split) -> Dict[str, Callable]:
    scorer = fit_scorer(cfg, embeddings, split.train).model
    labels = make_pseudo(cfg, scorer, embeddings)[0] if cfg.pseudo.strategy != NONE else None
    extras = [name for name, _ in context_relations(cfg.synth.extra_relations)]

    def run(keep: Tuple[str, ...]) -> MetricsReport:
        graph, result = fit_kg(cfg, with_relations(split.train, keep), labels, cfg.ablate.family)
        return link_metrics(cfg, result.model, graph, split.test)

    variants = {INTERACTS: functools.partial(run, (INTERACTS,))}
    for k in range(1, len(extras) + 1):
        variants['+'.join([INTERACTS] + extras[:k])] = functools.partial(run, tuple([INTERACTS] + extras[:k]))
    return variants


VARIANT_BUILDERS = {
    ABLATE_PSEUDO: _pseudo_variants,
    ABLATE_LOSS: _loss_variants,
    ABLATE_RELATIONS: _relation_variants,
}


def summarize_ablation(per_seed: List[Dict[str, Any]]) -> Dict[str, Any]:
    """Mean and standard error per variant and metric across seeds"""
    rows, errors = [], {}
    for entry in per_seed:
        for variant, values in entry['results'].items():
            if 'error' in values:
                errors.setdefault(variant, []).append({'seed': entry['seed'], 'error': values['error']})
            else:
                rows.append({'variant': variant, 'seed': entry['seed'], **values})

    summary = {}
    order = list(dict.fromkeys(v for entry in per_seed for v in entry['results']))
    table = pd.DataFrame(rows)
    for variant in order:
        group = table[table['variant'] == variant].drop(columns=['variant', 'seed']) if rows else pd.DataFrame()
        summary[variant] = {
            'n': int(len(group)),
            'mean': {k: float(v) for k, v in group.mean().items()} if len(group) else {},
            'sem': {k: float(v) for k, v in group.sem(ddof=1).fillna(0.0).items()} if len(group) else {},
            'errors': errors.get(variant, []),
        }
    return summary


@stage('ablate')
def cmd_ablate(cfg: RunConfig) -> Dict[str, str]:
    """Rerun the pipeline per variant over shared synthetic data, one dataset per seed"""
    os.makedirs(cfg.paths.out_dir, exist_ok=True)
    ab = cfg.ablate
    logger.info(f"🎯 Ablation '{ab.kind}' over seeds {list(ab.seeds)} ({ab.family})")

    per_seed = []
    for seed in ab.seeds:
        run_cfg = cfg.with_seed(seed)
        embeddings, kg, _ = synthesize(run_cfg)
        split = make_split(run_cfg, kg)
        variants = VARIANT_BUILDERS[ab.kind](run_cfg, embeddings, split)
        results = _run_variants(variants, ab.workers)
        for name, values in results.items():
            if 'error' in values:
                logger.error(f"❌ seed {seed} / {name}: {values['error']}")
            else:
                logger.info(f"seed {seed} / {name}: " + ", ".join(f"{k}={v:.4f}" for k, v in values.items()))
        per_seed.append({'seed': seed, 'results': results})

    output = {
        'kind': ab.kind,
        'family': ab.family,
        'seeds': list(ab.seeds),
        'summary': summarize_ablation(per_seed),
        'per_seed': per_seed,
    }
    path = cfg.path(Config.ABLATION_FILE)
    _write_json(output, path)
    return {'ablation': path}


COMMANDS = {
    'synth': cmd_synth,
    'score-train': cmd_score_train,
    'pseudo': cmd_pseudo,
    'kg-train': cmd_kg_train,
    'eval': cmd_eval,
    'ablate': cmd_ablate,
}
