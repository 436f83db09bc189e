import json
import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

import orchestrator
from src.config import ABLATE_LOSS, SCREENING, Config, load_run_config, parse_run_config, stage_seed
from src.errors import ConfigError, FormatError, StageError
from src.metrics import load_metrics_report
from src.kg_store import load_triples
from src.pipeline import (_run_variants, cmd_ablate, cmd_eval, cmd_kg_train, cmd_pseudo, cmd_score_train,
                          cmd_synth, ensure_split, load_screening_scores, screening_targets, summarize_ablation)
from src.pseudo_labeler import load_pseudo_labels

TINY = Path(__file__).parent / "configs" / "tiny.toml"
STAGES = ["synth", "score-train", "pseudo", "kg-train", "eval"]


def tiny_data():
    with open(TINY, "rb") as f:
        return tomllib.load(f)


def tiny_config(out_dir, **sections):
    data = tiny_data()
    for name, values in sections.items():
        data.setdefault(name, {}).update(values)
    return parse_run_config(data, out_dir=str(out_dir))


def run_cli(out_dir, stages=STAGES, *extra):
    for name in stages:
        code = orchestrator.main([name, "--config", str(TINY), "--out", str(out_dir), "--quiet", *extra])
        assert code == 0, name


def test_tiny_pipeline_end_to_end(tmp_path):
    run_cli(tmp_path)
    for name in (Config.EMBEDDINGS_FILE, Config.TRIPLES_FILE, Config.HIDDEN_PAIRS_FILE, Config.TRAIN_TRIPLES_FILE,
                 Config.TEST_TRIPLES_FILE, Config.SCORE_MODEL_FILE, Config.SCORE_TRACE_FILE,
                 Config.PSEUDO_LABELS_FILE, Config.PSEUDO_SUMMARY_FILE, Config.KG_MODEL_FILE,
                 Config.KG_TRACE_FILE, Config.METRICS_FILE):
        assert (tmp_path / name).exists(), name

    report = load_metrics_report(str(tmp_path / Config.METRICS_FILE))
    assert set(report.values) == {"hits@1", "hits@3", "hits@5", "mrr", "mean_rank"}
    assert all(0.0 <= report[name] <= 1.0 for name in ("hits@1", "hits@3", "hits@5", "mrr"))
    assert report["mean_rank"] >= 1.0
    assert report.seed == 7

    trace = json.loads((tmp_path / Config.SCORE_TRACE_FILE).read_text())
    assert trace["loss_kind"] == "ot_kl"
    assert [row["epoch"] for row in trace["trace"]][:1] == [0]

    summary = json.loads((tmp_path / Config.PSEUDO_SUMMARY_FILE).read_text())
    assert summary["strategy"] == "ot_sim"
    assert summary["pair_count"] == len(load_pseudo_labels(str(tmp_path / Config.PSEUDO_LABELS_FILE)))


def test_tiny_pipeline_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run_cli(a, STAGES[:3])
    run_cli(b, STAGES[:3])
    for name in (Config.EMBEDDINGS_FILE, Config.TRIPLES_FILE, Config.TRAIN_TRIPLES_FILE,
                 Config.TEST_TRIPLES_FILE, Config.PSEUDO_LABELS_FILE):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_seed_override_changes_data(tmp_path):
    run_cli(tmp_path / "a", ["synth"])
    run_cli(tmp_path / "b", ["synth"], "--seed", "8")
    assert (tmp_path / "a" / Config.EMBEDDINGS_FILE).read_bytes() != \
        (tmp_path / "b" / Config.EMBEDDINGS_FILE).read_bytes()


def test_rerunning_synth_regenerates_the_split(tmp_path):
    cfg = tiny_config(tmp_path / "a")
    cmd_synth(cfg)
    cmd_score_train(cfg)
    reseeded = cfg.with_seed(8)
    cmd_synth(reseeded)
    for name in (Config.TRAIN_TRIPLES_FILE, Config.TEST_TRIPLES_FILE, Config.SCORE_MODEL_FILE):
        assert not (tmp_path / "a" / name).exists(), name

    split = ensure_split(reseeded)
    triples = set(load_triples(str(tmp_path / "a" / Config.TRIPLES_FILE)).triples)
    assert set(split.train.triples) | set(split.test) == triples
    assert not set(split.train.triples) & set(split.test)

    fresh = tiny_config(tmp_path / "b").with_seed(8)
    cmd_synth(fresh)
    ensure_split(fresh)
    for name in (Config.TRAIN_TRIPLES_FILE, Config.TEST_TRIPLES_FILE):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_stage_seeds_are_independent():
    assert stage_seed(0, "synth") == stage_seed(0, "synth")
    assert stage_seed(0, "synth") != stage_seed(0, "split")
    assert stage_seed(0, "synth") != stage_seed(1, "synth")


def test_missing_seed_is_rejected():
    data = tiny_data()
    del data["seed"]
    with pytest.raises(ConfigError) as err:
        parse_run_config(data)
    assert err.value.key == "seed"
    assert parse_run_config(data, seed=3).seed == 3


@pytest.mark.parametrize("data, key", [
    ({"seed": 1, "score": {"bogus": 1}}, "score.bogus"),
    ({"seed": 1, "extra": {}}, "extra"),
    ({"seed": 1, "synth": {"seed": 4}}, "synth.seed"),
    ({"seed": 1, "kg": {"epochs": "ten"}}, "kg.epochs"),
    ({"seed": 1, "eval": {"ks": 5}}, "eval.ks"),
])
def test_config_errors_name_the_key(data, key):
    with pytest.raises(ConfigError) as err:
        parse_run_config(data)
    assert err.value.key == key
    assert key in str(err.value)


def test_config_section_validation_is_wrapped():
    with pytest.raises(ConfigError) as err:
        parse_run_config({"seed": 1, "eval": {"mode": "bogus"}})
    assert err.value.key == "eval"


def test_lambda_key_maps_to_field():
    cfg = parse_run_config({"seed": 1, "pseudo": {"lambda": 0.25}})
    assert cfg.pseudo.lambda_ == 0.25


def test_toml_files_load():
    cfg = load_run_config(str(TINY), out_dir="elsewhere")
    assert cfg.seed == 7 and cfg.paths.out_dir == "elsewhere"
    assert cfg.synth.seed == stage_seed(7, "synth")
    assert load_run_config(str(Path(__file__).parent / "configs" / "desk.toml")).kg.family == "toruse"


def test_missing_config_file_exits_with_one(tmp_path):
    assert orchestrator.main(["synth", "--config", str(tmp_path / "nope.toml"), "--quiet"]) == 1


def test_missing_input_exits_with_one(tmp_path):
    code = orchestrator.main(["pseudo", "--config", str(TINY), "--out", str(tmp_path), "--quiet"])
    assert code == 1


def test_stage_errors_carry_the_stage_name(tmp_path):
    with pytest.raises(StageError) as err:
        cmd_pseudo(tiny_config(tmp_path))
    assert err.value.stage == "pseudo"
    assert isinstance(err.value.cause, FileNotFoundError)


def test_kg_train_without_pseudo_labels(tmp_path):
    cfg = tiny_config(tmp_path)
    cmd_synth(cfg)
    files = cmd_kg_train(cfg)
    assert Path(files["kg_model"]).exists()
    assert "hits@1" in load_metrics_report(cmd_eval(cfg)["metrics"]).values


def test_explicit_pseudo_label_path_must_exist(tmp_path):
    cfg = tiny_config(tmp_path, paths={"pseudo_labels": str(tmp_path / "missing.tsv")})
    cmd_synth(cfg)
    with pytest.raises(StageError):
        cmd_kg_train(cfg)


def test_screening_mode(tmp_path):
    cfg = tiny_config(tmp_path, eval={"mode": SCREENING, "fractions": [0.1, 0.5], "bedroc_alpha": 20.0})
    cmd_synth(cfg)
    cmd_score_train(cfg)
    report = load_metrics_report(cmd_eval(cfg)["metrics"])
    assert {"auroc", "bedroc@20", "ef@0.1", "ef@0.5"} <= set(report.values)
    assert 0.0 <= report["auroc"] <= 1.0

    table = pd.read_csv(tmp_path / Config.SCREENING_SCORES_FILE, sep="\t", header=None)
    assert set(table[3]) <= {0, 1}


def test_screening_scores_file(tmp_path):
    path = tmp_path / "scores.tsv"
    path.write_text("# target\titem\tscore\tlabel\n"
                    "t1\ta\t0.9\t1\nt1\tb\t0.1\t0\n"
                    "t2\ta\t0.5\t1\nt2\tb\t0.4\t1\n", encoding="utf-8")
    table = load_screening_scores(str(path))
    targets = screening_targets(table)
    assert [d.target for d in targets] == ["t1"]

    bad = tmp_path / "bad.tsv"
    bad.write_text("t1\ta\t0.9\t2\n", encoding="utf-8")
    with pytest.raises(FormatError):
        load_screening_scores(str(bad))


def test_summarize_ablation():
    per_seed = [
        {"seed": 0, "results": {"none": {"hits@1": 0.2}, "ot_sim": {"error": "boom"}}},
        {"seed": 1, "results": {"none": {"hits@1": 0.4}, "ot_sim": {"hits@1": 0.5}}},
    ]
    summary = summarize_ablation(per_seed)
    assert list(summary) == ["none", "ot_sim"]
    assert summary["none"]["n"] == 2
    assert math.isclose(summary["none"]["mean"]["hits@1"], 0.3)
    assert math.isclose(summary["none"]["sem"]["hits@1"], 0.1)
    assert summary["ot_sim"]["n"] == 1 and summary["ot_sim"]["sem"]["hits@1"] == 0.0
    assert summary["ot_sim"]["errors"] == [{"seed": 0, "error": "boom"}]


@pytest.mark.parametrize("workers", [1, 2])
def test_run_variants_isolates_failures(workers):
    class Report:
        values = {"mrr": 1.0}

    def fail():
        raise FormatError("bad model")

    results = _run_variants({"ok": Report, "bad": fail}, workers)
    assert list(results) == ["ok", "bad"]
    assert results["ok"] == {"mrr": 1.0}
    assert "bad model" in results["bad"]["error"]


@pytest.mark.slow
def test_pseudo_ablation_writes_summary(tmp_path):
    cfg = tiny_config(tmp_path)
    output = json.loads(Path(cmd_ablate(cfg)["ablation"]).read_text())
    assert output["seeds"] == [0, 1]
    assert list(output["summary"]) == ["none", "random", "topk", "ot_plain", "ot_sim"]
    for row in output["summary"].values():
        assert row["n"] == 2 and not row["errors"]


@pytest.mark.slow
def test_loss_ablation_runs_both_losses(tmp_path):
    cfg = tiny_config(tmp_path, ablate={"kind": ABLATE_LOSS, "seeds": [0]})
    output = json.loads(Path(cmd_ablate(cfg)["ablation"]).read_text())
    assert list(output["summary"]) == ["ot_kl", "infonce"]


DESK = {"synth": {"n_mols": 120, "n_prots": 60, "dim": 16, "n_clusters": 4}, "split": {"n_test": 40},
        "score": {"max_epochs": 20}, "pseudo": {"outer_max_iter": 5}}


@pytest.mark.slow
def test_pseudo_label_strategies_keep_their_ordering(tmp_path):
    """Desk-scale ordering: ot_sim >= ot_plain >= topk >= random on mean Hits@5, one adjacent inversion within 1 SEM"""
    cfg = tiny_config(tmp_path, **DESK, kg={"epochs": 40, "dim": 32},
                      ablate={"strategies": ["random", "topk", "ot_plain", "ot_sim"], "seeds": [0, 1, 2, 3, 4],
                              "family": "toruse"})
    summary = json.loads(Path(cmd_ablate(cfg)["ablation"]).read_text())["summary"]
    order = ["ot_sim", "ot_plain", "topk", "random"]
    assert all(summary[name]["n"] == 5 for name in order)
    mean = {name: summary[name]["mean"]["hits@5"] for name in order}
    sem = {name: summary[name]["sem"]["hits@5"] for name in order}
    inversions = [(a, b) for a, b in zip(order, order[1:]) if mean[a] < mean[b]]
    assert len(inversions) <= 1, mean
    for a, b in inversions:
        assert mean[b] - mean[a] <= max(sem[a], sem[b]), mean


@pytest.mark.slow
@pytest.mark.parametrize("family", ["toruse", "rotate"])
def test_ot_sim_pseudo_labels_help_link_prediction(tmp_path, family):
    """Desk-scale direction: ot_sim pseudo-edges at alpha 0.1 beat training without them on mean Hits@5"""
    gains = []
    for seed in range(5):
        hits = {}
        for alpha in (0.0, 0.1):
            out = tmp_path / f"s{seed}a{alpha}"
            cfg = tiny_config(out, **DESK, kg={"family": family, "alpha": alpha, "epochs": 40, "dim": 32})
            cfg = cfg.with_seed(seed)
            cmd_synth(cfg)
            cmd_score_train(cfg)
            cmd_pseudo(cfg)
            cmd_kg_train(cfg)
            hits[alpha] = load_metrics_report(cmd_eval(cfg)["metrics"])["hits@5"]
        gains.append(hits[0.1] - hits[0.0])
    assert np.mean(gains) > 0.0, gains
