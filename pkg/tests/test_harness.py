import json

import numpy as np
import pytest

from mialab import attack as attack_mod
from mialab import harness
from mialab.data import load_csv, save_csv
from mialab.defense import Dropout
from mialab.errors import ContractError, ExperimentError
from mialab.harness import (
    ExperimentConfig,
    Summary,
    emit_report,
    load_dataset,
    parse_csv_report,
    render_csv,
    render_json,
    render_markdown,
    run_comparison,
    run_experiment,
)

SMALL = {
    "dataset": {"kind": "blobs", "num_classes": 3, "points_per_class": 40, "dimension": 5, "separation": 2.0},
    "split": {"target_train": 20, "target_test": 20, "shadow_train": 20, "shadow_test": 20,
              "eval_members": 10, "eval_nonmembers": 10},
    "hidden_sizes": [8],
    "epochs": 3,
    "batch_size": 8,
    "repeats": 2,
    "label_only": {"num_perturbations": 5},
}


def small(**overrides) -> ExperimentConfig:
    return ExperimentConfig.from_dict({**SMALL, **overrides})


def test_experiment_is_deterministic():
    a = render_csv(run_experiment(small(seed=3)))
    b = render_csv(run_experiment(small(seed=3)))
    assert a == b
    assert render_csv(run_experiment(small(seed=4))) != a


def test_repeats_are_independent_of_repeat_count():
    one = run_experiment(small(repeats=1))
    two = run_experiment(small(repeats=2))
    assert one.repeats[0].to_dict() == two.repeats[0].to_dict()


def test_classification_only_report():
    rep = run_experiment(small(attacks=[]))
    header = render_csv(rep).splitlines()[0].split(",")
    assert header == ["defense", "repeats", "classification_accuracy_mean", "classification_accuracy_std"]
    assert rep.repeats[0].attacks == {}


def test_attack_sets_never_leak(monkeypatch):
    seen = []
    real_collect, real_scores = attack_mod.collect_confidences, attack_mod.consistency_scores

    def spy_collect(model, dataset, indices):
        seen.append(("conf", model, np.asarray(indices).copy()))
        return real_collect(model, dataset, indices)

    def spy_scores(model, features, labels, config, rng, **kw):
        seen.append(("p", model, np.asarray(features).copy()))
        return real_scores(model, features, labels, config, rng, **kw)

    monkeypatch.setattr(harness, "collect_confidences", spy_collect)
    monkeypatch.setattr(harness, "consistency_scores", spy_scores)
    cfg = small(repeats=1)
    ds = load_dataset(cfg.dataset)
    target, plan = harness.train_target(cfg, ds)
    shadow = harness.train_shadow(cfg, ds, plan)
    harness.run_attacks(target, shadow, ds, plan, cfg, harness.attack_seed(cfg))

    shadow_ok = set(plan.shadow_train) | set(plan.shadow_test)
    eval_ok = set(plan.attack_eval_members) | set(plan.attack_eval_nonmembers)
    rows_by_key = {ds.features[i].tobytes(): i for i in range(len(ds))}
    for kind, model, payload in seen:
        idx = set(payload.tolist()) if kind == "conf" else {rows_by_key[r.tobytes()] for r in payload}
        if model is shadow:
            assert idx <= shadow_ok
        else:
            assert model is target and idx <= eval_ok
    assert {m is shadow for _, m, _ in seen} == {True, False}


def test_csv_round_trip_at_four_decimals():
    rep = run_experiment(small())
    rows = parse_csv_report(render_csv(rep))
    assert len(rows) == 1
    row = rows[0]
    assert row["defense"] == "none" and row["repeats"] == "2"
    assert float(row["classification_accuracy_mean"]) == pytest.approx(rep.classification.mean, abs=5e-5)
    for a in ("A1", "A2", "A3"):
        assert float(row[f"{a}_accuracy_mean"]) == pytest.approx(rep.attack(a).mean, abs=5e-5)
        assert len(row[f"{a}_accuracy_std"].split(".")[1]) == 4


def test_json_report_has_every_repeat():
    obj = json.loads(render_json(run_experiment(small(repeats=3))))
    assert len(obj["per_repeat"]) == 3
    assert set(obj["attack_accuracy"]) == {"A1", "A2", "A3"}
    assert obj["config"]["defense"] == {"name": "none"}


def test_single_repeat_has_no_std():
    rep = run_experiment(small(repeats=1))
    assert rep.classification.std is None
    row = parse_csv_report(render_csv(rep))[0]
    assert row["classification_accuracy_std"] == ""
    assert "±" not in render_markdown(rep)


def test_summary_uses_sample_std():
    s = Summary.of([0.5, 0.7])
    assert s.mean == pytest.approx(0.6) and s.std == pytest.approx(np.std([0.5, 0.7], ddof=1))


def test_config_rejects_unknown_keys():
    with pytest.raises(ContractError, match="unknown keys"):
        ExperimentConfig.from_dict({"epoch": 3})
    with pytest.raises(ContractError, match="unknown keys in split"):
        ExperimentConfig.from_dict({"split": {"train": 3}})
    with pytest.raises(ContractError, match="unknown keys in dataset"):
        ExperimentConfig.from_dict({"dataset": {"kind": "blobs", "dims": 3}})
    with pytest.raises(ContractError):
        ExperimentConfig.from_dict({"attacks": ["A4"]})


def test_config_round_trip_and_epoch_defaults():
    cfg = small(defense={"name": "adamixup", "lambda_min": 0.2})
    assert ExperimentConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()
    assert ExperimentConfig().epochs == 100
    mnist = ExperimentConfig(dataset={"kind": "mnist", "images": "i", "labels": "l"})
    assert mnist.epochs == 50


def test_config_from_json_errors(tmp_path):
    bad = tmp_path / "c.json"
    bad.write_text("{not json")
    with pytest.raises(ContractError, match="invalid JSON"):
        ExperimentConfig.from_json(bad)
    with pytest.raises(OSError):
        ExperimentConfig.from_json(tmp_path / "missing.json")


def test_comparison_keeps_order_and_layout():
    cfgs = [small(defense=d, repeats=1) for d in ("none", "dropout", "adamixup")]
    table = run_comparison(cfgs)
    rows = parse_csv_report(render_csv(table))
    assert [r["defense"] for r in rows] == [
        "none", "dropout(rate=0.5)", "adamixup(lambda_initial=1.0,lambda_min=0.1)"]
    md = render_markdown(table).splitlines()
    assert md[0] == "| Metric | none | dropout(rate=0.5) | adamixup(lambda_initial=1.0,lambda_min=0.1) |"
    assert md[2].startswith("| Classification accuracy |")
    assert [line.split("|")[1].strip() for line in md[3:]] == [
        "A1 attack accuracy", "A2 attack accuracy", "A3 attack accuracy"]


def test_single_defense_comparison_is_one_row():
    table = run_comparison([small(repeats=1)])
    assert len(parse_csv_report(render_csv(table))) == 1


def test_comparison_rejects_mixed_datasets():
    other = dict(SMALL["dataset"], seed=1)
    with pytest.raises(ContractError, match="same dataset"):
        run_comparison([small(), small(dataset=other)])


def test_shadow_defense_switch():
    cfg = small(defense="dropout", shadow_defense="none", repeats=1)
    ds = load_dataset(cfg.dataset)
    _, plan = harness.train_target(cfg, ds)
    assert harness.train_shadow(cfg, ds, plan).dropout_rate == 0.0
    cfg_same = small(defense="dropout", repeats=1)
    assert harness.train_shadow(cfg_same, ds, plan).dropout_rate == Dropout().rate


def test_oversized_split_reports_stage():
    cfg = small(split={**SMALL["split"], "target_train": 500})
    with pytest.raises(ExperimentError, match=r"repeat 0, stage split"):
        run_experiment(cfg)


def test_emit_report_destinations(tmp_path, capsys):
    rep = run_experiment(small(repeats=1, attacks=[]))
    text = emit_report(rep, "csv", tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text() == text
    emit_report(rep, "md", "-")
    assert capsys.readouterr().out.startswith("| Metric | none |")
    with pytest.raises(OSError, match="cannot write report"):
        emit_report(rep, "csv", tmp_path / "no" / "such" / "dir.csv")
    with pytest.raises(ContractError):
        emit_report(rep, "xml")


def test_defended_run_produces_valid_rates():
    rep = run_experiment(small(defense="adamixup", repeats=1))
    assert rep.defense_name.startswith("adamixup(")
    assert 0 <= rep.classification.mean <= 1
    for a in ("A1", "A2", "A3"):
        assert 0 <= rep.attack(a).mean <= 1


def test_csv_dataset_source_matches_in_memory_dataset(tmp_path):
    ds = load_dataset(SMALL["dataset"])
    save_csv(ds, tmp_path / "d.csv")
    from_file = run_experiment(small(dataset={"kind": "csv", "path": str(tmp_path / "d.csv")}, repeats=1))
    in_memory = run_experiment(small(repeats=1), dataset=load_csv(tmp_path / "d.csv"))
    assert render_csv(from_file) == render_csv(in_memory)
