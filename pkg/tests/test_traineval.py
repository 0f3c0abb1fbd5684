import json
from dataclasses import replace

import numpy as np
import pytest

from g2p.errors import DataError, NumericError
from g2p.ingest import Dataset, PhenotypeTable
from g2p.model import ModelConfig
from g2p.selection import GbdtConfig
from g2p.traineval import (
    CVConfig, MetricReport, SelectionConfig, TrainSchedule, canonical_order, cross_validate, evaluate,
    fit_fold_scalers, pearson, plan_for, prepare, rmse, train,
)

SMALL = ModelConfig(n_snps=8, filters=4, weather_conv=(4, 4), soil_hidden=(4,), mgmt_hidden=(4,),
                    fusion_hidden=(8,), dropout=0.1)
CV = CVConfig(model=SMALL, schedule=TrainSchedule(batch_size=32, max_epochs=3, patience=2, lr=3e-3),
              selection=SelectionConfig(rfe_target=16, top_k=8, gbdt=GbdtConfig(n_trees=10)), seed=5)


def test_evaluate_affine_invariance(rng):
    truth = rng.normal(size=50)
    pred = truth + rng.normal(size=50)
    r = pearson(pred, truth)
    assert pearson(3.0 * pred + 7.0, truth) == pytest.approx(r, abs=1e-12)
    assert pearson(-pred, truth) == pytest.approx(-r, abs=1e-12)
    assert pearson(np.ones(50), truth) is None
    m = evaluate(pred, truth)
    assert m["rmse"] == pytest.approx(np.sqrt(np.mean((pred - truth) ** 2)))
    assert rmse(truth, truth) == 0.0
    with pytest.raises(DataError):
        evaluate(pred[:3], truth)
    with pytest.raises(DataError):
        evaluate(pred[:1], truth[:1])


def test_scalers_see_only_training_rows(small_synth):
    ds, _ = small_synth
    plan = plan_for(ds, "environment", seed=1)
    parts = plan.assign(ds.phenotypes.env_ids, ds.phenotypes.hybrid_ids, 0)
    sc = fit_fold_scalers(ds, parts["train"], "f0")
    yields = ds.phenotypes.yields[parts["train"]]
    assert sc.target.mean[0] == pytest.approx(yields.mean()) and sc.target.std[0] == pytest.approx(yields.std())
    # changing held-out yields must not move any fitted statistic
    poisoned = ds.phenotypes.yields.copy()
    poisoned[parts["test"]] += 1e6
    poisoned[parts["val"]] -= 1e6
    ds2 = replace(ds, phenotypes=PhenotypeTable(ds.phenotypes.env_ids, ds.phenotypes.hybrid_ids, poisoned))
    assert fit_fold_scalers(ds2, parts["train"], "f0").to_dict() == sc.to_dict()


def test_train_reduces_loss_and_keeps_best(small_synth):
    ds, _ = small_synth
    plan = plan_for(ds, "environment", seed=1)
    parts = plan.assign(ds.phenotypes.env_ids, ds.phenotypes.hybrid_ids, 0)
    cfg = replace(SMALL, n_snps=24, dropout=0.0)
    data = prepare(ds, [s.id for s in ds.genotypes.snps], parts["train"], "f0", cfg)
    res = train(cfg, data, parts["train"], parts["val"], 0, TrainSchedule(batch_size=32, max_epochs=8, lr=3e-3))
    losses = [h["train_loss"] for h in res.history]
    assert losses[-1] < losses[0]
    vals = [h["val_rmse"] for h in res.history]
    assert res.best_val_rmse == min(vals) and res.best_epoch == int(np.argmin(vals))


def test_early_stopping_patience(small_synth):
    ds, _ = small_synth
    plan = plan_for(ds, "environment", seed=1)
    parts = plan.assign(ds.phenotypes.env_ids, ds.phenotypes.hybrid_ids, 0)
    cfg = replace(SMALL, n_snps=24)
    data = prepare(ds, [s.id for s in ds.genotypes.snps], parts["train"], "f0", cfg)
    for patience in (1, 3):
        res = train(cfg, data, parts["train"], parts["val"], 0,
                    TrainSchedule(max_epochs=40, patience=patience, lr=3e-2))
        # training stops exactly `patience` epochs after the last improvement
        assert len(res.history) == res.best_epoch + patience + 1 < 40
        vals = [h["val_rmse"] for h in res.history]
        assert min(vals[res.best_epoch + 1:]) >= res.best_val_rmse


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_divergence_reports_epoch(small_synth):
    ds, _ = small_synth
    plan = plan_for(ds, "environment", seed=1)
    parts = plan.assign(ds.phenotypes.env_ids, ds.phenotypes.hybrid_ids, 0)
    cfg = replace(SMALL, n_snps=24)
    data = prepare(ds, [s.id for s in ds.genotypes.snps], parts["train"], "f0", cfg)
    with pytest.raises(NumericError, match="epoch"):
        train(cfg, data, parts["train"], parts["val"], 0, TrainSchedule(max_epochs=30, lr=1e150))


def test_cross_validate_deterministic_and_order_free(small_synth):
    ds, _ = small_synth
    plan = plan_for(ds, "environment", seed=3)
    assert plan.n_folds == 10
    first = cross_validate(ds, plan, CV, folds=[0, 4])
    second = cross_validate(ds, plan, CV, folds=[0, 4])
    assert first.to_json() == second.to_json()
    perm = np.random.default_rng(0).permutation(len(ds.phenotypes))
    ph = ds.phenotypes
    shuffled = replace(ds, phenotypes=PhenotypeTable(ph.env_ids[perm], ph.hybrid_ids[perm], ph.yields[perm]))
    again = cross_validate(shuffled, plan_for(shuffled, "environment", seed=3), CV, folds=[0, 4])
    assert again.to_json() == first.to_json()
    fold = first.folds[0]
    assert fold.fit_set_id == "environment/fold00/train" and len(fold.selected) == 8
    assert fold.n_train + fold.n_val + fold.n_test == len(ds.phenotypes)


def test_canonical_order(small_synth):
    ds, _ = small_synth
    rows = np.arange(len(ds.phenotypes))[::-1]
    out = canonical_order(ds, rows)
    keys = [(ds.phenotypes.env_ids[i], ds.phenotypes.hybrid_ids[i]) for i in out]
    assert keys == sorted(keys)


def test_no_g_variant_runs(small_synth):
    ds, _ = small_synth
    plan = plan_for(ds, "hybrid", seed=3, folds=4, k=8)
    cfg = replace(CV, model=SMALL.with_variant("no_g"))
    report = cross_validate(ds, plan, cfg, folds=[1])
    assert report.variant == "no_g" and report.folds[0].selected == []


def test_metric_report_io(tmp_path):
    from g2p.traineval import FoldResult
    folds = [FoldResult(i, 0.1 * i if i else None, 1.0 + i, 2.0, 3, 10, 5, 5, ["a"], f"x{i}",
                        [{"epoch": 0, "train_loss": 1.5, "val_rmse": 2.0}]) for i in range(3)]
    report = MetricReport("environment", "full", 7, folds)
    s = report.summary()
    assert s["rmse"]["mean"] == pytest.approx(2.0) and s["rmse"]["std"] == pytest.approx(1.0)
    assert s["pearson"]["mean"] == pytest.approx(0.15)
    assert MetricReport.from_dict(json.loads(report.to_json())) == report
    paths = report.write(tmp_path)
    lines = paths["tsv"].read_text().splitlines()
    assert lines[0] == "fold\tsplit_mode\tvariant\tpearson\trmse"
    assert lines[1].split("\t")[3] == "NA"
    assert (tmp_path / "metrics_history" / "history_fold02.csv").exists()
