import csv
import json
import math
from dataclasses import replace

import numpy as np
import pytest

from hydramix import autodiff as ad
from hydramix import data, losses, training
from hydramix.errors import ArgumentError, ConfigError, NumericalError
from hydramix.losses import JointLossConfig, SceConfig
from hydramix.model import ModelConfig, build, forward
from hydramix.optim import Adam, lr_at
from hydramix.training import Hyperparams, Trainer, evaluate, sweep, train

SMALL = ModelConfig(depth=10, width=1, num_classes=3)


# schedule and optimiser


def test_lr_schedule_endpoints_and_monotone():
    lrs = [lr_at(e, 100) for e in range(100)]
    assert lrs[0] == 1e-3
    assert abs(lrs[-1] - 1e-5) <= 1e-12
    assert all(a > b for a, b in zip(lrs, lrs[1:]))
    assert lr_at(50, 101) == pytest.approx(1e-4, rel=1e-12)
    assert lr_at(0, 1) == 1e-3


def test_adam_matches_scalar_reference():
    beta1, beta2, eps, lr = 0.9, 0.999, 1e-8, 0.05
    with ad.default_dtype(np.float64):
        w = ad.Tensor(np.array([2.0]), requires_grad=True)
        opt = Adam([w], beta1, beta2, eps)
        ref, m, v = 2.0, 0.0, 0.0
        for t in range(1, 101):
            opt.zero_grad()
            ad.backward(ad.sum(ad.square(w - 0.5)))
            opt.step(lr)
            g = 2 * (ref - 0.5)
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            ref -= lr * (m / (1 - beta1**t)) / (math.sqrt(v / (1 - beta2**t)) + eps)
            assert abs(w.data[0] - ref) < 1e-7


def test_adam_skips_params_without_grad():
    w = ad.Tensor(np.ones(3), requires_grad=True)
    opt = Adam([w])
    opt.step(0.1)
    np.testing.assert_array_equal(w.data, np.ones(3))


@pytest.mark.parametrize(
    "field,value", [("epochs", 0), ("batch_size", 1), ("lr_end", 2e-3), ("temperature", 0.0), ("mode", "bogus"), ("rampup_epochs", -1.0)]
)
def test_invalid_hyperparams(field, value):
    with pytest.raises(ConfigError):
        replace(Hyperparams(), **{field: value}).validate()


def test_rampup_weight(tiny_dataset):
    split = data.make_split(tiny_dataset, 12, 0)
    hp = Hyperparams(epochs=1, batch_size=8, rampup_epochs=2.0)
    tr = Trainer(build(SMALL, 0), tiny_dataset, split, hp)
    assert tr.steps_per_epoch() == 6
    assert tr.unlabelled_weight() == 0.0
    tr.global_step = 3
    assert tr.unlabelled_weight() == 0.25
    tr.global_step = 50
    assert tr.unlabelled_weight() == 1.0
    tr.hp = replace(hp, rampup_epochs=0.0)
    tr.global_step = 0
    assert tr.unlabelled_weight() == 1.0


# evaluation


def _stub(fn):
    def predict(images):
        probs = fn(len(images))
        return probs, np.full(len(images), 0.5), np.full(len(images), 0.5)

    return predict


def test_evaluate_constant_stub(tiny_dataset):
    test = tiny_dataset.test_set()
    rec = evaluate(_stub(lambda n: np.tile([1.0, 0.0, 0.0], (n, 1))), test, 3)
    confusion = np.array(rec.confusion)
    assert (confusion[:, 1:] == 0).all() and confusion[:, 0].sum() == len(test)
    assert rec.test_accuracy == pytest.approx(np.mean(test.class_ids == 0))


def test_evaluate_perfect_stub(tiny_dataset):
    test = tiny_dataset.test_set()

    def perfect(images):
        idx = [int(np.flatnonzero((test.images == im).all(axis=(1, 2, 3)))[0]) for im in images]
        return np.eye(3)[test.class_ids[idx]], test.cx[idx], test.cy[idx]

    rec = evaluate(perfect, test, 3, background_index=2, batch_size=7)
    assert rec.test_accuracy == 1.0 and rec.mean_centroid_error == 0.0
    assert np.array_equal(np.array(rec.confusion), np.diag(np.bincount(test.class_ids)))


def test_evaluate_random_stub_is_chance():
    n = 6000
    rng = np.random.default_rng(0)
    test = data.LabelledSet(np.arange(n), np.zeros((n, 1, 1, 3)), np.arange(n) % 3, np.zeros(n), np.zeros(n))
    rec = evaluate(_stub(lambda k: rng.dirichlet(np.ones(3), k)), test, 3)
    assert abs(rec.test_accuracy - 1 / 3) <= 0.05
    assert np.array(rec.confusion).sum() == n
    assert rec.test_accuracy == pytest.approx(np.trace(rec.confusion) / n, abs=1e-9)


def test_centroid_error_skips_background(tiny_dataset):
    test = tiny_dataset.test_set()
    rec = evaluate(_stub(lambda n: np.tile([1.0, 0.0, 0.0], (n, 1))), test, 3, background_index=2)
    fg = test.class_ids != 2
    want = np.hypot(0.5 - test.cx[fg], 0.5 - test.cy[fg]).mean()
    assert rec.mean_centroid_error == pytest.approx(want, abs=1e-12)


def test_evaluate_empty():
    empty = data.LabelledSet(np.arange(0), np.zeros((0, 41, 41, 3)), np.arange(0), np.zeros(0), np.zeros(0))
    with pytest.raises(ArgumentError):
        evaluate(_stub(lambda n: np.zeros((n, 3))), empty)


# training loop


def _labelled_loss(model, lab):
    buffers = {k: v.copy() for k, v in model.buffers.items()}
    with ad.no_grad():
        out = forward(model, lab.images, "train")
    model.buffers.update(buffers)
    targets = losses.Targets(np.eye(3)[lab.class_ids], lab.cx, lab.cy)
    return losses.joint_loss((targets, out), None, JointLossConfig(background_index=2)).total.item()


def test_one_epoch_reduces_loss(tmp_path):
    data.generate(data.DatasetSpec(n_train=64, n_test=12, seed=1), tmp_path)
    ds = data.load(tmp_path)
    split = data.make_split(ds, 32, 0)
    model = build(SMALL, 0)
    lab = data.labelled_set(ds, split)
    before = _labelled_loss(model, lab)
    _, records = train(model, ds, split, Hyperparams(epochs=1, batch_size=8, seed=0))
    assert _labelled_loss(model, lab) < before
    assert len(records) == 1


def test_disable_sce_equals_rho_zero(tiny_dataset):
    split = data.make_split(tiny_dataset, 15, 0)
    ce = SceConfig(1.0, 0.0)
    hp_a = Hyperparams(epochs=1, batch_size=6, seed=2, disable_sce=True)
    hp_b = Hyperparams(epochs=1, batch_size=6, seed=2, joint=JointLossConfig(sce_labelled=ce, sce_unlabelled=ce))
    ta = Trainer(build(SMALL, 0), tiny_dataset, split, hp_a)
    tb = Trainer(build(SMALL, 0), tiny_dataset, split, hp_b)
    batches_a, batches_b = ta.epoch_batches(), tb.epoch_batches()
    for _ in range(5):
        ia, ua = next(batches_a)
        ib, ub = next(batches_b)
        ca, cb = ta.step(1e-3, ia, ua), tb.step(1e-3, ib, ub)
        for key in training.LOSS_KEYS:
            assert abs(ca[key] - cb[key]) <= 1e-6


def test_hydramix_epoch_length_follows_pool(tiny_dataset):
    split = data.make_split(tiny_dataset, 9, 0)
    tr = Trainer(build(SMALL, 0), tiny_dataset, split, Hyperparams(epochs=1, batch_size=8))
    batches = list(tr.epoch_batches())
    assert len(batches) == math.ceil(51 / 8)
    assert all(len(i) == len(u) for i, u in batches)
    pool_rows = np.concatenate([u for _, u in batches])
    assert sorted(pool_rows.tolist()) == list(range(51))


def test_determinism_and_records(tiny_dataset, tmp_path):
    split = data.make_split(tiny_dataset, 15, 4)
    hp = Hyperparams(epochs=2, batch_size=8, seed=4)
    for name in ("a", "b"):
        train(build(SMALL, 4), tiny_dataset, split, hp, tmp_path / name)
    first = (tmp_path / "a/metrics.jsonl").read_bytes()
    assert first == (tmp_path / "b/metrics.jsonl").read_bytes()
    lines = [json.loads(line) for line in first.decode().splitlines()]
    assert [r["epoch"] for r in lines] == [0, 1]
    for r in lines:
        assert set(r["train_loss"]) == set(training.LOSS_KEYS)
        assert np.array(r["confusion"]).sum() == 30
        assert r["test_accuracy"] == pytest.approx(np.trace(r["confusion"]) / 30, abs=1e-9)
    assert lines[0]["lr"] == 1e-3 and lines[1]["lr"] == 1e-5
    assert (tmp_path / "a/ckpt_final.hmxw").exists() and (tmp_path / "a/ckpt_best.hmxw").exists()


@pytest.mark.parametrize("mode", ["supervised", "partial"])
def test_supervised_modes_run(tiny_dataset, mode):
    budget = tiny_dataset.n_train if mode == "supervised" else 12
    split = data.make_split(tiny_dataset, budget, 0)
    _, records = train(build(SMALL, 0), tiny_dataset, split, Hyperparams(epochs=1, batch_size=16, mode=mode))
    assert records[0].train_loss["sce_unlabelled"] == 0.0
    assert records[0].train_loss["reg_unlabelled"] == 0.0


def test_empty_labelled_split(tiny_dataset):
    train_ids = tuple(tiny_dataset.ids[tiny_dataset.indices("train")].tolist())
    plan = data.SplitPlan(0, (), train_ids)
    with pytest.raises(ArgumentError):
        Trainer(build(SMALL, 0), tiny_dataset, plan, Hyperparams(mode="partial"))


def test_hydramix_needs_pool(tiny_dataset):
    plan = data.make_split(tiny_dataset, tiny_dataset.n_train, 0)
    with pytest.raises(ArgumentError):
        Trainer(build(SMALL, 0), tiny_dataset, plan, Hyperparams())


def test_class_count_mismatch(tiny_dataset):
    plan = data.make_split(tiny_dataset, 12, 0)
    with pytest.raises(ConfigError):
        Trainer(build(replace(SMALL, num_classes=4), 0), tiny_dataset, plan, Hyperparams())


def test_non_finite_loss_reports_step(tiny_dataset, monkeypatch):
    plan = data.make_split(tiny_dataset, 12, 0)
    calls = []

    def poisoned(model):
        calls.append(1)
        return ad.Tensor(np.nan if len(calls) == 2 else 0.0)

    monkeypatch.setattr(training, "l2_penalty", poisoned)
    with pytest.raises(NumericalError) as info:
        train(build(SMALL, 0), tiny_dataset, plan, Hyperparams(epochs=1, batch_size=8, mode="partial"))
    assert info.value.step == 1


def test_pool_labels_are_never_read(tiny_dataset):
    """Scrambling the pool's true labels and centroids leaves a hydramix run bit-identical."""
    plan = data.make_split(tiny_dataset, 12, 0)
    hp = Hyperparams(epochs=1, batch_size=8, seed=1)
    _, clean = train(build(SMALL, 1), tiny_dataset, plan, hp)
    pool_rows = np.isin(tiny_dataset.ids, plan.unlabelled_ids)
    scrambled = replace(
        tiny_dataset,
        class_ids=np.where(pool_rows, (tiny_dataset.class_ids + 1) % 3, tiny_dataset.class_ids),
        cx=np.where(pool_rows, 0.0, tiny_dataset.cx),
        cy=np.where(pool_rows, 1.0, tiny_dataset.cy),
    )
    _, dirty = train(build(SMALL, 1), scrambled, plan, hp)
    assert clean[0].to_json() == dirty[0].to_json()


# sweep


def test_sweep_cardinality_and_outputs(tiny_dataset, tmp_path):
    hp = Hyperparams(epochs=1, batch_size=16)
    result = sweep(tiny_dataset, [6, 12], ["partial", "hydramix"], [0, 1], hp, SMALL, tmp_path, workers=1)
    assert len(result.rows) == 2 * 2 * 2 and not result.failed
    with open(tmp_path / "sweep.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == list(training.SWEEP_HEADER)
    assert len(rows) == 8
    summary = json.loads((tmp_path / "sweep_summary.json").read_text())["cells"]
    for cell in summary:
        accs = [float(r["final_accuracy"]) for r in rows if r["mode"] == cell["mode"] and int(r["budget"]) == cell["budget"]]
        assert abs(cell["mean"] - np.mean(accs)) <= 1e-9
        assert cell["n"] == 2
    table = (tmp_path / "sweep_table.txt").read_text()
    assert "Simple CNN" in table and "HydraMix-Net" in table
    assert (tmp_path / "cells/hydramix_b12_s1/metrics.jsonl").exists()


def test_sweep_full_supervised_single_cell(tiny_dataset):
    result = sweep(tiny_dataset, ["full"], ["supervised"], [0], Hyperparams(epochs=1, batch_size=32), SMALL, workers=1)
    assert len(result.rows) == 1 and result.rows[0].budget == tiny_dataset.n_train
    assert len(result.summary) == 1


def test_sweep_records_failing_cell(tiny_dataset, tmp_path):
    result = sweep(tiny_dataset, [6, 1000], ["partial"], [0], Hyperparams(epochs=1, batch_size=16), SMALL, tmp_path, workers=1)
    assert [r.status for r in result.rows][0] == "ok"
    assert result.rows[1].status.startswith("error: ArgumentError")
    assert len(result.failed) == 1
    assert [c["budget"] for c in result.summary] == [6]
    assert "error: ArgumentError" in (tmp_path / "sweep.csv").read_text()


def test_sweep_rejects_unknown_mode(tiny_dataset):
    with pytest.raises(ConfigError):
        sweep(tiny_dataset, [6], ["bogus"], [0], Hyperparams(epochs=1))


def test_nosce_cell_uses_ce():
    hp = training.cell_hyperparams(Hyperparams(), "hydramix_nosce", 3)
    assert hp.mode == "hydramix" and hp.disable_sce and hp.seed == 3
    cfg = hp.loss_config(2)
    assert cfg.sce_labelled.rho == 0 and cfg.sce_unlabelled.rho == 0
    assert cfg.sce_labelled.delta == 1 and cfg.sce_unlabelled.delta == 1


def test_render_table_layout():
    summary = [
        {"mode": "hydramix", "budget": 50, "n": 3, "mean": 0.8, "std": 0.01},
        {"mode": "partial", "budget": 50, "n": 3, "mean": 0.7, "std": 0.02},
        {"mode": "partial", "budget": 100, "n": 3, "mean": 0.75, "std": 0.0},
    ]
    lines = training.render_table(summary).splitlines()
    assert lines[0].split("|")[1:] == [f"{50:>13} ", f"{100:>13}"] or "50" in lines[0]
    assert lines[2].startswith("Simple CNN") and "0.700±0.020" in lines[2]
    assert lines[3].startswith("HydraMix-Net") and lines[3].rstrip().endswith("--")


def test_worker_count(monkeypatch):
    monkeypatch.delenv("HMX_THREADS", raising=False)
    assert training.worker_count() == 1
    monkeypatch.setenv("HMX_THREADS", "3")
    assert training.worker_count() == 3
    monkeypatch.setenv("HMX_THREADS", "many")
    with pytest.raises(ConfigError):
        training.worker_count()


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_full_budget_supervised_learns(protocol_dataset, seed):
    hp = Hyperparams(epochs=30, mode="supervised", seed=seed)
    split = data.make_split(protocol_dataset, protocol_dataset.n_train, seed)
    _, records = train(build(ModelConfig(), seed), protocol_dataset, split, hp)
    print(f"seed {seed}: final accuracy {records[-1].test_accuracy:.4f}")
    assert records[-1].test_accuracy >= 0.95
