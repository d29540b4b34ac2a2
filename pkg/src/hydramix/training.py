"""Training loop for the three regimes, evaluation, and the labelled-budget sweep."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from . import losses, ssl
from .errors import ArgumentError, ConfigError, HydraMixError, NumericalError
from .losses import JointLossConfig, SceConfig, Targets
from .model import ModelConfig, ModelOutput, build, forward, l2_penalty, predict, save_model
from .optim import Adam, lr_at

log = logging.getLogger(__name__)

MODES = ("supervised", "partial", "hydramix")
SWEEP_MODES = MODES + ("hydramix_nosce",)
LOSS_KEYS = ("total", "sce_labelled", "sce_unlabelled", "reg_labelled", "reg_unlabelled")


@dataclass
class Hyperparams:
    epochs: int = 100
    batch_size: int = 32
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    k_augment: int = 2
    temperature: float = 0.5
    mixup_alpha: float = 0.75
    mixup_beta: float = 0.75
    joint: JointLossConfig = field(default_factory=JointLossConfig)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    mode: str = "hydramix"
    disable_sce: bool = False
    # the unlabelled loss weight rises linearly from 0 to 1 over this many epochs
    rampup_epochs: float = 2.0
    eval_batch_size: int = 200

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}", "epochs")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}", "batch_size")
        if not self.lr_start >= self.lr_end > 0:
            raise ConfigError(f"need lr_start >= lr_end > 0, got {self.lr_start}, {self.lr_end}", "lr_start")
        if self.k_augment < 1:
            raise ConfigError(f"k_augment must be >= 1, got {self.k_augment}", "k_augment")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}", "temperature")
        if self.mixup_alpha <= 0 or self.mixup_beta <= 0:
            raise ConfigError("mixup alpha and beta must be positive", "mixup_alpha")
        if self.rampup_epochs < 0:
            raise ConfigError(f"rampup_epochs must be >= 0, got {self.rampup_epochs}", "rampup_epochs")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}", "mode")
        self.joint.validate()
        return self

    def loss_config(self, background_index):
        joint = replace(self.joint, background_index=background_index)
        if self.disable_sce:
            ce = SceConfig(1.0, 0.0, self.joint.sce_labelled.log_zero_clamp)
            joint = replace(joint, sce_labelled=ce, sce_unlabelled=replace(ce, log_zero_clamp=self.joint.sce_unlabelled.log_zero_clamp))
        return joint


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: dict
    test_accuracy: float
    confusion: list
    mean_centroid_error: float | None
    lr: float | None = None

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def _predictor(model):
    if callable(model) and not hasattr(model, "params"):
        return model
    return lambda images: predict(model, images)


def evaluate(model, test_set, num_classes=None, background_index=None, batch_size=200):
    """Accuracy, confusion (rows = truth), and mean centroid error over non-background truth."""
    if len(test_set) == 0:
        raise ArgumentError("test set is empty")
    fn = _predictor(model)
    probs, cx, cy = [], [], []
    for start in range(0, len(test_set), batch_size):
        p, x, y = fn(test_set.images[start:start + batch_size])
        probs.append(np.asarray(p))
        cx.append(np.asarray(x))
        cy.append(np.asarray(y))
    probs, cx, cy = np.concatenate(probs), np.concatenate(cx), np.concatenate(cy)
    c = num_classes or probs.shape[1]
    pred = probs.argmax(axis=1)
    truth = np.asarray(test_set.class_ids)
    confusion = np.zeros((c, c), dtype=np.int64)
    np.add.at(confusion, (truth, pred), 1)
    fg = truth != background_index if background_index is not None else np.ones(len(truth), bool)
    err = None
    if fg.any():
        dist = np.hypot(cx[fg].astype(np.float64) - test_set.cx[fg], cy[fg].astype(np.float64) - test_set.cy[fg])
        err = float(dist.mean())
    accuracy = float(np.trace(confusion) / confusion.sum())
    return MetricsRecord(epoch=-1, train_loss={}, test_accuracy=accuracy, confusion=confusion.tolist(), mean_centroid_error=err)


def _one_hot(class_ids, c):
    out = np.zeros((len(class_ids), c))
    out[np.arange(len(class_ids)), class_ids] = 1.0
    return out


def _labelled_cycle(n, rng):
    while True:
        yield from rng.permutation(n)


def _take(it, count):
    return np.fromiter((next(it) for _ in range(count)), dtype=np.int64, count=count)


def _split_output(out, n):
    first = ModelOutput(out.class_probs[:n], out.cx[:n], out.cy[:n])
    rest = ModelOutput(out.class_probs[n:], out.cx[n:], out.cy[n:])
    return first, rest


class Trainer:
    """Owns the optimizer and RNG stream for one run; ``step`` performs one parameter update."""

    def __init__(self, model, dataset, split, hp):
        self.hp = hp.validate()
        self.model = model
        if dataset.num_classes != model.config.num_classes:
            raise ConfigError(
                f"dataset has {dataset.num_classes} classes, model has {model.config.num_classes}", "num_classes"
            )
        self.labelled = data_mod.labelled_set(dataset, split)
        if len(self.labelled) == 0:
            raise ArgumentError("labelled split is empty")
        self.pool = data_mod.unlabelled_pool(dataset, split) if hp.mode == "hydramix" else None
        if self.pool is not None and len(self.pool) == 0:
            raise ArgumentError("hydramix mode needs a non-empty unlabelled pool")
        self.test = dataset.test_set()
        self.num_classes = dataset.num_classes
        self.loss_cfg = hp.loss_config(dataset.background_index)
        self.background_index = dataset.background_index
        self.rng = np.random.default_rng(hp.seed)
        self.optimizer = Adam(model.parameters(), hp.adam_beta1, hp.adam_beta2, hp.adam_eps)
        self.global_step = 0
        self._cycle = _labelled_cycle(len(self.labelled), self.rng)

    def steps_per_epoch(self):
        n = len(self.pool) if self.pool is not None else len(self.labelled)
        return math.ceil(n / self.hp.batch_size)

    def unlabelled_weight(self):
        ramp = self.hp.rampup_epochs * self.steps_per_epoch()
        return 1.0 if ramp <= 0 else min(1.0, self.global_step / ramp)

    def _labelled_batch(self, idx):
        lab = self.labelled
        ops = ssl.sample_ops(self.rng, len(idx))
        images, cx, cy = ssl.augment_batch(lab.images[idx], ops, lab.cx[idx], lab.cy[idx])
        return ssl.Batch(images, _one_hot(lab.class_ids[idx], self.num_classes), cx, cy)

    def _pseudo_batch(self, images):
        hp = self.hp
        guess = ssl.pseudo_label(self.model, images, hp.k_augment, self.rng)
        labels = ssl.sharpen(guess.probs, hp.temperature)
        # the first augmented view is the one trained on; its centroid target is the
        # original-image prediction moved by the same symmetry
        cx, cy = ssl.transform_centroids(guess.cx, guess.cy, guess.ops[0])
        return ssl.Batch(guess.views[0], labels, cx, cy)

    def step(self, lr, idx=None, uidx=None):
        """One update. ``idx`` / ``uidx`` pick labelled / unlabelled rows; returns loss components."""
        hp = self.hp
        xb = self._labelled_batch(idx)
        if self.pool is None:
            out = forward(self.model, xb.images, "train")
            result = losses.joint_loss((Targets(xb.labels, xb.cx, xb.cy), out), None, self.loss_cfg)
        else:
            ub = self._pseudo_batch(self.pool.images[uidx])
            mx, mu = ssl.mix_batches(xb, ub, self.rng, hp.mixup_alpha, hp.mixup_beta)
            out = forward(self.model, np.concatenate([mx.images, mu.images]), "train")
            out_x, out_u = _split_output(out, len(mx))
            result = losses.joint_loss(
                (Targets(mx.labels, mx.cx, mx.cy), out_x), (Targets(mu.labels, mu.cx, mu.cy), out_u), self.loss_cfg,
                self.unlabelled_weight(),
            )
        total = result.total + l2_penalty(self.model)
        if not np.isfinite(total.data).all():
            raise NumericalError(f"non-finite loss at step {self.global_step}", step=self.global_step)
        self.optimizer.zero_grad()
        ad.backward(total)
        self.optimizer.step(lr)
        self.global_step += 1
        return result.components

    def epoch_batches(self):
        hp = self.hp
        if self.pool is None:
            order = self.rng.permutation(len(self.labelled))
            for start in range(0, len(order), hp.batch_size):
                yield order[start:start + hp.batch_size], None
        else:
            order = self.rng.permutation(len(self.pool))
            for start in range(0, len(order), hp.batch_size):
                uidx = order[start:start + hp.batch_size]
                yield _take(self._cycle, len(uidx)), uidx

    def run_epoch(self, epoch):
        lr = lr_at(epoch, self.hp.epochs, self.hp.lr_start, self.hp.lr_end)
        sums = dict.fromkeys(LOSS_KEYS, 0.0)
        steps = 0
        for idx, uidx in self.epoch_batches():
            comps = self.step(lr, idx, uidx)
            for key in LOSS_KEYS:
                sums[key] += comps[key]
            steps += 1
        return {k: v / steps for k, v in sums.items()}, lr

    def evaluate(self):
        return evaluate(self.model, self.test, self.num_classes, self.background_index, self.hp.eval_batch_size)


def train(model, dataset, split, hp, run_dir=None, on_epoch=None):
    """Train ``model`` in place; returns ``(model, [MetricsRecord per epoch])``.

    With ``run_dir`` set, appends one JSON line per epoch to ``metrics.jsonl``
    and writes ``ckpt_final.hmxw`` and ``ckpt_best.hmxw``.
    """
    trainer = Trainer(model, dataset, split, hp)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "metrics.jsonl").write_text("")
    records, best = [], -1.0
    for epoch in range(hp.epochs):
        train_loss, lr = trainer.run_epoch(epoch)
        rec = trainer.evaluate()
        rec.epoch, rec.train_loss, rec.lr = epoch, train_loss, lr
        records.append(rec)
        log.info("epoch %d lr %.2e loss %.4f acc %.4f", epoch, lr, train_loss["total"], rec.test_accuracy)
        if run_dir is not None:
            with open(run_dir / "metrics.jsonl", "a", encoding="utf-8") as fh:
                fh.write(rec.to_json() + "\n")
            if rec.test_accuracy > best:
                best = rec.test_accuracy
                save_model(model, run_dir / "ckpt_best.hmxw")
        if on_epoch is not None:
            on_epoch(rec)
    if run_dir is not None:
        save_model(model, run_dir / "ckpt_final.hmxw")
    return model, records


# sweep


@dataclass
class SweepRow:
    mode: str
    budget: int
    seed: int
    final_accuracy: float
    mean_centroid_error: float | None
    status: str = "ok"


SWEEP_HEADER = ("mode", "budget", "seed", "final_accuracy", "mean_centroid_error", "status")
TABLE_LABELS = {
    "partial": "Simple CNN",
    "supervised": "Simple CNN (full)",
    "hydramix_nosce": "HydraMix-Net w/o SCE",
    "hydramix": "HydraMix-Net",
}


def cell_hyperparams(hp, mode, seed):
    if mode not in SWEEP_MODES:
        raise ConfigError(f"sweep mode must be one of {SWEEP_MODES}, got {mode!r}", "modes")
    base = "hydramix" if mode == "hydramix_nosce" else mode
    return replace(hp, mode=base, seed=seed, disable_sce=hp.disable_sce or mode == "hydramix_nosce")


def run_cell(dataset, mode, budget, seed, hp, model_config, run_dir=None):
    """Train one (mode, budget, seed) cell from scratch and return its final metrics."""
    cell_hp = cell_hyperparams(hp, mode, seed)
    budget = dataset.n_train if budget in (None, "full") else int(budget)
    split = data_mod.make_split(dataset, budget, seed)
    model = build(replace(model_config, num_classes=dataset.num_classes), seed)
    _, records = train(model, dataset, split, cell_hp, run_dir)
    last = records[-1]
    return SweepRow(mode, budget, seed, last.test_accuracy, last.mean_centroid_error)


def _cell_job(args):
    dataset, mode, budget, seed, hp, model_config, run_dir = args
    try:
        return run_cell(dataset, mode, budget, seed, hp, model_config, run_dir)
    except HydraMixError as exc:
        budget = dataset.n_train if budget in (None, "full") else int(budget)
        return SweepRow(mode, budget, seed, float("nan"), None, f"error: {type(exc).__name__}: {exc}")


def worker_count():
    raw = os.environ.get("HMX_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"HMX_THREADS must be an integer, got {raw!r}", "HMX_THREADS") from None


@dataclass
class SweepResult:
    rows: list
    summary: list

    @property
    def failed(self):
        return [r for r in self.rows if r.status != "ok"]


def summarize_rows(rows):
    cells = {}
    for r in rows:
        if r.status == "ok":
            cells.setdefault((r.mode, r.budget), []).append(r.final_accuracy)
    return [
        {"mode": m, "budget": b, "n": len(v), "mean": float(np.mean(v)), "std": float(np.std(v))}
        for (m, b), v in cells.items()
    ]


def sweep(dataset, budgets, modes, seeds, hp, model_config=None, run_dir=None, workers=None):
    """One row per (mode, budget, seed); a failing cell is recorded and the grid continues."""
    model_config = model_config or ModelConfig()
    for m in modes:
        if m not in SWEEP_MODES:
            raise ConfigError(f"sweep mode must be one of {SWEEP_MODES}, got {m!r}", "modes")
    jobs = []
    for mode in modes:
        for budget in budgets:
            for seed in seeds:
                cell_dir = None
                if run_dir is not None:
                    cell_dir = Path(run_dir) / "cells" / f"{mode}_b{budget}_s{seed}"
                jobs.append((dataset, mode, budget, seed, hp, model_config, cell_dir))
    workers = workers or worker_count()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_cell_job, jobs))
    else:
        rows = [_cell_job(j) for j in jobs]
    result = SweepResult(rows, summarize_rows(rows))
    if run_dir is not None:
        write_sweep(result, run_dir)
    return result


def write_sweep(result, run_dir):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_HEADER)
        for r in result.rows:
            err = "" if r.mean_centroid_error is None else repr(r.mean_centroid_error)
            writer.writerow([r.mode, r.budget, r.seed, repr(r.final_accuracy), err, r.status])
    with open(run_dir / "sweep_summary.json", "w", encoding="utf-8") as fh:
        json.dump({"cells": result.summary}, fh, indent=1, sort_keys=True)
        fh.write("\n")
    (run_dir / "sweep_table.txt").write_text(render_table(result.summary))


def render_table(summary):
    """Text table shaped like the accuracy-vs-labelled-budget table: modes as rows, budgets as columns."""
    budgets = sorted({c["budget"] for c in summary})
    modes = [m for m in ("partial", "supervised", "hydramix_nosce", "hydramix") if any(c["mode"] == m for c in summary)]
    lookup = {(c["mode"], c["budget"]): c for c in summary}
    width = max([len("labelled data")] + [len(TABLE_LABELS[m]) for m in modes])
    lines = [" | ".join(["labelled data".ljust(width)] + [f"{b:>13}" for b in budgets])]
    lines.append("-" * len(lines[0]))
    for m in modes:
        cells = []
        for b in budgets:
            c = lookup.get((m, b))
            cells.append(f"{c['mean']:.3f}±{c['std']:.3f}".rjust(13) if c else f"{'--':>13}")
        lines.append(" | ".join([TABLE_LABELS[m].ljust(width)] + cells))
    return "\n".join(lines) + "\n"
