"""Training loop, evaluation metrics and ablation grid runners."""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NumericError
from .layers import SgdConfig, lr_at, sgd_step
from .model import ModelConfig, build_model
from .phantom import PhantomSpec, generate_dataset
from .tensor import Tensor, no_grad, softmax_cross_entropy


@dataclass
class Metrics:
    """Binary classification counts with malignant (label 1) as positive."""

    tp: int
    tn: int
    fp: int
    fn: int

    @classmethod
    def from_predictions(cls, predicted, actual) -> "Metrics":
        predicted = np.asarray(predicted)
        actual = np.asarray(actual)
        return cls(
            tp=int(np.sum((predicted == 1) & (actual == 1))),
            tn=int(np.sum((predicted == 0) & (actual == 0))),
            fp=int(np.sum((predicted == 1) & (actual == 0))),
            fn=int(np.sum((predicted == 0) & (actual == 1))),
        )

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else 0.0

    @property
    def sensitivity(self) -> float:
        pos = self.tp + self.fn
        return self.tp / pos if pos else 0.0

    @property
    def specificity(self) -> float:
        neg = self.tn + self.fp
        return self.tn / neg if neg else 0.0


@dataclass
class RunRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "lr": self.lr,
            "train_loss": self.train_loss,
            "train_acc": self.train_acc,
            "test_loss": self.test_loss,
            "test_acc": self.test_acc,
        }


@dataclass
class TrainResult:
    records: list
    final: Metrics
    wall_seconds: float
    model: object


def evaluate(model, dataset, batch_size: int = 64):
    """Mean loss and confusion metrics over a dataset, gradients off."""
    total_loss = 0.0
    preds = np.empty(len(dataset), dtype=np.int64)
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            stop = min(start + batch_size, len(dataset))
            x = Tensor(dataset.samples[start:stop].astype(model.dtype, copy=False))
            fp = model.forward(x, training=False)
            loss = softmax_cross_entropy(fp.logits, dataset.labels[start:stop])
            total_loss += float(loss.data) * (stop - start)
            preds[start:stop] = np.argmax(fp.logits.data, axis=1)
    metrics = Metrics.from_predictions(preds, dataset.labels)
    return total_loss / len(dataset), metrics


def train(model, train_ds, test_ds, epochs: int, sgd: SgdConfig = None,
          seed: int = 0, log=None) -> TrainResult:
    """SGD training with per-epoch shuffling and test-set evaluation.

    Raises NumericError with the epoch and batch position if the loss
    ever goes non-finite, so a diverging run fails loudly instead of
    silently writing NaN parameters.
    """
    sgd = sgd or SgdConfig()
    params = model.param_set()
    shuffle_rng = np.random.default_rng(seed)
    records = []
    started = time.perf_counter()
    for epoch in range(epochs):
        order = shuffle_rng.permutation(len(train_ds))
        loss_sum = 0.0
        hit = 0
        for start in range(0, len(train_ds), sgd.batch_size):
            batch = order[start:start + sgd.batch_size]
            x = Tensor(train_ds.samples[batch].astype(model.dtype, copy=False))
            y = train_ds.labels[batch]
            fp = model.forward(x, training=True)
            loss = softmax_cross_entropy(fp.logits, y)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(
                    f"non-finite training loss {value} at epoch {epoch + 1}, "
                    f"batch starting at sample {start}")
            loss_sum += value * batch.size
            hit += int(np.sum(np.argmax(fp.logits.data, axis=1) == y))
            params.zero_grad()
            loss.backward()
            sgd_step(params, sgd, epoch)
        test_loss, test_metrics = evaluate(model, test_ds)
        record = RunRecord(
            epoch=epoch + 1,
            lr=lr_at(sgd, epoch),
            train_loss=loss_sum / len(train_ds),
            train_acc=hit / len(train_ds),
            test_loss=test_loss,
            test_acc=test_metrics.accuracy,
        )
        records.append(record)
        if log is not None:
            log(record)
    params.zero_grad()  # hand back a model ready for fresh backward passes
    _, final = evaluate(model, test_ds)
    return TrainResult(records, final, time.perf_counter() - started, model)


# ---------------------------------------------------------------------
# ablation grids
# ---------------------------------------------------------------------


@dataclass
class AblationCell:
    name: str
    config: ModelConfig


@dataclass
class RunSpec:
    train_count: int = 916
    test_count: int = 229
    epochs: int = 60
    data_seed: int = 20260101
    model_seed: int = 0
    sgd: SgdConfig = field(default_factory=SgdConfig)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)


def table3_cells(base: ModelConfig = None):
    """Pooling grid for the two-branch head: high-level x final-feature."""
    base = base or ModelConfig()
    cells = []
    for hf, fcf in (("gap", "gap"), ("gap", "gmp"), ("gmp", "gmp"), ("gmp", "gap")):
        cfg = replace(base, head="hesam", use_hf_branch=True, hf_pool=hf, fcf_pool=fcf)
        cells.append(AblationCell(f"hf-{hf}_fcf-{fcf}", cfg))
    return cells


def table4_cells(base: ModelConfig = None):
    """Component build-up: backbone, residual stack and high-level branch."""
    base = base or ModelConfig()
    return [
        AblationCell("unet-sam",
                     replace(base, head="sam", use_residual_stack=False, use_hf_branch=False)),
        AblationCell("unet-rb-sam",
                     replace(base, head="sam", use_residual_stack=True, use_hf_branch=False)),
        AblationCell("unet-gmp-sam",
                     replace(base, head="hesam", use_residual_stack=False, use_hf_branch=True)),
        AblationCell("unet-gmp-rb-sam",
                     replace(base, head="hesam", use_residual_stack=True, use_hf_branch=True)),
    ]


def channel_sweep_cells(base: ModelConfig = None):
    base = base or ModelConfig()
    return [AblationCell(f"channels-{c}", replace(base, in_channels=c)) for c in (1, 3, 11, 21)]


def run_cell(cell: AblationCell, spec: RunSpec) -> dict:
    """Train one grid cell from scratch and report its final metrics."""
    train_ds = generate_dataset(spec.train_count, cell.config.in_channels,
                                spec.data_seed, offset=0, spec=spec.phantom)
    test_ds = generate_dataset(spec.test_count, cell.config.in_channels,
                               spec.data_seed, offset=spec.train_count, spec=spec.phantom)
    model = build_model(cell.config, seed=spec.model_seed)
    result = train(model, train_ds, test_ds, spec.epochs, spec.sgd, seed=spec.model_seed)
    return {
        "cell": cell.name,
        "seed": spec.model_seed,
        "accuracy": result.final.accuracy,
        "sensitivity": result.final.sensitivity,
        "specificity": result.final.specificity,
        "train_seconds": result.wall_seconds,
    }


def _run_cell_packed(packed):
    return run_cell(*packed)


def run_ablation_grid(cells, spec: RunSpec, seeds=(0,), jobs: int = 1, log=None):
    """Run every (cell, seed) combination, optionally in worker processes."""
    tasks = [(cell, replace(spec, model_seed=seed)) for cell in cells for seed in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_cell_packed, tasks))
    else:
        rows = [run_cell(cell, one) for cell, one in tasks]
    if log is not None:
        for row in rows:
            log(row)
    return rows
