"""Metrics, the training loop and the ablation grid plumbing."""

import numpy as np
import numpy.testing as npt
import pytest

from nodulemap.errors import NumericError
from nodulemap.layers import SgdConfig
from nodulemap.model import ModelConfig, build_model
from nodulemap.phantom import PhantomSpec, generate_dataset
from nodulemap.tensor import Tensor, no_grad, softmax_cross_entropy
from nodulemap.training import (Metrics, RunSpec, channel_sweep_cells,
                                evaluate, run_ablation_grid, run_cell,
                                table3_cells, table4_cells, train)


def _tiny_dataset(count, seed, channels=1):
    return generate_dataset(count, channels, master_seed=seed)


def _fast_sgd(**kw):
    kw.setdefault("lr", 0.002)
    kw.setdefault("batch_size", 8)
    return SgdConfig(**kw)


def test_metrics_counts_and_rates():
    predicted = [1, 1, 0, 0, 1, 0, 1, 0]
    actual =    [1, 0, 0, 1, 1, 0, 0, 0]
    m = Metrics.from_predictions(predicted, actual)
    assert (m.tp, m.tn, m.fp, m.fn) == (2, 3, 2, 1)
    assert m.total == 8
    assert m.accuracy == pytest.approx(5 / 8)
    assert m.sensitivity == pytest.approx(2 / 3)
    assert m.specificity == pytest.approx(3 / 5)


def test_metrics_empty_denominators_are_zero():
    all_neg = Metrics.from_predictions([0, 0], [0, 0])
    assert all_neg.sensitivity == 0.0
    assert all_neg.accuracy == 1.0
    all_pos = Metrics.from_predictions([1, 1], [1, 1])
    assert all_pos.specificity == 0.0
    assert Metrics(0, 0, 0, 0).accuracy == 0.0


def test_evaluate_matches_per_sample_loop():
    ds = _tiny_dataset(10, seed=21)
    model = build_model(ModelConfig(in_channels=1), seed=0)
    loss, metrics = evaluate(model, ds, batch_size=4)  # uneven final batch
    want_losses = []
    want_preds = []
    with no_grad():
        for i in range(len(ds)):
            fp = model.forward(Tensor(ds.samples[i:i + 1]), training=False)
            want_losses.append(float(softmax_cross_entropy(fp.logits, ds.labels[i:i + 1]).data))
            want_preds.append(int(np.argmax(fp.logits.data)))
    assert loss == pytest.approx(np.mean(want_losses), rel=1e-5)
    want = Metrics.from_predictions(want_preds, ds.labels)
    assert (metrics.tp, metrics.tn, metrics.fp, metrics.fn) == (want.tp, want.tn, want.fp, want.fn)


def test_training_reduces_loss_and_records_progress():
    train_ds = _tiny_dataset(16, seed=31)
    test_ds = _tiny_dataset(8, seed=32)
    model = build_model(ModelConfig(in_channels=1), seed=1)
    seen = []
    result = train(model, train_ds, test_ds, epochs=4, sgd=_fast_sgd(),
                   seed=0, log=seen.append)
    assert len(result.records) == 4
    assert [r.epoch for r in result.records] == [1, 2, 3, 4]
    assert result.records[-1].train_loss < result.records[0].train_loss
    assert result.wall_seconds > 0
    assert seen == result.records
    assert result.records[0].lr == pytest.approx(0.002)
    assert 0.0 <= result.final.accuracy <= 1.0


def test_training_is_bit_reproducible():
    train_ds = _tiny_dataset(12, seed=41)
    test_ds = _tiny_dataset(6, seed=42)
    outs = []
    for _ in range(2):
        model = build_model(ModelConfig(in_channels=1), seed=2)
        result = train(model, train_ds, test_ds, epochs=2, sgd=_fast_sgd(), seed=3)
        state = b"".join(arr.tobytes() for _, arr in model.state_entries())
        outs.append((result.records, state))
    assert outs[0][0] == outs[1][0]
    assert outs[0][1] == outs[1][1]


def test_training_aborts_on_corrupted_weights():
    train_ds = _tiny_dataset(8, seed=51)
    model = build_model(ModelConfig(in_channels=1), seed=0)
    model.classifier.w.data[:] = np.nan
    with pytest.raises(NumericError):
        train(model, train_ds, train_ds, epochs=1, sgd=_fast_sgd())


def test_canonical_run_spec_defaults():
    spec = RunSpec()
    assert (spec.train_count, spec.test_count, spec.epochs) == (916, 229, 60)
    assert spec.sgd.batch_size == 32
    assert spec.sgd.lr == pytest.approx(5e-4)


def test_pooling_grid_cells():
    cells = table3_cells()
    assert [c.name for c in cells] == [
        "hf-gap_fcf-gap", "hf-gap_fcf-gmp", "hf-gmp_fcf-gmp", "hf-gmp_fcf-gap"]
    for cell in cells:
        assert cell.config.head == "hesam"
        hf, fcf = cell.name.split("_")
        assert cell.config.hf_pool == hf.split("-")[1]
        assert cell.config.fcf_pool == fcf.split("-")[1]


def test_component_buildup_cells():
    cells = {c.name: c.config for c in table4_cells()}
    assert set(cells) == {"unet-sam", "unet-rb-sam", "unet-gmp-sam", "unet-gmp-rb-sam"}
    assert cells["unet-sam"].head == "sam" and not cells["unet-sam"].use_residual_stack
    assert cells["unet-rb-sam"].head == "sam" and cells["unet-rb-sam"].use_residual_stack
    assert cells["unet-gmp-sam"].head == "hesam" and not cells["unet-gmp-sam"].use_residual_stack
    assert cells["unet-gmp-rb-sam"].head == "hesam" and cells["unet-gmp-rb-sam"].use_residual_stack


def test_channel_sweep_cells():
    cells = channel_sweep_cells()
    assert [c.config.in_channels for c in cells] == [1, 3, 11, 21]
    assert [c.name for c in cells] == ["channels-1", "channels-3", "channels-11", "channels-21"]


def test_run_cell_and_grid_row_layout():
    spec = RunSpec(train_count=8, test_count=4, epochs=1, sgd=_fast_sgd())
    cells = channel_sweep_cells()[:1]
    rows = run_ablation_grid(cells, spec, seeds=(0, 1))
    assert len(rows) == 2
    assert [r["seed"] for r in rows] == [0, 1]
    for row in rows:
        assert row["cell"] == "channels-1"
        assert set(row) == {"cell", "seed", "accuracy", "sensitivity", "specificity",
                            "train_seconds"}
        assert 0.0 <= row["accuracy"] <= 1.0
    single = run_cell(cells[0], spec)
    assert single["cell"] == "channels-1" and single["seed"] == 0
