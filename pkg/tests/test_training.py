import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowvid.errors import DataError
from flowvid.flowdata import SplitSpec, make_synthetic, prepare
from flowvid.model import ModelSpec, Variant, build
from flowvid.representation import FlowVideo, pack_video
from flowvid.training import (EarlyStopping, TrainConfig, compare_td, confusion_matrix,
                              evaluate, loss_and_accuracy, report_from_confusion, train)
from metric_oracle import oracle_metrics

confusions = st.integers(2, 10).flatmap(
    lambda c: st.lists(st.lists(st.integers(0, 100), min_size=c, max_size=c),
                       min_size=c, max_size=c))


@settings(max_examples=200, deadline=None)
@given(confusions)
def test_metrics_match_brute_force(cm):
    cm = np.array(cm)
    for averaging in ("macro", "weighted"):
        rep = report_from_confusion(cm, averaging)
        expected = oracle_metrics(cm, averaging)
        got = (rep.accuracy, rep.precision, rep.recall, rep.f1)
        assert np.allclose(got, expected, rtol=0, atol=1e-12), (averaging, got, expected)


@settings(max_examples=200, deadline=None)
@given(confusions)
def test_metric_identities(cm):
    cm = np.array(cm)
    if cm.sum() == 0:
        return
    rep = report_from_confusion(cm, "weighted")
    assert rep.accuracy == pytest.approx(np.trace(cm) / cm.sum(), abs=1e-12)
    assert rep.recall == pytest.approx(rep.accuracy, abs=1e-12)
    for c in rep.per_class:
        assert min(c.precision, c.recall) - 1e-12 <= c.f1 <= max(c.precision, c.recall) + 1e-12
    assert rep.sample_count == cm.sum()


def test_binary_hand_example():
    # rows = true (negative, positive); TP=50, TN=30, FP=10, FN=10
    rep = report_from_confusion([[30, 10], [10, 50]], "binary")
    assert rep.accuracy == pytest.approx(0.8, abs=1e-12)
    for value in (rep.precision, rep.recall, rep.f1):
        assert value == pytest.approx(50 / 60, abs=1e-12)
    assert round(rep.precision, 4) == 0.8333


def test_perfect_predictions():
    rep = report_from_confusion(np.diag([4, 7, 1]))
    assert rep.accuracy == rep.precision == rep.recall == rep.f1 == 1.0


def test_single_class_predictions_macro_f1():
    rep = report_from_confusion([[5, 0], [5, 0]], "macro")
    assert rep.accuracy == 0.5
    assert rep.f1 == pytest.approx(1 / 3, abs=1e-12)


def test_confusion_rejects_out_of_range_labels():
    with pytest.raises(DataError):
        confusion_matrix([0, 3], [0, 1], 3)


def test_evaluate_rejects_unknown_label():
    model = build(ModelSpec(Variant.VANILLA, 2))
    video = FlowVideo(np.zeros((2, 1, 8, 6), np.float32), np.array([0, 2]))
    with pytest.raises(DataError):
        evaluate(model, video)


# ------------------------------------------------------------ early stopping


class Weights:
    """Stand-in model whose whole state is one scalar."""

    def __init__(self):
        self.value = None

    def state_dict(self):
        return {"w": self.value}

    def load_state_dict(self, state):
        self.value = state["w"]


def drive(losses, patience):
    model, stopper = Weights(), EarlyStopping(patience)
    stopped_at = None
    for epoch, loss in enumerate(losses, start=1):
        model.value = epoch  # "weights" after epoch N are just N
        if stopper.step(epoch, loss, model):
            stopped_at = epoch
            break
    stopper.restore(model)
    return stopped_at, stopper.best_epoch, model.value


def test_early_stopping_literal_example():
    assert drive([1.0, 0.9, 0.95, 0.96, 0.97], 3) == (5, 2, 2)


def test_early_stopping_equal_loss_is_not_improvement():
    assert drive([1.0, 1.0, 1.0], 2) == (3, 1, 1)


def test_early_stopping_runs_out_without_stopping():
    assert drive([3.0, 2.0, 2.5, 1.0], 3) == (None, 4, 4)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=30), st.integers(1, 5))
def test_early_stopping_restores_observed_minimum(losses, patience):
    stopped_at, best, restored = drive(losses, patience)
    seen = losses[:stopped_at] if stopped_at else losses
    assert losses[restored - 1] == min(seen)
    assert restored == seen.index(min(seen)) + 1
    if stopped_at:
        assert stopped_at - best == patience


# ------------------------------------------------------------ training loop


@pytest.fixture(scope="module")
def tiny():
    records, meta = make_synthetic(3, 10, 48, seed=5)
    sp = prepare(records, meta, SplitSpec(seed=0))
    return pack_video(sp.train), pack_video(sp.val), pack_video(sp.test)


def test_training_is_deterministic_and_restores_best(tiny):
    tr, va, _ = tiny
    cfg = TrainConfig(batch_size=8, max_epochs=3, patience=2, seed=3)
    runs = [train(build(ModelSpec(Variant.VANILLA, 3), seed=3), tr, va, cfg) for _ in range(2)]
    curves = [[(e.train_loss, e.train_accuracy, e.val_loss, e.val_accuracy) for e in h.epochs]
              for _, h in runs]
    assert curves[0] == curves[1]
    (m1, hist), (m2, _) = runs
    a, b = m1.state_dict(), m2.state_dict()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert loss_and_accuracy(m1, va, cfg.batch_size)[0] == min(hist.val_losses)


def test_train_rejects_empty_split(tiny):
    tr, _, _ = tiny
    empty = FlowVideo(np.zeros((0, 1, 8, 6), np.float32), np.zeros(0, np.int64))
    with pytest.raises(ValueError):
        train(build(ModelSpec(Variant.VANILLA, 3)), tr, empty, TrainConfig(max_epochs=1))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(patience=0)


def test_evaluate_is_pure(tiny):
    _, _, te = tiny
    model = build(ModelSpec(Variant.TD, 3), seed=0)
    a, b = evaluate(model, te), evaluate(model, te)
    assert a.to_dict() == b.to_dict()
    assert a.sample_count == len(te)


def test_compare_td_report_structure(tiny, tmp_path):
    tr, va, te = tiny
    cfg = TrainConfig(batch_size=16, max_epochs=1, patience=1, seed=0)
    report = compare_td(tr, va, te, cfg, repeats=2, out_dir=tmp_path)
    assert set(report["variants"]) == {"conv-lstm-td-mlp", "conv-lstm-mlp"}
    for v in report["variants"].values():
        for m in ("accuracy", "precision", "recall", "f1"):
            s = v["metrics"][m]
            assert s["min"] <= s["mean"] <= s["max"] and len(s["values"]) == 2
        assert v["seconds_per_epoch_mean"] > 0 and v["epochs_mean"] == 1
    seeds = [[r["seed"] for r in v["runs"]] for v in report["variants"].values()]
    assert seeds[0] == seeds[1] and len(set(seeds[0])) == 2
    assert {p.name for p in tmp_path.iterdir()} == {"comparison.json", "comparison.txt",
                                                   "plot_data.csv"}
    assert len((tmp_path / "plot_data.csv").read_text().strip().splitlines()) == 1 + 2 * 4
