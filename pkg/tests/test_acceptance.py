"""The eight acceptance criteria, each at its stated tolerance and time budget.

Every test records one PASS/FAIL line (shown in the pytest summary).
Run directly with ``python tests/test_acceptance.py`` to get just those lines.
"""
import contextlib
import io
import re
import time

import numpy as np
import pytest

from acceptance_log import criterion
from flowvid.cli import main as cli_main
from flowvid.flowdata import SplitSpec, make_synthetic, prepare
from flowvid.gradcheck import check_gradients
from flowvid.model import ModelSpec, Variant, audit_params, build, load_checkpoint, save_checkpoint
from flowvid.representation import choose_factors, pack_video, reshape_flow
from flowvid.training import (METRICS, EarlyStopping, TrainConfig, compare_td, evaluate,
                              loss_and_accuracy, report_from_confusion, train)
from gradcases import PRIMITIVE_CASES, full_model_case
from metric_oracle import oracle_metrics

TD_ROWS = [320, 0, 128, 16448, 0, 128, 16448, 0, 128, 16448, 0, 128, 0, 40800, 6464, 4160, 4160,
           0, 4620429]
TD_TOTAL, VANILLA_TOTAL = 4_726_189, 114_925


def run_cli(*argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = cli_main(list(argv))
    return code, out.getvalue(), err.getvalue()


def printed_rows(table):
    """Trainable-parameter column of a printed ledger (rows between the two rules)."""
    lines = table.splitlines()
    rules = [i for i, line in enumerate(lines) if line and set(line) == {"-"}]
    return [int(line.split()[-1]) for line in lines[rules[0] + 1:rules[1]]]


def test_1_parameter_ledger():
    with criterion(1, "parameter ledger matches the expected per-layer counts") as notes:
        start = time.perf_counter()
        code, out, _ = run_cli("count-params", "--variant", "conv-lstm-td-mlp", "--classes", "141",
                               "--check")
        assert code == 0, f"count-params --check exited {code}"
        table = out.split("\n", 1)[1]
        assert printed_rows(table) == TD_ROWS, printed_rows(table)
        assert re.search(r"Total\s+4,726,189", out)
        assert "41.12x" in out
        code, out, _ = run_cli("count-params", "--variant", "conv-lstm-mlp", "--classes", "141",
                               "--check")
        assert code == 0 and re.search(r"Total\s+114,925", out)
        td = audit_params(build(ModelSpec(Variant.TD, 141)))
        vanilla = audit_params(build(ModelSpec(Variant.VANILLA, 141)))
        assert td.counts == TD_ROWS and td.total == TD_TOTAL and vanilla.total == VANILLA_TOTAL
        ratio = td.total / vanilla.total
        assert round(ratio) == 41
        elapsed = time.perf_counter() - start
        assert elapsed < 1.0, f"took {elapsed:.2f}s"
        notes.append(f"TD {td.total:,}, vanilla {vanilla.total:,}, ratio {ratio:.2f}x")


def test_2_shape_chain():
    with criterion(2, "forward shape chain for N in {1, 2, 17}") as notes:
        C = 141
        model = build(ModelSpec(Variant.TD, C), seed=0)
        for n in (1, 2, 17):
            trace = []
            probs = model.predict_proba(np.random.default_rng(n).uniform(size=(n, 1, 8, 6)),
                                        trace=trace)
            expected = [(n, 64, 7, 5), (n, 64, 6, 4), (n, 64, 5, 3), (n, 64, 4, 2), (n, 512),
                        (n, 512, 1), (n, 512, 100), (n, 512, 64), (n, 512, 64), (n, 512, 64),
                        (n, 32768), (n, C), (n, C)]
            assert [s for _, s in trace] == expected, trace
            assert trace[-1][0] == "softmax"
            assert np.allclose(probs.sum(axis=1), 1, atol=1e-6)
        notes.append("(N,1,8,6) -> ... -> (N,512,1) -> (N,512,100) -> ... -> (N,32768) -> (N,141)")


def test_3_gradient_oracle():
    with criterion(3, "finite-difference gradient oracle, 20 seeds, 64-bit") as notes:
        start = time.perf_counter()
        results = []
        for seed in range(20):
            for name, make in PRIMITIVE_CASES.items():
                fn, tensors = make(np.random.default_rng([seed, len(name)]))
                results.append((f"{name} seed {seed}", check_gradients(fn, tensors, h=1e-5)))
            for variant in Variant:
                fn, tensors = full_model_case(variant, np.random.default_rng([seed, 99]))
                res = check_gradients(fn, tensors, max_entries=1, rng=np.random.default_rng(seed))
                results.append((f"{variant.value} seed {seed}", res))
        label, worst = max(results, key=lambda r: r[1].max_rel_error)
        assert worst < 1e-4, f"{label}: {worst.max_rel_error:.2e}"
        checked = sum(r.checked for _, r in results)
        skipped = sum(r.skipped for _, r in results)
        assert skipped <= 0.05 * (checked + skipped), f"{skipped} of {checked + skipped} probes skipped"
        elapsed = time.perf_counter() - start
        assert elapsed < 300, f"took {elapsed:.0f}s"
        notes.append(f"{len(PRIMITIVE_CASES)} primitives + 2 models, max rel err {worst.max_rel_error:.1e}, "
                     f"{checked} probes, {skipped} skipped at kinks")


def test_4_representation_round_trip():
    with criterion(4, "flatten(reshape(x, 8, 6)) == x bitwise, 10,000 vectors") as notes:
        rng = np.random.default_rng(2024)
        X = rng.standard_normal((10_000, 48)) * 10.0 ** rng.uniform(-300, 300, (10_000, 48))
        X[::7, 3] = -0.0
        X[::11, 5] = 5e-324
        for x in X:
            assert reshape_flow(x, 8, 6).flatten().tobytes() == x.tobytes()
        assert choose_factors(48) == (8, 6)
        notes.append("choose_factors(48) = (8, 6)")


def test_5_metrics_oracle():
    with criterion(5, "metrics match brute force on 200 confusion matrices") as notes:
        rng = np.random.default_rng(5)
        worst = 0.0
        for _ in range(200):
            C = int(rng.integers(2, 11))
            cm = rng.integers(0, 101, (C, C))
            for averaging in ("macro", "weighted"):
                rep = report_from_confusion(cm, averaging)
                got = np.array([rep.accuracy, rep.precision, rep.recall, rep.f1])
                err = np.abs(got - np.array(oracle_metrics(cm, averaging))).max()
                assert err <= 1e-12, f"{averaging}: {err:.1e}"
                worst = max(worst, err)
        rep = report_from_confusion([[30, 10], [10, 50]], "binary")  # TN FP / FN TP
        assert [round(v, 4) for v in (rep.accuracy, rep.precision, rep.recall, rep.f1)] == \
            [0.8, 0.8333, 0.8333, 0.8333]
        notes.append(f"max abs deviation {worst:.1e}; binary example 0.8/0.8333/0.8333/0.8333")


@pytest.fixture(scope="module")
def smoke_data():
    records, meta = make_synthetic(10, 50, 48, seed=7)
    sp = prepare(records, meta, SplitSpec(seed=0))
    return tuple(pack_video(part) for part in (sp.train, sp.val, sp.test))


def test_6_learning_smoke(smoke_data):
    with criterion(6, "desk-scale learning on synthetic 10 x 50") as notes:
        start = time.perf_counter()
        tr, va, te = smoke_data
        cfg = TrainConfig(batch_size=32, max_epochs=60, patience=5, lr=1e-4, seed=1)
        model, history = train(build(ModelSpec(Variant.TD, 10), seed=1), tr, va, cfg)
        _, train_acc = loss_and_accuracy(model, tr)
        test_acc = evaluate(model, te).accuracy
        assert history.epochs_run <= 60
        assert train_acc >= 0.99, f"training accuracy {train_acc:.3f}"
        assert test_acc >= 0.90, f"held-out accuracy {test_acc:.3f}"
        notes.append(f"train {train_acc:.3f}, held-out {test_acc:.3f}, best epoch "
                     f"{history.best_epoch}/{history.epochs_run}, "
                     f"{history.seconds_per_epoch:.1f}s/epoch")

        # comparison report shape (5 repeats, short runs on a small synthetic set)
        records, meta = make_synthetic(3, 20, 48, seed=11)
        sp = prepare(records, meta, SplitSpec(seed=0))
        parts = [pack_video(p) for p in (sp.train, sp.val, sp.test)]
        report = compare_td(*parts, TrainConfig(batch_size=16, max_epochs=2, patience=2),
                            repeats=5)
        assert len(report["variants"]) == 2
        for v in report["variants"].values():
            for m in METRICS:
                stats = v["metrics"][m]
                assert {"mean", "min", "max"} <= set(stats) and len(stats["values"]) == 5
            assert v["seconds_per_epoch_mean"] > 0 and v["epochs_mean"] >= 1
        spe = {v["title"]: v["seconds_per_epoch_mean"] for v in report["variants"].values()}
        notes.append("compare_td s/epoch " + ", ".join(f"{k} {s:.2f}" for k, s in spe.items()))
        elapsed = time.perf_counter() - start
        assert elapsed < 900, f"took {elapsed:.0f}s"


def test_7_early_stopping_contract(smoke_data):
    with criterion(7, "early stopping and best-weight restoration") as notes:
        model = build(ModelSpec(Variant.VANILLA, 3), seed=0)
        sequences = [([1.0, 0.9, 0.95, 0.96, 0.97], 3, 5, 2),
                     ([2.0, 1.5, 1.5, 1.2, 1.3, 1.4], 2, 6, 4),
                     ([0.5, 0.6], 1, 2, 1),
                     ([3.0, 2.0, 1.0], 3, None, 3)]
        rng = np.random.default_rng(0)
        for losses, patience, stop, best in sequences:
            stopper, states, stopped = EarlyStopping(patience), {}, None
            for epoch, loss in enumerate(losses, start=1):
                for p in model.parameters():
                    p.data += rng.standard_normal(p.shape).astype(p.data.dtype) * 0.01
                states[epoch] = model.state_dict()
                if stopper.step(epoch, loss, model):
                    stopped = epoch
                    break
            stopper.restore(model)
            assert (stopped, stopper.best_epoch) == (stop, best), (losses, stopped, stopper.best_epoch)
            now = model.state_dict()
            assert all(now[k].tobytes() == states[best][k].tobytes() for k in now)
            assert stopper.best_loss == min(losses[:stop] if stop else losses)

        tr, va, _ = smoke_data
        cfg = TrainConfig(batch_size=64, max_epochs=4, patience=1, lr=1e-3, seed=2)
        trained, history = train(build(ModelSpec(Variant.VANILLA, 10), seed=2), tr, va, cfg)
        restored_loss, _ = loss_and_accuracy(trained, va, cfg.batch_size)
        assert restored_loss == min(history.val_losses)
        notes.append(f"{len(sequences)} scripted sequences; real run restored epoch "
                     f"{history.best_epoch} of {history.epochs_run}")


def test_8_checkpoint_round_trip(tmp_path):
    with criterion(8, "checkpoint round trip is bitwise") as notes:
        probe = np.random.default_rng(8).uniform(size=(5, 1, 8, 6))
        for variant in Variant:
            model = build(ModelSpec(variant, 141), seed=3)
            for _, t in model.named_buffers():
                t.data[...] = np.random.default_rng(1).uniform(0.5, 1.5, t.shape)
            before = model.predict_proba(probe)
            path = tmp_path / variant.value
            save_checkpoint(model, path)
            loaded = load_checkpoint(path)
            after = loaded.predict_proba(probe)
            assert np.max(np.abs(before - after)) == 0 and before.tobytes() == after.tobytes()
            assert audit_params(loaded).total == audit_params(model).total
        notes.append("both variants, probe outputs and audit totals identical")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
