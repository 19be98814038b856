"""
Training, evaluation, and the TD-versus-vanilla comparison
==========================================================

Desk-scale version of the full protocol: an 80/10/10 split, Adam on
cross-entropy, early stopping on validation loss, then macro-averaged
metrics on the held-out part. Takes a few minutes on one CPU core.
"""
import sys

from flowvid.flowdata import SplitSpec, make_synthetic, prepare
from flowvid.model import ModelSpec, Variant, build
from flowvid.representation import pack_video
from flowvid.training import TrainConfig, compare_td, comparison_table, evaluate, train

out_dir = sys.argv[1] if len(sys.argv) > 1 else "demo_out/compare"

records, meta = make_synthetic(classes=10, per_class=50, seed=7)
splits = prepare(records, meta, SplitSpec(seed=0))
train_set, val_set, test_set = (pack_video(p) for p in (splits.train, splits.val, splits.test))

cfg = TrainConfig(batch_size=32, max_epochs=60, patience=5, lr=1e-4, seed=1)
model = build(ModelSpec(Variant.TD, meta.class_count), seed=cfg.seed)
model, history = train(model, train_set, val_set, cfg,
                       on_epoch=lambda s: print(f"epoch {s.epoch:2d}  loss {s.train_loss:.4f}  "
                                                f"val_loss {s.val_loss:.4f}  "
                                                f"val_acc {s.val_accuracy:.3f}"))
print(f"best epoch {history.best_epoch} of {history.epochs_run}")

report = evaluate(model, test_set, averaging="macro", history=history)
print(report.summary())

# Both variants, several seeds each, same splits. Kept short here; the
# report also lands in out_dir as JSON, a text table and bar-chart data.
short = TrainConfig(batch_size=32, max_epochs=8, patience=3, lr=1e-4, seed=0)
summary = compare_td(train_set, val_set, test_set, short, repeats=3, out_dir=out_dir, log=print)
print(comparison_table(summary))
