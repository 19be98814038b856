"""Training loop with early stopping, multiclass metrics, and the TD-vs-vanilla harness."""
import csv
import json
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DataError, DivergenceError
from .model import ModelSpec, Variant, build

AVERAGINGS = ("macro", "weighted", "binary")
METRICS = ("accuracy", "precision", "recall", "f1")


@dataclass
class TrainConfig:
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 3
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float
    seconds: float


@dataclass
class History:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def epochs_run(self):
        return len(self.epochs)

    @property
    def val_losses(self):
        return [e.val_loss for e in self.epochs]

    @property
    def seconds_per_epoch(self):
        return float(np.mean([e.seconds for e in self.epochs])) if self.epochs else 0.0

    def to_dict(self):
        return {"best_epoch": self.best_epoch, "stopped_early": self.stopped_early,
                "epochs_run": self.epochs_run, "seconds_per_epoch": self.seconds_per_epoch,
                "epochs": [asdict(e) for e in self.epochs]}


class EarlyStopping:
    """Stop once validation loss has not improved for ``patience`` epochs.

    The model state (weights and batch-norm buffers) of the best epoch is
    snapshotted so it can be restored afterwards.
    """

    def __init__(self, patience=3):
        self.patience = patience
        self.best_loss = np.inf
        self.best_epoch = 0
        self.best_state = None
        self.wait = 0

    def step(self, epoch, val_loss, model=None):
        """Record one epoch; return True when training should stop."""
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.wait = 0
            if model is not None:
                self.best_state = model.state_dict()
            return False
        self.wait += 1
        return self.wait >= self.patience

    def restore(self, model):
        if self.best_state is not None:
            model.load_state_dict(self.best_state)


def _check_split(name, video, model):
    if video is None or len(video) == 0:
        raise ValueError(f"{name} split is empty")
    if video.labels is None:
        raise ValueError(f"{name} split has no labels")
    if video.labels.max() >= model.spec.class_count or video.labels.min() < 0:
        raise DataError(f"{name} split has labels outside [0, {model.spec.class_count})")


def loss_and_accuracy(model, video, batch_size=256):
    """Mean cross-entropy and accuracy in inference mode."""
    total, correct = 0.0, 0
    with ad.no_grad():
        for lo in range(0, len(video), batch_size):
            part = video[lo:lo + batch_size]
            logits = model.forward(part.frames, training=False)
            total += float(ad.softmax_cross_entropy(logits, part.labels).data) * len(part)
            correct += int((logits.data.argmax(axis=1) == part.labels).sum())
    return total / len(video), correct / len(video)


def train(model, train_set, val_set, cfg=None, on_epoch=None):
    """Mini-batch Adam on cross-entropy with validation-loss early stopping.

    After stopping, the weights from the best validation epoch are restored.
    ``on_epoch(stats)`` is called after every epoch.
    """
    cfg = cfg or TrainConfig()
    _check_split("train", train_set, model)
    _check_split("validation", val_set, model)
    rng = np.random.default_rng(cfg.seed)
    opt = ad.Adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    stopper = EarlyStopping(cfg.patience)
    history = History()
    frames = train_set.frames.astype(model.dtype, copy=False)
    labels = train_set.labels
    n = len(train_set)

    for epoch in range(1, cfg.max_epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for b, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            with ad.new_graph():
                logits = model.forward(frames[idx], training=True)
                loss = ad.softmax_cross_entropy(logits, labels[idx])
                value = float(loss.data)
                if not np.isfinite(value):
                    raise DivergenceError(epoch, b, value)
                opt.zero_grad()
                ad.backward(loss)
            opt.step()
            loss_sum += value * len(idx)
            correct += int((logits.data.argmax(axis=1) == labels[idx]).sum())
        val_loss, val_acc = loss_and_accuracy(model, val_set, cfg.batch_size)
        stats = EpochStats(epoch, loss_sum / n, correct / n, val_loss, val_acc,
                           time.perf_counter() - start)
        history.epochs.append(stats)
        if on_epoch is not None:
            on_epoch(stats)
        if stopper.step(epoch, val_loss, model):
            history.stopped_early = True
            break

    stopper.restore(model)
    history.best_epoch = stopper.best_epoch
    return model, history


# ---------------------------------------------------------------- metrics


@dataclass
class ClassStats:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class EvalReport:
    confusion: np.ndarray
    accuracy: float
    precision: float
    recall: float
    f1: float
    averaging: str
    per_class: list
    averages: dict = field(default_factory=dict)
    epochs_run: int = 0
    seconds_per_epoch: float = 0.0

    @property
    def sample_count(self):
        return int(self.confusion.sum())

    def to_dict(self):
        return {
            "accuracy": self.accuracy, "precision": self.precision, "recall": self.recall,
            "f1": self.f1, "averaging": self.averaging, "averages": self.averages,
            "samples": self.sample_count, "epochs_run": self.epochs_run,
            "seconds_per_epoch": self.seconds_per_epoch,
            "per_class": [asdict(c) for c in self.per_class],
            "confusion": self.confusion.tolist(),
        }

    def summary(self):
        lines = [f"samples    {self.sample_count}",
                 f"accuracy   {self.accuracy:.4f}"]
        for avg, vals in self.averages.items():
            lines.append(f"{avg:<10} precision {vals['precision']:.4f}  "
                         f"recall {vals['recall']:.4f}  f1 {vals['f1']:.4f}")
        return "\n".join(lines)


def confusion_matrix(y_true, y_pred, class_count):
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size and (y_true.max() >= class_count or y_true.min() < 0):
        raise DataError(f"label id outside [0, {class_count})")
    flat = y_true * class_count + y_pred
    return np.bincount(flat, minlength=class_count ** 2).reshape(class_count, class_count)


def _div(a, b):
    return np.divide(a, b, out=np.zeros_like(a, dtype=np.float64), where=b != 0)


def per_class_stats(confusion):
    """Precision, recall, F1 and support per class (one-vs-rest, 0 on empty denominators)."""
    cm = np.asarray(confusion, dtype=np.float64)
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    precision = _div(tp, tp + fp)
    recall = _div(tp, tp + fn)
    f1 = _div(2 * precision * recall, precision + recall)
    support = cm.sum(axis=1)
    return precision, recall, f1, support


def _aggregate(precision, recall, f1, support, averaging):
    if averaging == "macro":
        return float(precision.mean()), float(recall.mean()), float(f1.mean())
    if averaging == "weighted":
        w = support / support.sum() if support.sum() else np.zeros_like(support)
        return float(precision @ w), float(recall @ w), float(f1 @ w)
    if averaging == "binary":
        if len(precision) != 2:
            raise ValueError("binary averaging needs exactly 2 classes")
        return float(precision[1]), float(recall[1]), float(f1[1])
    raise ValueError(f"unknown averaging {averaging!r}; choose from {AVERAGINGS}")


def report_from_confusion(confusion, averaging="macro"):
    """Metrics from a (true x predicted) count matrix.

    ``binary`` treats class 1 as the positive class, matching the
    two-class TP/FP/FN/TN formulas directly.
    """
    confusion = np.asarray(confusion, dtype=np.int64)
    p, r, f, s = per_class_stats(confusion)
    total = confusion.sum()
    accuracy = float(np.trace(confusion) / total) if total else 0.0
    averages = {}
    for avg in ("macro", "weighted"):
        ap, ar, af = _aggregate(p, r, f, s, avg)
        averages[avg] = {"precision": ap, "recall": ar, "f1": af}
    ap, ar, af = _aggregate(p, r, f, s, averaging)
    averages.setdefault(averaging, {"precision": ap, "recall": ar, "f1": af})
    per_class = [ClassStats(float(a), float(b), float(c), int(d)) for a, b, c, d in zip(p, r, f, s)]
    return EvalReport(confusion, accuracy, ap, ar, af, averaging, per_class, averages)


def evaluate(model, test_set, averaging="macro", batch_size=256, history=None):
    """Confusion matrix and aggregate metrics from argmax predictions.

    ``np.argmax`` returns the first maximum, so ties go to the lowest class id.
    """
    if test_set is None or len(test_set) == 0:
        raise ValueError("test split is empty")
    C = model.spec.class_count
    if test_set.labels.max() >= C or test_set.labels.min() < 0:
        raise DataError(f"test labels outside [0, {C})")
    probs = model.predict_proba(test_set.frames, batch_size=batch_size)
    report = report_from_confusion(confusion_matrix(test_set.labels, probs.argmax(axis=1), C),
                                   averaging)
    if history is not None:
        report.epochs_run = history.epochs_run
        report.seconds_per_epoch = history.seconds_per_epoch
    return report


# ---------------------------------------------------------------- comparison


def compare_td(train_set, val_set, test_set, cfg=None, repeats=5, class_count=None,
               input_shape=(1, 8, 6), averaging="macro", out_dir=None, log=None):
    """Train both variants ``repeats`` times on the same splits and summarise.

    Repeat r uses the r-th child of ``SeedSequence(cfg.seed)`` for weight
    initialisation and batch shuffling; both variants share that seed.
    """
    cfg = cfg or TrainConfig()
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    C = class_count or int(max(train_set.labels.max(), val_set.labels.max(), test_set.labels.max()) + 1)
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(cfg.seed).spawn(repeats)]
    variants = {}
    for variant in (Variant.TD, Variant.VANILLA):
        runs = []
        for r, seed in enumerate(seeds):
            model = build(ModelSpec(variant=variant, class_count=C, input_shape=input_shape), seed=seed)
            run_cfg = TrainConfig(**{**asdict(cfg), "seed": seed})
            model, hist = train(model, train_set, val_set, run_cfg)
            rep = evaluate(model, test_set, averaging, cfg.batch_size, hist)
            runs.append({"repeat": r, "seed": seed, "epochs_run": hist.epochs_run,
                         "best_epoch": hist.best_epoch,
                         "seconds_per_epoch": hist.seconds_per_epoch,
                         **{m: getattr(rep, m) for m in METRICS}})
            if log:
                log(f"{variant.title} run {r + 1}/{repeats}: accuracy {rep.accuracy:.4f}, "
                    f"{hist.epochs_run} epochs, {hist.seconds_per_epoch:.2f} s/epoch")
        summary = {}
        for m in METRICS:
            vals = np.array([run[m] for run in runs])
            summary[m] = {"mean": float(vals.mean()), "min": float(vals.min()),
                          "max": float(vals.max()), "values": vals.tolist()}
        variants[variant.value] = {
            "title": variant.title,
            "metrics": summary,
            "seconds_per_epoch_mean": float(np.mean([r["seconds_per_epoch"] for r in runs])),
            "epochs_mean": float(np.mean([r["epochs_run"] for r in runs])),
            "runs": runs,
        }
    report = {"repeats": repeats, "averaging": averaging, "class_count": C,
              "split_sizes": [len(train_set), len(val_set), len(test_set)],
              "config": asdict(cfg), "variants": variants}
    if out_dir is not None:
        write_comparison(report, out_dir)
    return report


def comparison_table(report):
    head = f"{'Model':<20}" + "".join(f"{m:>22}" for m in METRICS) + f"{'s/epoch':>10}{'epochs':>8}"
    lines = [head, "-" * len(head)]
    for v in report["variants"].values():
        cells = "".join(
            f"{v['metrics'][m]['mean']:>10.4f} [{v['metrics'][m]['min']:.3f},{v['metrics'][m]['max']:.3f}]"
            for m in METRICS)
        lines.append(f"{v['title']:<20}{cells}{v['seconds_per_epoch_mean']:>10.2f}{v['epochs_mean']:>8.1f}")
    return "\n".join(lines)


def write_comparison(report, out_dir):
    """comparison.json, comparison.txt, and bar-chart data (mean with min/max error)."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "comparison.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
    with open(os.path.join(out_dir, "comparison.txt"), "w", encoding="utf-8") as fh:
        fh.write(comparison_table(report) + "\n")
    with open(os.path.join(out_dir, "plot_data.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "metric", "mean", "err_minus", "err_plus"])
        for v in report["variants"].values():
            for m in METRICS:
                s = v["metrics"][m]
                w.writerow([v["title"], m, s["mean"], s["mean"] - s["min"], s["max"] - s["mean"]])
