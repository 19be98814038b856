"""Central finite-difference gradient checking for the autodiff engine.

ReLU and max-pool make the network piecewise smooth. A central difference
is only a valid oracle when x - h, x and x + h fall on the same piece, so
each probe compares the branch fingerprints of the three forward passes.
If they differ the step is shrunk; if no step down to ``min_h`` stays on
one piece the entry is skipped and counted.
"""
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped: int

    def __float__(self):
        return self.max_rel_error

    def __lt__(self, other):
        return self.max_rel_error < other

    def __le__(self, other):
        return self.max_rel_error <= other


def relative_error(analytic, numeric, floor=1e-6):
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def _evaluate(loss_fn):
    with ad.record_branches() as fp:
        value = float(loss_fn().data)
    return value, fp.digest()


def numeric_grad(loss_fn, tensor, h=1e-5, indices=None, min_h=None):
    """Central differences of the scalar ``loss_fn()`` w.r.t. entries of ``tensor``.

    With ``min_h`` set, probes that cross a kink retry with h/10 down to
    ``min_h`` and come back as NaN if they never settle on one piece.
    """
    flat = tensor.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    out = []
    with ad.no_grad():
        _, base = _evaluate(loss_fn)
        for i in indices:
            orig = flat[i]
            step = h
            while True:
                flat[i] = orig + step
                fp, dp = _evaluate(loss_fn)
                flat[i] = orig - step
                fm, dm = _evaluate(loss_fn)
                flat[i] = orig
                if min_h is None or dp == dm == base:
                    out.append((fp - fm) / (2 * step))
                    break
                step /= 10
                if step < min_h:
                    out.append(np.nan)
                    break
    return np.array(out)


def check_gradients(loss_fn, tensors, h=1e-5, max_entries=None, rng=None, floor=1e-6,
                    min_h=1e-7):
    """Compare backward() against central differences.

    ``loss_fn`` must rebuild the scalar loss from scratch on every call.
    At most ``max_entries`` random entries per tensor are probed. Pass
    ``min_h=None`` to disable kink detection.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    with ad.new_graph():
        loss = loss_fn()
        ad.backward(loss)
    worst, checked, skipped = 0.0, 0, 0
    for t in tensors:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
        n = t.size
        if max_entries is None or n <= max_entries:
            idx = np.arange(n)
        else:
            idx = rng.choice(n, size=max_entries, replace=False)
        numeric = numeric_grad(loss_fn, t, h, idx, min_h)
        ok = ~np.isnan(numeric)
        skipped += int((~ok).sum())
        checked += int(ok.sum())
        if ok.any():
            err = relative_error(analytic.reshape(-1)[idx][ok], numeric[ok], floor)
            worst = max(worst, float(err.max()))
    return GradCheckResult(worst, checked, skipped)
