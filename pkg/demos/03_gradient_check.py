"""
Checking the autodiff engine against finite differences
=======================================================

Backward passes are hand-written, so each one is compared with central
differences in 64-bit precision. ReLU and max-pool are only piecewise
smooth: probes that straddle a kink are retried with a smaller step, and
skipped if no step keeps them on one piece.
"""
import numpy as np

from flowvid import autodiff as ad
from flowvid.autodiff import Tensor
from flowvid.gradcheck import check_gradients
from flowvid.model import ModelSpec, Variant, build

rng = np.random.default_rng(0)
f64 = np.float64

# A single primitive: an LSTM scan over a short sequence.
x = Tensor(rng.standard_normal((2, 6, 3)), requires_grad=True, dtype=f64)
kernel = Tensor(rng.standard_normal((3, 16)), requires_grad=True, dtype=f64)
recurrent = Tensor(rng.standard_normal((4, 16)), requires_grad=True, dtype=f64)
bias = Tensor(rng.standard_normal(16), requires_grad=True, dtype=f64)
proj = Tensor(rng.standard_normal((2, 6, 4)), dtype=f64)


def lstm_loss():
    return ad.sum(ad.mul(ad.lstm(x, kernel, recurrent, bias), proj))


print("lstm:", check_gradients(lstm_loss, [x, kernel, recurrent, bias]))

# A whole network, end to end, through cross-entropy.
for variant in Variant:
    model = build(ModelSpec(variant, class_count=3), seed=1, dtype=f64)
    frames = Tensor(rng.uniform(size=(2, 1, 8, 6)), requires_grad=True, dtype=f64)
    labels = np.array([0, 2])

    def loss():
        return ad.softmax_cross_entropy(model.forward(frames, training=True), labels)

    result = check_gradients(loss, [frames] + model.parameters(), max_entries=2)
    print(f"{variant.title}: {result}")
