"""
Flows as grayscale images
=========================

Each flow is a vector of 48 statistics. Laid out row-major on the most
square factor grid (8 x 6) it becomes a tiny grayscale picture, and a batch
of flows becomes a stack of frames.
"""
import os
import sys

import numpy as np

from flowvid.flowdata import SplitSpec, make_synthetic, prepare
from flowvid.representation import choose_factors, export_png, pack_video, reshape_flow

out_dir = sys.argv[1] if len(sys.argv) > 1 else "demo_out/images"
os.makedirs(out_dir, exist_ok=True)

# A synthetic stand-in for a flow table: 4 classes, 25 flows each.
records, meta = make_synthetic(classes=4, per_class=25, feature_count=48, seed=0)

# Raw features span many orders of magnitude, so scale them to [0, 1]
# with statistics from the training part only.
splits = prepare(records, meta, SplitSpec(seed=0))
print("split sizes:", splits.sizes)

K, W = choose_factors(meta.feature_count)
print(f"{meta.feature_count} features -> {K} x {W} image")

# Row j of the image is simply the j-th run of W consecutive features.
first = splits.train[0]
image = reshape_flow(first.features, K, W)
np.set_printoptions(precision=2, suppress=True)
print(image.pixels)
assert np.array_equal(image.flatten(), first.features)

# The whole training split as a (N, 1, K, W) "video".
video = pack_video(splits.train, K, W)
print("video frames:", video.frames.shape)

# One PNG per class, so the class structure is visible by eye.
for label in range(meta.class_count):
    n = int(np.flatnonzero(video.labels == label)[0])
    path = os.path.join(out_dir, f"{meta.class_names[label]}.png")
    export_png(reshape_flow(splits.train[n].features, K, W), path)
    print("wrote", path)
