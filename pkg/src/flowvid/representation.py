"""Flow vector -> K x W grayscale image -> stack of frames ("video stream")."""
import warnings
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import ShapeError


class DegenerateShapeWarning(UserWarning):
    """The feature count is prime, so the image collapses to a single column."""


class Factors(NamedTuple):
    rows: int
    cols: int


def choose_factors(feature_count):
    """Factor pair (K, W) with K >= W and K - W minimal (closest to square)."""
    if feature_count < 1:
        raise ValueError(f"feature_count must be >= 1, got {feature_count}")
    w = int(np.sqrt(feature_count))
    while feature_count % w:
        w -= 1
    k = feature_count // w
    if w == 1 and feature_count > 3:
        warnings.warn(f"{feature_count} features is prime; image degenerates to {k}x1",
                      DegenerateShapeWarning, stacklevel=2)
    return Factors(k, w)


@dataclass
class FlowImage:
    pixels: np.ndarray

    @property
    def K(self):
        return self.pixels.shape[0]

    @property
    def W(self):
        return self.pixels.shape[1]

    def flatten(self):
        return self.pixels.reshape(-1)


def reshape_flow(x, K, W):
    """Row-major fill: row j holds x[j*W:(j+1)*W]. Values are copied unchanged."""
    x = np.asarray(x)
    if x.ndim != 1 or K * W != x.shape[0]:
        raise ShapeError(f"cannot lay out {x.size} features as {K}x{W} (= {K * W})")
    return FlowImage(x.reshape(K, W).copy())


@dataclass
class FlowVideo:
    """N single-channel K x W frames, optionally with their class ids."""

    frames: np.ndarray
    labels: Optional[np.ndarray] = None

    def __len__(self):
        return self.frames.shape[0]

    def __getitem__(self, idx):
        labels = None if self.labels is None else self.labels[idx]
        return FlowVideo(self.frames[idx], labels)


def pack_video(records, K=8, W=6, dtype=np.float32):
    frames = np.zeros((len(records), 1, K, W), dtype=dtype)
    labels = np.zeros(len(records), dtype=np.int64)
    for n, r in enumerate(records):
        if r.features.shape != (K * W,):
            raise ShapeError(f"record {n} has {r.features.size} features, expected {K * W}")
        frames[n, 0] = reshape_flow(r.features, K, W).pixels
        labels[n] = r.label_id
    return FlowVideo(frames, labels)


def to_gray_levels(pixels):
    """Map [0, 1] reals to 8-bit gray with round-half-up."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.size and (pixels.min() < 0 or pixels.max() > 1):
        raise ValueError("pixel values must lie in [0, 1]")
    return np.floor(pixels * 255 + 0.5).astype(np.uint8)


def export_png(image, path):
    from PIL import Image

    Image.fromarray(to_gray_levels(image.pixels)).save(path, format="PNG")
