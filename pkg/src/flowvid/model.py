"""Conv-LSTM-TD(MLP) and Conv-LSTM-MLP assembly, parameter audit, checkpoints."""
import json
import os
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import autodiff as ad
from .errors import AuditError, IntegrityError, ShapeError, VersionError
from .layers import LSTM, ConvBlock, Dense, Flatten, TimeDistributed

CHECKPOINT_FORMAT = "flowvid-checkpoint"
CHECKPOINT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "tensors.bin"


class Variant(str, Enum):
    TD = "conv-lstm-td-mlp"
    VANILLA = "conv-lstm-mlp"

    @property
    def title(self):
        return "Conv-LSTM-TD(MLP)" if self is Variant.TD else "Conv-LSTM-MLP"


@dataclass
class ModelSpec:
    variant: Variant = Variant.TD
    class_count: int = 141
    input_shape: tuple = (1, 8, 6)
    conv_blocks: int = 4
    conv_units: int = 64
    kernel: tuple = (2, 2)
    lstm_units: int = 100
    mlp_units: int = 64
    mlp_layers: int = 3

    def __post_init__(self):
        self.variant = Variant(self.variant)
        self.input_shape = tuple(self.input_shape)
        self.kernel = tuple(self.kernel)


class Model:
    def __init__(self, spec, layers, dtype):
        self.spec = spec
        self.layers = layers
        self.dtype = dtype

    def parameters(self):
        return [t for layer in self.layers for t in layer.params.values()]

    def named_parameters(self):
        return [(t.name, t) for t in self.parameters()]

    def named_buffers(self):
        return [(t.name, t) for layer in self.layers for t in layer.buffers.values()]

    def named_tensors(self):
        return self.named_parameters() + self.named_buffers()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def forward(self, x, training=False, trace=None):
        """Logits for a (N, 1, K, W) batch. ``trace`` collects (layer, shape) pairs."""
        if not isinstance(x, ad.Tensor):
            x = ad.Tensor(x, dtype=self.dtype)
        if x.shape[1:] != self.spec.input_shape:
            raise ShapeError(f"model expects (N, {self.spec.input_shape}), got {x.shape}")
        for layer in self.layers:
            if trace is not None and isinstance(layer, LSTM) and x.ndim == 2:
                trace.append((f"{layer.name}.input", (x.shape[0], x.shape[1], 1)))
            x = layer(x, training)
            if trace is not None:
                trace.append((layer.name, x.shape))
        return x

    __call__ = forward

    def predict_proba(self, x, batch_size=256, trace=None):
        """Class probabilities in inference mode (running batch-norm statistics)."""
        x = np.asarray(x, dtype=self.dtype)
        out = []
        with ad.no_grad():
            for lo in range(0, len(x), batch_size):
                logits = self.forward(x[lo:lo + batch_size], training=False,
                                      trace=trace if lo == 0 else None)
                out.append(ad.softmax(logits).data)
        if trace is not None and out:
            trace.append(("softmax", (len(x), out[0].shape[1])))
        return np.concatenate(out) if out else np.zeros((0, self.spec.class_count), self.dtype)

    def state_dict(self):
        return {name: t.data.copy() for name, t in self.named_tensors()}

    def load_state_dict(self, state):
        for name, t in self.named_tensors():
            t.data[...] = state[name]


def conv_output_hw(spec):
    _, k, w = spec.input_shape
    return k - spec.conv_blocks, w - spec.conv_blocks


def build(spec, seed=0, dtype=np.float32):
    """Instantiate either variant with Glorot-uniform weights, zero biases and
    LSTM forget bias 1.0. Deterministic in ``seed``."""
    spec = spec if isinstance(spec, ModelSpec) else ModelSpec(**spec)
    if spec.class_count < 2:
        raise ValueError(f"class_count must be >= 2, got {spec.class_count}")
    channels, _, _ = spec.input_shape
    h, w = conv_output_hw(spec)
    if h < 1 or w < 1:
        raise ShapeError(f"input {spec.input_shape[1:]} too small for {spec.conv_blocks} conv blocks")
    rng = np.random.default_rng(seed)
    layers = []
    in_ch = channels
    for i in range(spec.conv_blocks):
        layers.append(ConvBlock(i, in_ch, spec.conv_units, spec.kernel, rng, dtype))
        in_ch = spec.conv_units
    layers.append(Flatten("Flatten"))
    steps = spec.conv_units * h * w
    td = spec.variant is Variant.TD
    layers.append(LSTM("LSTM", 1, spec.lstm_units, return_sequences=td, rng=rng, dtype=dtype))
    width = spec.lstm_units
    for i in range(spec.mlp_layers):
        dense = Dense(f"MLP_{i}", width, spec.mlp_units, "relu", rng, dtype)
        layers.append(TimeDistributed(dense) if td else dense)
        width = spec.mlp_units
    if td:
        layers.append(Flatten("Flatten"))
        head = Dense(f"MLP_{spec.mlp_layers}", steps * width, spec.class_count, None, rng, dtype,
                     input_desc=f"{steps}×{width}")
    else:
        head = Dense(f"MLP_{spec.mlp_layers}", width, spec.class_count, None, rng, dtype)
    layers.append(head)
    return Model(spec, layers, dtype)


@dataclass
class AuditRow:
    layer: str
    formula: str
    count: int


@dataclass
class ParamAudit:
    variant: Variant
    class_count: int
    rows: list = field(default_factory=list)

    @property
    def total(self):
        return sum(r.count for r in self.rows)

    @property
    def counts(self):
        return [r.count for r in self.rows]

    def table(self):
        name_w = max(len("Network"), *(len(r.layer) for r in self.rows))
        form_w = max(len("Calculation"), *(len(r.formula) for r in self.rows))
        lines = [f"{'Network':<{name_w}}  {'Calculation':<{form_w}}  Trainable parameters",
                 "-" * (name_w + form_w + 24)]
        lines += [f"{r.layer:<{name_w}}  {r.formula:<{form_w}}  {r.count}" for r in self.rows]
        lines.append("-" * (name_w + form_w + 24))
        lines.append(f"{'Total':<{name_w}}  {'':<{form_w}}  {self.total:,}")
        return "\n".join(lines)


def audit_params(model):
    """Per-layer trainable-parameter ledger, by closed form and by enumeration.

    Raises AuditError naming the first layer where the two disagree.
    """
    audit = ParamAudit(model.spec.variant, model.spec.class_count)
    seen = set()
    for layer in model.layers:
        for sub in layer.sublayers:
            by_formula = sub.param_count()
            by_count = sub.enumerated_count()
            if by_formula != by_count:
                raise AuditError(f"{sub.name}: formula gives {by_formula}, tensors hold {by_count}")
            for t in sub.params.values():
                if id(t) in seen:
                    raise AuditError(f"{sub.name}: tensor {t.name} already counted")
                seen.add(id(t))
            audit.rows.append(AuditRow(sub.name, sub.formula(), by_formula))
    trainable = {id(t) for t in model.parameters() if t.requires_grad}
    if trainable != seen:
        raise AuditError("some trainable tensors do not appear in the ledger")
    return audit


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model, path, metrics=None, extra=None):
    """Write ``manifest.json`` plus one little-endian float32 blob into directory ``path``."""
    os.makedirs(path, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for kind, named in (("param", model.named_parameters()), ("buffer", model.named_buffers())):
        for name, t in named:
            entries.append({"name": name, "kind": kind, "shape": list(t.shape), "offset": offset})
            chunks.append(np.ascontiguousarray(t.data, dtype="<f4").ravel())
            offset += t.size
    spec = model.spec
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "variant": spec.variant.value,
        "class_count": spec.class_count,
        "K": spec.input_shape[1],
        "W": spec.input_shape[2],
        "dtype": "<f4",
        "element_count": offset,
        "tensors": entries,
        "metrics": metrics or {},
        "extra": extra or {},
    }
    blob = np.concatenate(chunks) if chunks else np.zeros(0, "<f4")
    with open(os.path.join(path, BLOB_NAME), "wb") as fh:
        fh.write(blob.tobytes())
    with open(os.path.join(path, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


def read_manifest(path):
    with open(os.path.join(path, MANIFEST_NAME), encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise VersionError(f"{path}: not a flowvid checkpoint")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
    return manifest


def load_checkpoint(path):
    manifest = read_manifest(path)
    with open(os.path.join(path, BLOB_NAME), "rb") as fh:
        raw = fh.read()
    expected = manifest["element_count"] * 4
    if len(raw) != expected:
        raise IntegrityError(f"{path}: blob holds {len(raw)} bytes, manifest needs {expected}")
    blob = np.frombuffer(raw, dtype="<f4")
    spec = ModelSpec(variant=manifest["variant"], class_count=manifest["class_count"],
                     input_shape=(1, manifest["K"], manifest["W"]))
    model = build(spec, seed=0, dtype=np.float32)
    tensors = dict(model.named_tensors())
    if set(tensors) != {e["name"] for e in manifest["tensors"]}:
        raise IntegrityError(f"{path}: tensor names do not match the {spec.variant.value} layout")
    for e in manifest["tensors"]:
        t = tensors[e["name"]]
        n = int(np.prod(e["shape"], dtype=np.int64))
        if tuple(e["shape"]) != t.shape or e["offset"] + n > blob.size:
            raise IntegrityError(f"{path}: entry {e['name']} has inconsistent shape/offset")
        t.data[...] = blob[e["offset"]:e["offset"] + n].reshape(e["shape"])
    return model
