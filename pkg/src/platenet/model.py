"""Sequential model: architecture spec, build, summary and the ``.pnw`` weight file.

Weight file layout (all integers little-endian)::

    magic        8 bytes   b"PLATENET"
    version      u32       FORMAT_VERSION
    spec_len     u32       byte length of the spec block
    spec block   input height, width, channels (3 x u32), layer count (u32),
                 then per layer: u32 length + UTF-8 JSON object with "kind"
                 and the layer hyperparameters (keys sorted)
    n_tensors    u32
    per tensor   rank (u32), extents (rank x u32), raw float32 data
    checksum     u64       BLAKE2b-64 of every preceding byte
"""

import copy
import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from platenet.errors import BuildError, FormatError, ShapeError, StructureError, UnsupportedVersionError
from platenet.layers import LAYER_TYPES, Dropout

MAGIC = b"PLATENET"
FORMAT_VERSION = 1
DEFAULT_IMAGE_SIZE = 300
DEFAULT_SEED = 123

_TYPE_LABELS = {
    "conv2d": "Conv2D",
    "max_pooling2d": "MaxPooling2D",
    "flatten": "Flatten",
    "dense": "Dense",
    "dropout": "Dropout",
}


@dataclass
class ModelSpec:
    """Input size ``(height, width, channels)`` plus an ordered list of layer configs.

    Each layer config is a dict with a ``"kind"`` key (one of
    ``conv2d``, ``max_pooling2d``, ``flatten``, ``dense``, ``dropout``) and the
    keyword arguments of the matching layer class.
    """

    input_size: tuple = (DEFAULT_IMAGE_SIZE, DEFAULT_IMAGE_SIZE, 1)
    layers: list = field(default_factory=list)

    def __post_init__(self):
        self.input_size = tuple(int(d) for d in self.input_size)
        self.layers = [dict(cfg) for cfg in self.layers]


def default_spec(image_size=DEFAULT_IMAGE_SIZE):
    """The inspection network: two conv/pool stages, two dense+dropout stages, sigmoid head."""
    if isinstance(image_size, int):
        image_size = (image_size, image_size)
    return ModelSpec(
        input_size=(image_size[0], image_size[1], 1),
        layers=[
            {"kind": "conv2d", "filters": 32, "kernel_size": 3, "stride": 2, "activation": "relu"},
            {"kind": "max_pooling2d", "pool_size": 2, "stride": 2},
            {"kind": "conv2d", "filters": 16, "kernel_size": 3, "stride": 2, "activation": "relu"},
            {"kind": "max_pooling2d", "pool_size": 2, "stride": 2},
            {"kind": "flatten"},
            {"kind": "dense", "units": 128, "activation": "relu"},
            {"kind": "dropout", "rate": 0.2},
            {"kind": "dense", "units": 64, "activation": "relu"},
            {"kind": "dropout", "rate": 0.2},
            {"kind": "dense", "units": 1, "activation": "sigmoid"},
        ],
    )


@dataclass
class SummaryRow:
    name: str
    layer_type: str
    output_shape: tuple
    params: int


@dataclass
class Summary:
    rows: list
    total_params: int
    trainable_params: int
    non_trainable_params: int = 0

    def render(self):
        lines = [f"{'Layer (type)':<32}{'Output Shape':<26}{'Param #':>10}", "=" * 68]
        for row in self.rows:
            shape = "(None, " + ", ".join(str(d) for d in row.output_shape) + ")"
            lines.append(f"{row.name + ' (' + row.layer_type + ')':<32}{shape:<26}{row.params:>10}")
        lines += [
            "=" * 68,
            f"Total params: {self.total_params:,}",
            f"Trainable params: {self.trainable_params:,}",
            f"Non-trainable params: {self.non_trainable_params:,}",
        ]
        return "\n".join(lines)


class Model:
    """An ordered stack of built layers."""

    def __init__(self, spec, layers, output_shapes):
        self.spec = spec
        self.layers = layers
        self.output_shapes = output_shapes

    @property
    def input_size(self):
        return self.spec.input_size

    def parameters(self):
        """Yield ``(layer, name, array)`` for every trainable tensor, in file order."""
        for layer in self.layers:
            for key in ("weights", "bias"):
                if key in layer.params:
                    yield layer, key, layer.params[key]

    @property
    def param_count(self):
        return sum(layer.param_count for layer in self.layers)

    def summary(self):
        rows = [SummaryRow(layer.name, _TYPE_LABELS.get(layer.kind, layer.kind), shape, layer.param_count)
                for layer, shape in zip(self.layers, self.output_shapes)]
        total = sum(r.params for r in rows)
        return Summary(rows, total, total, 0)

    def forward(self, x, training=False):
        expected = self.spec.input_size
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeError(f"expected input (N, {', '.join(map(str, expected))}), got {x.shape}")
        for layer in self.layers:
            x = layer.forward(x, training=training)
        return x

    __call__ = forward

    def backward(self, grad_out, from_logits=False):
        """Backpropagate ``grad_out`` from the model output, filling ``layer.grads``.

        With ``from_logits=True`` the gradient is taken as already being with
        respect to the last layer's pre-activation (fused sigmoid + BCE).
        """
        g = grad_out
        last = len(self.layers) - 1
        for i in range(last, -1, -1):
            layer = self.layers[i]
            kwargs = {"need_input_grad": i > 0}
            if i == last and from_logits:
                kwargs["skip_activation"] = True
            g = layer.backward(g, **kwargs)
        return g

    def predict(self, x, batch_size=64):
        """Inference in chunks; returns ``(N, 1)`` probabilities."""
        outs = [self.forward(x[i:i + batch_size], training=False) for i in range(0, len(x), batch_size)]
        return np.concatenate(outs, axis=0)

    def get_weights(self):
        return [arr.copy() for _, _, arr in self.parameters()]

    def set_weights(self, arrays):
        slots = list(self.parameters())
        if len(arrays) != len(slots):
            raise StructureError(f"expected {len(slots)} tensors, got {len(arrays)}")
        for (layer, key, current), new in zip(slots, arrays):
            if current.shape != new.shape:
                raise StructureError(f"{layer.name}.{key}: expected shape {current.shape}, got {new.shape}")
            layer.params[key] = np.array(new, dtype=current.dtype)

    def astype(self, dtype):
        """Deep copy with all parameters cast to ``dtype`` (used for gradient checks)."""
        clone = copy.deepcopy(self)
        for layer in clone.layers:
            layer.astype(dtype)
        return clone

    def __repr__(self):
        return f"Model(input_size={self.spec.input_size}, layers={len(self.layers)}, params={self.param_count})"


def build(spec, seed=DEFAULT_SEED):
    """Instantiate and initialise every layer of ``spec`` deterministically from ``seed``.

    Raises :class:`BuildError` naming the first layer whose input is too small.
    """
    weight_rng = np.random.default_rng(seed)
    dropout_seeds = np.random.SeedSequence([seed, 1])
    counters = {}
    layers, shapes = [], []
    shape = spec.input_size
    for cfg in spec.layers:
        cfg = dict(cfg)
        kind = cfg.pop("kind")
        if kind not in LAYER_TYPES:
            raise BuildError(f"unknown layer kind {kind!r}")
        if kind == "dropout":
            layer = Dropout(rng=np.random.default_rng(dropout_seeds.spawn(1)[0]), **cfg)
        else:
            layer = LAYER_TYPES[kind](**cfg)
        counters[kind] = counters.get(kind, 0) + 1
        layer.name = f"{kind}_{counters[kind]}"
        shape = layer.build(shape, weight_rng)
        layers.append(layer)
        shapes.append(tuple(shape))
    return Model(spec, layers, shapes)


# ---------------------------------------------------------------- serialization


def _encode_spec(spec):
    out = [struct.pack("<4I", *spec.input_size, len(spec.layers))]
    for cfg in spec.layers:
        record = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
        out.append(struct.pack("<I", len(record)))
        out.append(record)
    return b"".join(out)


def _checksum(data):
    return hashlib.blake2b(data, digest_size=8).digest()


def dumps(model):
    """Serialise ``model`` to the ``.pnw`` byte format."""
    spec_block = _encode_spec(model.spec)
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(spec_block)), spec_block]
    tensors = [arr for _, _, arr in model.parameters()]
    parts.append(struct.pack("<I", len(tensors)))
    for arr in tensors:
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + _checksum(body)


def save(model, path):
    """Write ``model`` to ``path`` atomically (temporary file + rename)."""
    data = dumps(model)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".pnw-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def loads(data, expected_spec=None):
    """Parse ``.pnw`` bytes into a fresh :class:`Model`; nothing is returned on error."""
    reader = _Reader(data)
    if reader.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("bad magic, not a platenet weight file", 0)
    version_offset = reader.pos
    version = reader.u32("format version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported format version {version}", version_offset)
    if len(data) < reader.pos + 8:
        raise FormatError("truncated file, no room for checksum", len(data))
    body, stored = data[:-8], data[-8:]
    if _checksum(body) != stored:
        raise FormatError("checksum mismatch (file truncated or corrupted)", len(data) - 8)
    reader.data = body

    spec_len = reader.u32("spec length")
    spec_start = reader.pos
    h, w, c, n_layers = struct.unpack("<4I", reader.take(16, "input size"))
    layer_cfgs = []
    for i in range(n_layers):
        rec_offset = reader.pos
        record = reader.take(reader.u32(f"layer {i} record length"), f"layer {i} record")
        try:
            cfg = json.loads(record.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"layer {i} record is not valid JSON: {exc}", rec_offset) from None
        if not isinstance(cfg, dict) or "kind" not in cfg:
            raise FormatError(f"layer {i} record has no kind", rec_offset)
        layer_cfgs.append(cfg)
    if reader.pos - spec_start != spec_len:
        raise FormatError("spec block length does not match its contents", spec_start)
    spec = ModelSpec(input_size=(h, w, c), layers=layer_cfgs)
    if expected_spec is not None and spec != expected_spec:
        raise StructureError(f"file architecture {spec} does not match expected {expected_spec}")

    n_tensors = reader.u32("tensor count")
    tensors = []
    for i in range(n_tensors):
        rank = reader.u32(f"tensor {i} rank")
        if not 1 <= rank <= 4:
            raise FormatError(f"tensor {i} has invalid rank {rank}", reader.pos - 4)
        shape = struct.unpack(f"<{rank}I", reader.take(4 * rank, f"tensor {i} extents"))
        count = int(np.prod(shape))
        raw = reader.take(4 * count, f"tensor {i} data")
        tensors.append(np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape))
    if reader.pos != len(body):
        raise FormatError("trailing bytes after last tensor", reader.pos)

    try:
        model = build(spec, seed=0)
    except (BuildError, TypeError, ValueError) as exc:
        raise StructureError(f"stored architecture cannot be built: {exc}") from None
    model.set_weights(tensors)
    return model


def load(path, expected_spec=None):
    with open(path, "rb") as fh:
        data = fh.read()
    return loads(data, expected_spec)
