"""Shared residual encoder with one FCN-upscore decoder head per protocol."""
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InputError, InternalError
from .tensor import (
    RunningStats,
    Tensor,
    active_tape,
    batch_norm,
    conv3d,
    leaky_relu,
    upsample2x,
)


def _reject_unknown(cls, data, where):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"unknown keys in {where}: {', '.join(unknown)}")


@dataclass
class EncoderConfig:
    n_scales: int = 4
    n_units: int = 2
    strides: tuple = (1, 2, 2, 2)
    filters: tuple = (16, 32, 64, 128)
    initial_kernel: int = 3
    alpha: float = 0.1

    def __post_init__(self):
        self.strides = tuple(int(s) for s in self.strides)
        self.filters = tuple(int(f) for f in self.filters)
        self.validate()

    def validate(self):
        if self.n_scales < 1 or self.n_units < 1:
            raise ConfigurationError("n_scales and n_units must be positive")
        if len(self.strides) != self.n_scales or len(self.filters) != self.n_scales:
            raise ConfigurationError(
                f"strides ({len(self.strides)}) and filters ({len(self.filters)}) "
                f"must both have n_scales={self.n_scales} entries")
        if any(f <= 0 for f in self.filters):
            raise ConfigurationError("filters must be strictly positive")
        if any(s not in (1, 2) for s in self.strides):
            raise ConfigurationError("strides must be 1 or 2")
        if self.initial_kernel < 1 or self.initial_kernel % 2 == 0:
            raise ConfigurationError("initial_kernel must be a positive odd integer")

    @property
    def total_stride(self):
        return int(np.prod(self.strides))

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["strides"] = list(self.strides)
        d["filters"] = list(self.filters)
        return d

    @classmethod
    def from_dict(cls, data):
        _reject_unknown(cls, data, "encoder config")
        return cls(**data)


@dataclass
class DecoderSpec:
    protocol_name: str
    n_classes: int

    def __post_init__(self):
        if not self.protocol_name:
            raise ConfigurationError("decoder protocol_name must be non-empty")
        if int(self.n_classes) < 2:
            raise ConfigurationError(f"decoder {self.protocol_name!r}: n_classes must be >= 2")
        self.n_classes = int(self.n_classes)

    def to_dict(self):
        return {"protocol_name": self.protocol_name, "n_classes": self.n_classes}

    @classmethod
    def from_dict(cls, data):
        _reject_unknown(cls, data, "decoder spec")
        return cls(**data)


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoders: list = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.decoders:
            raise ConfigurationError("a model needs at least one decoder")
        names = [d.protocol_name for d in self.decoders]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ConfigurationError(f"duplicate protocol names: {', '.join(dupes)}")

    @property
    def protocols(self):
        return [d.protocol_name for d in self.decoders]

    def to_dict(self):
        return {
            "encoder": self.encoder.to_dict(),
            "decoders": [d.to_dict() for d in self.decoders],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data):
        _reject_unknown(cls, data, "model config")
        enc = EncoderConfig.from_dict(data.get("encoder", {}))
        decs = [DecoderSpec.from_dict(d) for d in data.get("decoders", [])]
        return cls(encoder=enc, decoders=decs, seed=int(data.get("seed", 0)))

    def canonical_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


REFERENCE_ENCODER = EncoderConfig()
REFERENCE_DECODERS = (
    DecoderSpec("spm_tissue", 4),
    DecoderSpec("fsl_first", 16),
    DecoderSpec("malp_em", 139),
    DecoderSpec("malp_em_tissue", 6),
    DecoderSpec("fsl_fast", 4),
)


def reference_config(seed=0):
    """Five-output network with the published encoder settings."""
    return ModelConfig(REFERENCE_ENCODER, list(REFERENCE_DECODERS), seed)


# ---------------------------------------------------------------------------
# parameters


def _param_rng(seed, name):
    digest = hashlib.blake2b(name.encode(), digest_size=8).digest()
    return np.random.default_rng([int(seed), int.from_bytes(digest, "little")])


def _conv_params(store, name, c_in, c_out, k, seed, dtype):
    fan_in = c_in * k ** 3
    rng = _param_rng(seed, name + ".kernel")
    kernel = rng.standard_normal((c_out, c_in, k, k, k)) * np.sqrt(2.0 / fan_in)
    store[name + ".kernel"] = Tensor(kernel, requires_grad=True, name=name + ".kernel", dtype=dtype)
    store[name + ".bias"] = Tensor(np.zeros(c_out), requires_grad=True, name=name + ".bias", dtype=dtype)


def _bn_params(store, running, name, channels, dtype):
    store[name + ".gamma"] = Tensor(np.ones(channels), requires_grad=True, name=name + ".gamma", dtype=dtype)
    store[name + ".beta"] = Tensor(np.zeros(channels), requires_grad=True, name=name + ".beta", dtype=dtype)
    running[name] = RunningStats(channels, dtype=dtype)


@dataclass
class ModelParameters:
    """Trainable tensors plus batch-norm running statistics."""

    config: ModelConfig
    tensors: dict
    running: dict
    plan: list

    def names(self):
        return sorted(self.tensors)

    def count(self):
        return int(sum(t.size for t in self.tensors.values()))

    def replace(self, tensors):
        """Same model with new trainable tensors (running stats are shared)."""
        return ModelParameters(self.config, tensors, self.running, self.plan)

    def copy(self):
        return ModelParameters(
            self.config, dict(self.tensors),
            {k: v.copy() for k, v in self.running.items()}, self.plan)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype


def _unit_name(scale, unit):
    return f"encoder.s{scale + 1}.u{unit + 1}"


def build_encoder(config, seed=0, dtype=np.float32):
    """Encoder parameters and its execution plan.

    The plan is a list of steps: ``("conv", name, stride)`` for the initial
    convolution and ``("unit", name, stride, is_tap)`` for residual units;
    ``is_tap`` marks the last unit of each scale.
    """
    config.validate()
    tensors, running, plan = {}, {}, []
    k = config.initial_kernel
    _conv_params(tensors, "encoder.init", 1, config.filters[0], k, seed, dtype)
    plan.append(("conv", "encoder.init", 1))
    c_prev = config.filters[0]
    for j in range(config.n_scales):
        c_out = config.filters[j]
        for i in range(config.n_units):
            name = _unit_name(j, i)
            stride = config.strides[j] if i == 0 else 1
            c_in = c_prev if i == 0 else c_out
            _bn_params(tensors, running, name + ".bn1", c_in, dtype)
            _conv_params(tensors, name + ".conv1", c_in, c_out, 3, seed, dtype)
            _bn_params(tensors, running, name + ".bn2", c_out, dtype)
            _conv_params(tensors, name + ".conv2", c_out, c_out, 3, seed, dtype)
            if stride != 1 or c_in != c_out:
                _conv_params(tensors, name + ".proj", c_in, c_out, 1, seed, dtype)
            plan.append(("unit", name, stride, i == config.n_units - 1))
        c_prev = c_out
    return tensors, running, plan


def init_decoder_params(spec, filters, seed=0, dtype=np.float32):
    """1x1x1 score convolutions projecting each scale's tap to class scores."""
    tensors = {}
    for j, c in enumerate(filters):
        _conv_params(tensors, f"decoder.{spec.protocol_name}.score{j + 1}", c, spec.n_classes, 1, seed, dtype)
    return tensors


def build_model(config, dtype=np.float32):
    config.validate()
    tensors, running, plan = build_encoder(config.encoder, config.seed, dtype)
    for spec in config.decoders:
        tensors.update(init_decoder_params(spec, config.encoder.filters, config.seed, dtype))
    return ModelParameters(config, tensors, running, plan)


# ---------------------------------------------------------------------------
# forward


def residual_unit(x, name, stride, params, running=None, training=False, alpha=0.1):
    """Pre-activation residual unit.

    BN -> leaky ReLU -> conv (stride) -> BN -> leaky ReLU -> conv, added to an
    identity shortcut, or to a strided 1x1x1 projection of ``x`` when the
    stride or channel count changes.
    """
    running = running or {}
    kernel1 = params[name + ".conv1.kernel"]
    c_in, c_out = x.shape[0], kernel1.shape[0]
    has_proj = name + ".proj.kernel" in params
    if (stride != 1 or c_in != c_out) and not has_proj:
        raise ConfigurationError(f"{name}: stride {stride} / {c_in}->{c_out} channels needs a projection shortcut")

    h = batch_norm(x, params[name + ".bn1.gamma"], params[name + ".bn1.beta"],
                   running.get(name + ".bn1"), training)
    h = leaky_relu(h, alpha)
    h = conv3d(h, kernel1, params[name + ".conv1.bias"], stride)
    h = batch_norm(h, params[name + ".bn2.gamma"], params[name + ".bn2.beta"],
                   running.get(name + ".bn2"), training)
    h = leaky_relu(h, alpha)
    h = conv3d(h, params[name + ".conv2.kernel"], params[name + ".conv2.bias"], 1)
    if has_proj:
        shortcut = conv3d(x, params[name + ".proj.kernel"], params[name + ".proj.bias"], stride)
    else:
        shortcut = x
    return h + shortcut


def encode(plan, tensors, running, image, training=False, alpha=0.1):
    """Run the encoder plan; returns the per-scale feature taps."""
    x = image
    taps = []
    for step in plan:
        if step[0] == "conv":
            _, name, stride = step
            x = conv3d(x, tensors[name + ".kernel"], tensors[name + ".bias"], stride)
        else:
            _, name, stride, is_tap = step
            x = residual_unit(x, name, stride, tensors, running, training, alpha)
            if is_tap:
                taps.append(x)
    return taps


def build_decoder_head(spec, taps, params, output_shape=None):
    """FCN-upscore decoder: full-resolution logits for one protocol.

    Starting from the score map of the coarsest tap, the running prediction is
    upsampled 2x whenever the next finer tap is larger and the finer score
    map is added.
    """
    prefix = f"decoder.{spec.protocol_name}"
    n = len(taps)

    def score(j):
        return conv3d(taps[j], params[f"{prefix}.score{j + 1}.kernel"], params[f"{prefix}.score{j + 1}.bias"], 1)

    pred = score(n - 1)
    for j in range(n - 2, -1, -1):
        target = taps[j].shape[1:]
        if pred.shape[1:] != target:
            pred = upsample2x(pred)
        s = score(j)
        if pred.shape != s.shape:
            raise InternalError(f"{prefix}: cannot add {pred.shape} to {s.shape}")
        pred = pred + s
    if output_shape is not None:
        while pred.shape[1:] != tuple(output_shape):
            if any(2 * a > b for a, b in zip(pred.shape[1:], output_shape)):
                raise InternalError(f"{prefix}: cannot reach output shape {output_shape}")
            pred = upsample2x(pred)
    if pred.shape[0] != spec.n_classes:
        raise InternalError(f"{prefix}: produced {pred.shape[0]} channels, expected {spec.n_classes}")
    return pred


HEAD_CHUNK = 16


def decode(spec, taps, params, output_shape):
    """``build_decoder_head``, run in output-channel chunks when nothing is recorded.

    Every decoder op acts on each class channel independently, so chunking
    gives identical values while bounding the full-resolution temporaries.
    """
    if active_tape() is not None or spec.n_classes <= HEAD_CHUNK:
        return build_decoder_head(spec, taps, params, output_shape)
    prefix = f"decoder.{spec.protocol_name}."
    out = None
    n_chunks = -(-spec.n_classes // HEAD_CHUNK)
    for block in np.array_split(np.arange(spec.n_classes), n_chunks):
        c0, c1 = int(block[0]), int(block[-1]) + 1
        part = {k: Tensor._wrap(v.data[c0:c1]) for k, v in params.items() if k.startswith(prefix)}
        piece = build_decoder_head(DecoderSpec(spec.protocol_name, c1 - c0), taps, part, output_shape).data
        if out is None:
            out = np.empty((spec.n_classes,) + piece.shape[1:], dtype=piece.dtype)
        out[c0:c1] = piece
    return Tensor._wrap(out)


def check_input_shape(config, shape):
    multiple = config.encoder.total_stride
    for e in shape:
        if e < 1 or e % multiple:
            raise InputError(f"extent must be a multiple of {multiple} (got spatial shape {tuple(shape)})")


def _prepare_image(image, dtype):
    if isinstance(image, Tensor):
        arr = image
    else:
        arr = np.asarray(image)
        if arr.ndim == 3:
            arr = arr[None]
        arr = Tensor(arr, dtype=dtype)
    if arr.data.ndim != 4 or arr.shape[0] != 1:
        raise InputError(f"image must be [1, D, H, W], got {arr.shape}")
    return arr


def forward(params, image, mode="infer", return_taps=False):
    """Logit tensors, one per decoder in config order.

    ``mode='train'`` normalises with batch statistics and updates running
    statistics; ``mode='infer'`` uses the running statistics and is pure.
    """
    if mode not in ("train", "infer"):
        raise ConfigurationError(f"mode must be 'train' or 'infer', got {mode!r}")
    config = params.config
    image = _prepare_image(image, params.dtype)
    check_input_shape(config, image.shape[1:])
    taps = encode(params.plan, params.tensors, params.running, image,
                  training=(mode == "train"), alpha=config.encoder.alpha)
    outputs = [decode(spec, taps, params.tensors, image.shape[1:]) for spec in config.decoders]
    if return_taps:
        return outputs, taps
    return outputs


def tap_shapes(encoder, input_shape):
    """Expected (channels, D, H, W) of each encoder tap, by shape algebra alone."""
    shapes = []
    ext = tuple(input_shape)
    for j in range(encoder.n_scales):
        ext = tuple(-(-e // encoder.strides[j]) for e in ext)
        shapes.append((encoder.filters[j],) + ext)
    return shapes


class FCNBaseline:
    """Single-output network: residual encoder plus one upscore decoder."""

    def __init__(self, encoder, decoder, seed=0, dtype=np.float32):
        self.encoder = encoder
        self.decoder = decoder
        self.tensors, self.running, self.plan = build_encoder(encoder, seed, dtype)
        self.tensors.update(init_decoder_params(decoder, encoder.filters, seed, dtype))

    def forward(self, image, mode="infer"):
        image = _prepare_image(image, next(iter(self.tensors.values())).dtype)
        multiple = self.encoder.total_stride
        if any(e % multiple for e in image.shape[1:]):
            raise InputError(f"extent must be a multiple of {multiple}")
        taps = encode(self.plan, self.tensors, self.running, image, mode == "train", self.encoder.alpha)
        return decode(self.decoder, taps, self.tensors, image.shape[1:])


__all__ = [
    "EncoderConfig", "DecoderSpec", "ModelConfig", "ModelParameters", "FCNBaseline",
    "build_encoder", "init_decoder_params", "build_model", "residual_unit", "encode",
    "build_decoder_head", "forward", "tap_shapes", "reference_config", "check_input_shape",
]
