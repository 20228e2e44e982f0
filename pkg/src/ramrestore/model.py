"""Small residual conv net with a stable, named layer registry.

Layers are 3x3 convolutions named ``stem``, ``block{i}.conv1``,
``block{i}.conv2`` and ``tail``. Each layer (weight + bias) is the unit of
attribution, freezing and persistence.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadConfig, BadMagic, CorruptPayload, ShapeMismatch, UnknownLayer, VersionMismatch
from .tensorcore import AdamState, Tensor, add, add_bias, conv2d, leaky_relu
from .tensorcore.io import decode_tensor, encode_tensor

MAGIC = b"RAMC"
VERSION = 1
MIN_SIZE = 8


@dataclass(frozen=True)
class ModelConfig:
    width: int = 32
    blocks: int = 8
    in_channels: int = 3
    out_channels: int = 3

    def validate(self):
        if self.width < 4:
            raise BadConfig(f"width must be >= 4, got {self.width}")
        if self.blocks < 1:
            raise BadConfig(f"blocks must be >= 1, got {self.blocks}")
        if self.in_channels != 3 or self.out_channels != 3:
            raise BadConfig("in/out channels are fixed at 3")
        return self


def layer_names(config):
    names = ["stem"]
    for i in range(config.blocks):
        names += [f"block{i}.conv1", f"block{i}.conv2"]
    names.append("tail")
    return names


def param_count(config):
    w, b = config.width, config.blocks
    stem = config.in_channels * w * 9 + w
    block = 2 * (w * w * 9 + w)
    tail = w * config.out_channels * 9 + config.out_channels
    return stem + b * block + tail


class ConvLayer:
    __slots__ = ("name", "weight", "bias")

    def __init__(self, name, weight, bias, trainable=True):
        self.name = name
        self.weight = Tensor(weight, requires_grad=trainable)
        self.bias = Tensor(bias, requires_grad=trainable)

    @property
    def trainable(self):
        return self.weight.requires_grad

    @trainable.setter
    def trainable(self, flag):
        self.weight.requires_grad = bool(flag)
        self.bias.requires_grad = bool(flag)

    def __call__(self, x):
        return add_bias(conv2d(x, self.weight), self.bias)


class Model:
    def __init__(self, config, layers):
        self.config = config
        self.layers = {layer.name: layer for layer in layers}
        if list(self.layers) != layer_names(config):
            raise BadConfig("layer registry does not match config")

    @property
    def names(self):
        return list(self.layers)

    def __len__(self):
        return len(self.layers)

    def layer(self, name):
        try:
            return self.layers[name]
        except KeyError:
            raise UnknownLayer(f"unknown layer {name!r}") from None

    def parameters(self, trainable_only=False):
        """Flat name -> Tensor map, keys like ``stem.weight``."""
        out = {}
        for layer in self.layers.values():
            if trainable_only and not layer.trainable:
                continue
            out[f"{layer.name}.weight"] = layer.weight
            out[f"{layer.name}.bias"] = layer.bias
        return out

    def trainable_names(self):
        return [n for n, layer in self.layers.items() if layer.trainable]

    def num_parameters(self):
        return sum(p.size for p in self.parameters().values())

    def copy(self):
        layers = [
            ConvLayer(l.name, l.weight.data.copy(), l.bias.data.copy(), l.trainable)
            for l in self.layers.values()
        ]
        return Model(self.config, layers)

    def forward(self, x, tap=None):
        """Run the network; returns (output, {layer name: activation}).

        Tapped activations are the conv+bias outputs of the named layers.
        """
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeMismatch(f"expected (B, {self.config.in_channels}, H, W), got {x.shape}")
        if x.shape[2] < MIN_SIZE or x.shape[3] < MIN_SIZE:
            raise ShapeMismatch(f"spatial size must be >= {MIN_SIZE}, got {x.shape[2:]}")
        tap = set(tap or ())
        for name in tap:
            self.layer(name)
        acts = {}

        def run(name, inp):
            out = self.layers[name](inp)
            if name in tap:
                acts[name] = out
            return out

        h = leaky_relu(run("stem", x))
        for i in range(self.config.blocks):
            r = leaky_relu(run(f"block{i}.conv1", h))
            h = add(h, run(f"block{i}.conv2", r))
        return run("tail", h), acts

    __call__ = forward

    def predict(self, x):
        """Forward pass on a numpy array without recording a graph."""
        from .tensorcore import no_grad

        with no_grad():
            out, _ = self.forward(Tensor(x))
        return out.data

    def set_trainable(self, names):
        names = set(names)
        for name in names:
            self.layer(name)
        for name, layer in self.layers.items():
            layer.trainable = name in names
        return self


def build(config=None, seed=0):
    """He-initialised model, deterministic in ``seed``; all layers trainable."""
    config = (config or ModelConfig()).validate()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1A17]))
    gain = np.sqrt(2.0 / (1.0 + 0.2 ** 2))
    layers = []
    for name in layer_names(config):
        in_c = config.in_channels if name == "stem" else config.width
        out_c = config.out_channels if name == "tail" else config.width
        std = gain / np.sqrt(in_c * 9)
        if name.endswith("conv2"):
            # residual branches start small so the stacked blocks stay well-scaled
            std *= 0.1
        w = rng.normal(0.0, std, size=(out_c, in_c, 3, 3))
        layers.append(ConvLayer(name, w, np.zeros(out_c)))
    return Model(config, layers)


def set_trainable(model, names):
    return model.set_trainable(names)


# ---------------------------------------------------------------- checkpoints


def _pack_name(name):
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def unpack(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise CorruptPayload("checkpoint truncated")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def name(self):
        (n,) = self.unpack("<H")
        if self.pos + n > len(self.buf):
            raise CorruptPayload("checkpoint truncated")
        raw = self.buf[self.pos:self.pos + n]
        self.pos += n
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptPayload("bad layer name encoding") from exc

    def tensor(self):
        try:
            arr, self.pos = decode_tensor(self.buf, self.pos)
        except (BadMagic, VersionMismatch) as exc:
            raise CorruptPayload(f"embedded tensor: {exc}") from exc
        return arr


def encode_checkpoint(model, opt_state=None, step=0):
    cfg = model.config
    out = [MAGIC, struct.pack("<I", VERSION)]
    out.append(struct.pack("<4I", cfg.width, cfg.blocks, cfg.in_channels, cfg.out_channels))
    out.append(struct.pack("<I", len(model)))
    for layer in model.layers.values():
        out.append(_pack_name(layer.name))
        out.append(struct.pack("<B", int(layer.trainable)))
        out.append(encode_tensor(layer.weight.data))
        out.append(encode_tensor(layer.bias.data))
    if opt_state is None:
        out.append(struct.pack("<B", 0))
    else:
        out.append(struct.pack("<B", 1))
        s = opt_state
        out.append(struct.pack("<Qddd", s.t, s.beta1, s.beta2, s.eps))
        names = sorted(s.m)
        out.append(struct.pack("<I", len(names)))
        for name in names:
            out.append(_pack_name(name))
            out.append(encode_tensor(s.m[name]))
            out.append(encode_tensor(s.v[name]))
    out.append(struct.pack("<Q", int(step)))
    return b"".join(out)


def decode_checkpoint(buf):
    """Returns (model, optimizer state or None, step counter)."""
    if buf[:4] != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, got {bytes(buf[:4])!r}")
    rd = _Reader(buf)
    rd.pos = 4
    (version,) = rd.unpack("<I")
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {VERSION}")
    width, blocks, in_c, out_c = rd.unpack("<4I")
    try:
        cfg = ModelConfig(width, blocks, in_c, out_c).validate()
    except BadConfig as exc:
        raise CorruptPayload(f"bad config record: {exc}") from exc
    (n_layers,) = rd.unpack("<I")
    layers = []
    for _ in range(n_layers):
        name = rd.name()
        (flag,) = rd.unpack("<B")
        w = rd.tensor()
        b = rd.tensor()
        layers.append(ConvLayer(name, w, b, bool(flag)))
    try:
        model = Model(cfg, layers)
    except BadConfig as exc:
        raise CorruptPayload(str(exc)) from exc
    expected = build_shapes(cfg)
    for layer in layers:
        if (layer.weight.shape, layer.bias.shape) != expected[layer.name]:
            raise CorruptPayload(f"{layer.name}: unexpected tensor shapes")
    (has_opt,) = rd.unpack("<B")
    state = None
    if has_opt:
        t, b1, b2, eps = rd.unpack("<Qddd")
        state = AdamState(beta1=b1, beta2=b2, eps=eps, t=t)
        (n,) = rd.unpack("<I")
        for _ in range(n):
            name = rd.name()
            state.m[name] = rd.tensor()
            state.v[name] = rd.tensor()
    (step,) = rd.unpack("<Q")
    if rd.pos != len(buf):
        raise CorruptPayload(f"{len(buf) - rd.pos} trailing bytes")
    return model, state, step


def build_shapes(config):
    shapes = {}
    for name in layer_names(config):
        in_c = config.in_channels if name == "stem" else config.width
        out_c = config.out_channels if name == "tail" else config.width
        shapes[name] = ((out_c, in_c, 3, 3), (out_c,))
    return shapes


def save(model, path, opt_state=None, step=0):
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(model, opt_state, step))


def load(path, with_state=False):
    with open(path, "rb") as fh:
        buf = fh.read()
    model, state, step = decode_checkpoint(buf)
    if with_state:
        return model, state, step
    return model
