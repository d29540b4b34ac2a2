"""WideResNet backbone with one classification head and two centroid heads."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import checkpoint
from .errors import CheckpointError, ConfigError, DimensionError

CLASS_HEAD = (128, 64, 32)
REGRESSION_HEAD = (128, 32)
_CONFIG_KEY = "__config__"


@dataclass
class ModelConfig:
    depth: int = 10
    width: int = 1
    num_classes: int = 3
    l2_coeff: float = 5e-4
    input_size: int = 41

    def validate(self):
        if self.depth < 4 or (self.depth - 4) % 6:
            raise ConfigError(f"WideResNet depth must satisfy (depth - 4) % 6 == 0, got {self.depth}", "depth")
        if self.width < 1:
            raise ConfigError(f"width must be >= 1, got {self.width}", "width")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}", "num_classes")
        if self.l2_coeff < 0:
            raise ConfigError(f"l2_coeff must be >= 0, got {self.l2_coeff}", "l2_coeff")
        if self.input_size < 4:
            raise ConfigError(f"input_size too small: {self.input_size}", "input_size")
        return self

    @property
    def blocks_per_group(self):
        return (self.depth - 4) // 6

    @property
    def channels(self):
        return (16, 16 * self.width, 32 * self.width, 64 * self.width)

    @property
    def feature_size(self):
        size = self.input_size
        for stride in (1, 2, 2):
            size = -(-size // stride)
        return size


@dataclass
class ModelOutput:
    class_probs: ad.Tensor  # (n, C)
    cx: ad.Tensor  # (n,), normalised to [0, 1]
    cy: ad.Tensor


class HydraMixNet:
    def __init__(self, config):
        self.config = config
        self.params = {}
        self.buffers = {}
        self.l2_names = []

    def parameters(self):
        return list(self.params.values())

    def num_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def __call__(self, batch, mode="eval"):
        return forward(self, batch, mode)

    # parameter registration, used by build()
    def _he_uniform(self, rng, name, shape, fan_in):
        limit = np.sqrt(6.0 / fan_in)
        self.params[name] = ad.Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True, name=name)

    def _conv(self, rng, name, k, cin, cout):
        self._he_uniform(rng, name, (k, k, cin, cout), k * k * cin)

    def _bn(self, name, channels):
        self.params[f"{name}.gamma"] = ad.Tensor(np.ones(channels), requires_grad=True, name=f"{name}.gamma")
        self.params[f"{name}.beta"] = ad.Tensor(np.zeros(channels), requires_grad=True, name=f"{name}.beta")
        self.buffers[f"{name}.mean"] = np.zeros(channels, dtype=np.float32)
        self.buffers[f"{name}.var"] = np.ones(channels, dtype=np.float32)

    def _dense(self, rng, name, fan_in, fan_out, zero=False):
        if zero:
            self.params[f"{name}.w"] = ad.Tensor(np.zeros((fan_in, fan_out)), requires_grad=True, name=f"{name}.w")
        else:
            self._he_uniform(rng, f"{name}.w", (fan_in, fan_out), fan_in)
        self.params[f"{name}.b"] = ad.Tensor(np.zeros(fan_out), requires_grad=True, name=f"{name}.b")
        self.l2_names.append(f"{name}.w")


def _block_layout(config):
    """(name, in_channels, out_channels, stride) for every residual block."""
    c0, *widths = config.channels
    layout, cin = [], c0
    for g, (cout, stride) in enumerate(zip(widths, (1, 2, 2))):
        for b in range(config.blocks_per_group):
            layout.append((f"g{g}.b{b}", cin, cout, stride if b == 0 else 1))
            cin = cout
    return layout


def build(config=None, seed=0):
    config = (config or ModelConfig()).validate()
    rng = np.random.default_rng(seed)
    model = HydraMixNet(config)
    model._conv(rng, "stem.conv", 3, 3, config.channels[0])
    for name, cin, cout, _ in _block_layout(config):
        model._bn(f"{name}.bn1", cin)
        model._conv(rng, f"{name}.conv1", 3, cin, cout)
        model._bn(f"{name}.bn2", cout)
        model._conv(rng, f"{name}.conv2", 3, cout, cout)
        if cin != cout:
            model._conv(rng, f"{name}.shortcut", 1, cin, cout)
    final = config.channels[-1]
    model._bn("final.bn", final)

    fan_in = final
    for i, units in enumerate(CLASS_HEAD):
        model._dense(rng, f"cls.d{i}", fan_in, units)
        fan_in = units
    # zero-initialised output layers: uniform class guess and centred centroids at step 0
    model._dense(rng, "cls.out", fan_in, config.num_classes, zero=True)

    flat = config.feature_size ** 2 * final
    for head in ("regx", "regy"):
        fan_in = flat
        for i, units in enumerate(REGRESSION_HEAD):
            model._dense(rng, f"{head}.d{i}", fan_in, units)
            fan_in = units
        model._dense(rng, f"{head}.out", fan_in, 1, zero=True)
    return model


def _dense(model, name, x):
    return ad.matmul(x, model.params[f"{name}.w"]) + model.params[f"{name}.b"]


def _bn(model, name, x, training):
    p, b = model.params, model.buffers
    return ad.batchnorm(x, p[f"{name}.gamma"], p[f"{name}.beta"], b[f"{name}.mean"], b[f"{name}.var"], training)


def _backbone(model, x, training):
    p = model.params
    h = ad.conv2d(x, p["stem.conv"], 1, "same")
    for name, cin, cout, stride in _block_layout(model.config):
        o = ad.relu(_bn(model, f"{name}.bn1", h, training))
        shortcut = ad.conv2d(o, p[f"{name}.shortcut"], stride, "same") if cin != cout else h
        o = ad.conv2d(o, p[f"{name}.conv1"], stride, "same")
        o = ad.relu(_bn(model, f"{name}.bn2", o, training))
        o = ad.conv2d(o, p[f"{name}.conv2"], 1, "same")
        h = o + shortcut
    return ad.relu(_bn(model, "final.bn", h, training))


def _heads(model, features):
    h = ad.global_avg_pool(features)
    for i in range(len(CLASS_HEAD)):
        h = ad.relu(_dense(model, f"cls.d{i}", h))
    probs = ad.softmax(_dense(model, "cls.out", h))

    flat = ad.flatten(features)
    coords = []
    for head in ("regx", "regy"):
        h = flat
        for i in range(len(REGRESSION_HEAD)):
            h = ad.relu(_dense(model, f"{head}.d{i}", h))
        coords.append(ad.reshape(ad.sigmoid(_dense(model, f"{head}.out", h)), (-1,)))
    return ModelOutput(probs, coords[0], coords[1])


def forward(model, batch, mode="train"):
    """Run the network on an (n, S, S, 3) batch in ``"train"`` or ``"eval"`` mode.

    Eval mode records no graph and leaves batchnorm running statistics untouched.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    s = model.config.input_size
    shape = np.shape(batch.data if isinstance(batch, ad.Tensor) else batch)
    if len(shape) != 4 or shape[1:] != (s, s, 3):
        raise DimensionError(f"expected input of shape (n, {s}, {s}, 3), got {shape}")
    x = ad.as_tensor(batch)
    if mode == "eval":
        with ad.no_grad():
            return _heads(model, _backbone(model, x, training=False))
    return _heads(model, _backbone(model, x, training=True))


def predict(model, images, batch_size=200):
    """Eval-mode forward in chunks; returns numpy (probs, cx, cy)."""
    probs, cx, cy = [], [], []
    for start in range(0, len(images), batch_size):
        out = forward(model, np.asarray(images[start:start + batch_size]), "eval")
        probs.append(out.class_probs.data)
        cx.append(out.cx.data)
        cy.append(out.cy.data)
    return np.concatenate(probs), np.concatenate(cx), np.concatenate(cy)


def l2_penalty(model):
    """``l2_coeff * sum(w ** 2)`` over the registered dense kernels, as a graph tensor."""
    total = ad.Tensor(0.0)
    for name in model.l2_names:
        total = total + ad.sum(ad.square(model.params[name]))
    return total * model.config.l2_coeff


def state_tensors(model):
    cfg = model.config
    tensors = {_CONFIG_KEY: np.array([cfg.depth, cfg.width, cfg.num_classes, cfg.l2_coeff, cfg.input_size])}
    tensors.update({name: p.data for name, p in model.params.items()})
    tensors.update({f"buffer:{name}": b for name, b in model.buffers.items()})
    return tensors


def from_state_tensors(tensors):
    if _CONFIG_KEY not in tensors:
        raise CheckpointError("checkpoint carries no model config", offset=0)
    depth, width, classes, l2, size = tensors[_CONFIG_KEY].tolist()
    # the file stores f32; the shortest decimal for that f32 recovers values like 5e-4 exactly
    config = ModelConfig(int(depth), int(width), int(classes), float(str(np.float32(l2))), int(size))
    model = build(config, seed=0)
    expected = set(model.params) | {f"buffer:{b}" for b in model.buffers} | {_CONFIG_KEY}
    if set(tensors) != expected:
        missing, extra = sorted(expected - set(tensors)), sorted(set(tensors) - expected)
        raise CheckpointError(f"checkpoint tensors do not match architecture (missing={missing[:3]}, extra={extra[:3]})")
    for name, p in model.params.items():
        if tensors[name].shape != p.shape:
            raise CheckpointError(f"shape mismatch for {name}: {tensors[name].shape} vs {p.shape}")
        p.data = tensors[name].copy()
    for name in model.buffers:
        model.buffers[name] = tensors[f"buffer:{name}"].copy()
    return model


def save_model(model, path):
    checkpoint.save(path, state_tensors(model))


def load_model(path):
    return from_state_tensors(checkpoint.load(path))


def config_dict(model):
    return asdict(model.config)
