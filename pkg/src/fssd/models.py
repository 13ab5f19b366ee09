"""Small feature extractors with named per-layer feature taps.

Two architectures are supported:

* ``mlp``: fully connected ReLU layers; every hidden layer is a tap.
* ``lenet``: conv-relu-pool blocks followed by fully connected ReLU layers.
  Convolutional taps are taken right after the ReLU and reduced to one value
  per channel by global average pooling; fully connected taps pass through.

The last tap is always the penultimate layer (the input of the classifier
head).
"""

import warnings
from dataclasses import dataclass, field, fields

import numpy as np

from fssd import tensor as T
from fssd.tensor import ShapeError, Tensor

ARCHITECTURES = ("mlp", "lenet")


@dataclass(frozen=True)
class ModelConfig:
    architecture: str = "mlp"
    layer_sizes: tuple = ()
    input_shape: tuple = (1, 28, 28)
    conv_channels: tuple = (6, 16)
    kernel_size: int = 5
    padding: int = 0
    pool: int = 2
    fc_sizes: tuple = (120, 84)
    num_classes: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        for name in ("layer_sizes", "input_shape", "conv_channels", "fc_sizes"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.architecture == "mlp":
            if len(self.layer_sizes) < 3:
                raise ValueError(f"mlp layer_sizes needs input, >=1 hidden and output sizes, got {self.layer_sizes}")
            if min(self.layer_sizes) < 1:
                raise ValueError(f"mlp layer sizes must be positive, got {self.layer_sizes}")
            object.__setattr__(self, "input_shape", (self.layer_sizes[0],))
            object.__setattr__(self, "num_classes", self.layer_sizes[-1])
        else:
            if len(self.input_shape) != 3 or min(self.input_shape) < 1:
                raise ValueError(f"lenet input_shape must be (channels, height, width), got {self.input_shape}")
            if not self.conv_channels or min(self.conv_channels) < 1 or min(self.fc_sizes or (1,)) < 1:
                raise ValueError("lenet channel and fc sizes must be positive")
            if self.kernel_size < 1 or self.pool < 1 or self.padding < 0:
                raise ValueError("kernel_size and pool must be >= 1, padding >= 0")
            h, w = self.input_shape[1:]
            for _ in self.conv_channels:
                h, w = h + 2 * self.padding - self.kernel_size + 1, w + 2 * self.padding - self.kernel_size + 1
                if h < self.pool or w < self.pool:
                    raise ValueError(f"input {self.input_shape} too small for {len(self.conv_channels)} conv blocks")
                h, w = h // self.pool, w // self.pool
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")

    def to_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = ",".join(str(i) for i in v) if isinstance(v, tuple) else str(v)
        return out

    @classmethod
    def from_dict(cls, d):
        kwargs = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            raw = str(d[f.name]).strip()
            if f.name == "architecture":
                kwargs[f.name] = raw
            elif f.name in ("layer_sizes", "input_shape", "conv_channels", "fc_sizes"):
                kwargs[f.name] = tuple(int(p) for p in raw.split(",") if p.strip())
            else:
                kwargs[f.name] = int(raw)
        return cls(**kwargs)


class FeatureModel:
    """Interface shared by every model the detectors and probes consume.

    Subclasses define ``params`` (name -> float64 array), ``tap_names``,
    ``input_shape`` and ``forward``.
    """

    params: dict
    tap_names: list
    input_shape: tuple

    def forward(self, x, params=None):
        """Return ({tap_name: (n, d_k) Tensor}, (n, classes) logits Tensor)."""
        raise NotImplementedError

    def param_tensors(self, requires_grad=True):
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def check_input(self, x):
        shape = tuple(x.shape[1:])
        if x.ndim < 2 or shape != tuple(self.input_shape):
            raise ShapeError(f"model expects inputs of shape (n, {', '.join(map(str, self.input_shape))}), got {tuple(x.shape)}")

    @property
    def num_parameters(self):
        return int(sum(v.size for v in self.params.values()))


class Model(FeatureModel):
    def __init__(self, config, params=None):
        self.config = config
        self.input_shape = tuple(config.input_shape)
        self.num_classes = config.num_classes
        self._layout = _param_layout(config)
        self.tap_names = _tap_names(config)
        if params is None:
            params = _init_params(self._layout, config.seed)
        missing = [n for n, _ in self._layout if n not in params]
        if missing:
            raise ValueError(f"missing parameters: {missing}")
        self.params = {}
        for name, shape in self._layout:
            arr = np.array(params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"parameter {name}: expected shape {shape}, got {arr.shape}")
            self.params[name] = arr

    def copy(self, params=None):
        src = self.params if params is None else params
        return Model(self.config, {k: np.array(v) for k, v in src.items()})

    def forward(self, x, params=None):
        x = x if isinstance(x, Tensor) else Tensor(x)
        self.check_input(x)
        p = params if params is not None else {k: Tensor(v) for k, v in self.params.items()}
        feats = {}
        if self.config.architecture == "mlp":
            h = x
            n_hidden = len(self.config.layer_sizes) - 2
            for i in range(n_hidden):
                h = T.relu(T.add_bias(T.matmul(h, p[f"fc{i}.weight"]), p[f"fc{i}.bias"]))
                feats[f"fc{i}"] = h
            logits = T.add_bias(T.matmul(h, p["head.weight"]), p["head.bias"])
            return feats, logits
        cfg = self.config
        h = x
        for i in range(len(cfg.conv_channels)):
            h = T.relu(T.add_bias(T.conv2d(h, p[f"conv{i}.weight"], padding=cfg.padding), p[f"conv{i}.bias"]))
            feats[f"conv{i}"] = T.global_avg_pool(h)
            h = T.maxpool2d(h, cfg.pool)
        h = T.flatten(h)
        for i in range(len(cfg.fc_sizes)):
            h = T.relu(T.add_bias(T.matmul(h, p[f"fc{i}.weight"]), p[f"fc{i}.bias"]))
            feats[f"fc{i}"] = h
        logits = T.add_bias(T.matmul(h, p["head.weight"]), p["head.bias"])
        return feats, logits


def _conv_flat_dim(cfg):
    h, w = cfg.input_shape[1:]
    for _ in cfg.conv_channels:
        h = (h + 2 * cfg.padding - cfg.kernel_size + 1) // cfg.pool
        w = (w + 2 * cfg.padding - cfg.kernel_size + 1) // cfg.pool
    return cfg.conv_channels[-1] * h * w


def _param_layout(cfg):
    layout = []
    if cfg.architecture == "mlp":
        sizes = cfg.layer_sizes
        for i in range(len(sizes) - 2):
            layout += [(f"fc{i}.weight", (sizes[i], sizes[i + 1])), (f"fc{i}.bias", (sizes[i + 1],))]
        layout += [("head.weight", (sizes[-2], sizes[-1])), ("head.bias", (sizes[-1],))]
        return layout
    c_in = cfg.input_shape[0]
    k = cfg.kernel_size
    for i, c_out in enumerate(cfg.conv_channels):
        layout += [(f"conv{i}.weight", (c_out, c_in, k, k)), (f"conv{i}.bias", (c_out,))]
        c_in = c_out
    d = _conv_flat_dim(cfg)
    for i, width in enumerate(cfg.fc_sizes):
        layout += [(f"fc{i}.weight", (d, width)), (f"fc{i}.bias", (width,))]
        d = width
    layout += [("head.weight", (d, cfg.num_classes)), ("head.bias", (cfg.num_classes,))]
    return layout


def _tap_names(cfg):
    if cfg.architecture == "mlp":
        names = [f"fc{i}" for i in range(len(cfg.layer_sizes) - 2)]
    else:
        names = [f"conv{i}" for i in range(len(cfg.conv_channels))] + [f"fc{i}" for i in range(len(cfg.fc_sizes))]
    return names


def _init_params(layout, seed):
    # weights ~ N(0, 1/fan_in); biases start at zero
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in layout:
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            params[name] = rng.standard_normal(shape) / np.sqrt(fan_in)
    return params


def build_model(config):
    model = Model(config)
    if len(model.tap_names) < 2:
        warnings.warn(
            f"model has {len(model.tap_names)} feature tap(s); layer ensembling needs at least 2",
            stacklevel=2,
        )
    return model


def tap_dims(model):
    """Feature dimension of every tap, derived from the config alone."""
    cfg = model.config
    if cfg.architecture == "mlp":
        return dict(zip(model.tap_names, cfg.layer_sizes[1:-1]))
    return dict(zip(model.tap_names, tuple(cfg.conv_channels) + tuple(cfg.fc_sizes)))


def penultimate_tap(model):
    return model.tap_names[-1]


def iter_batches(x, batch_size):
    for start in range(0, len(x), batch_size):
        yield x[start:start + batch_size]


def forward_features(model, x, batch_size=512):
    """Numpy convenience: {tap: (n, d_k) array} for a batch of inputs."""
    x = np.asarray(x, dtype=np.float64)
    model.check_input(x)
    parts = {name: [] for name in model.tap_names}
    for chunk in iter_batches(x, batch_size):
        feats, _ = model.forward(Tensor(chunk))
        for name in model.tap_names:
            parts[name].append(feats[name].data)
    return {name: np.concatenate(v, axis=0) for name, v in parts.items()}


def forward_logits(model, x, batch_size=512):
    x = np.asarray(x, dtype=np.float64)
    model.check_input(x)
    return np.concatenate([model.forward(Tensor(c))[1].data for c in iter_batches(x, batch_size)], axis=0)


@dataclass
class Checkpoint:
    """In-memory training snapshot."""

    config: ModelConfig
    params: dict
    step: int = 0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def to_model(self):
        return Model(self.config, {k: np.array(v) for k, v in self.params.items()})

    @classmethod
    def from_model(cls, model, step=0, seed=None):
        return cls(
            config=model.config,
            params={k: np.array(v) for k, v in model.params.items()},
            step=int(step),
            seed=model.config.seed if seed is None else int(seed),
        )
