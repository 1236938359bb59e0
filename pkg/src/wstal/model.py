"""Two-stream temporal-convolution network producing embeddings and a TCAM.

Each stream (appearance, motion) is three temporal conv layers with widths
``d -> d/2 -> d/2 -> C``. The second-layer activations of the two streams are
averaged into the latent embeddings; the sigmoid outputs of the third layers
are averaged into the temporal class activation map.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import ndiff as nd
from .errors import ConfigError, ShapeError

STREAMS = ("rgb", "flow")
LAYERS = ("tc1", "tc2", "tc3")


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 32
    num_classes: int = 5
    kernel_size: int = 3
    dilation: int = 1
    leaky_slope: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.feature_dim < 2 or self.feature_dim % 2:
            raise ConfigError(f"feature_dim must be even and >= 2, got {self.feature_dim}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.dilation < 1:
            raise ConfigError(f"dilation must be >= 1, got {self.dilation}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")

    @property
    def embed_dim(self):
        return self.feature_dim // 2

    def layer_widths(self):
        d, h, c = self.feature_dim, self.embed_dim, self.num_classes
        return {"tc1": (d, h), "tc2": (h, h), "tc3": (h, c)}

    def to_dict(self):
        return asdict(self)


class ModelParams:
    """Kernels and biases of the six conv layers, keyed ``stream.layer.kind``."""

    def __init__(self, config, arrays):
        self.config = config
        self.arrays = dict(arrays)
        expected = set(param_names(config))
        if set(self.arrays) != expected:
            raise ShapeError(f"parameter names {sorted(self.arrays)} != {sorted(expected)}")
        for name, shape in param_shapes(config).items():
            if self.arrays[name].shape != shape:
                raise ShapeError(f"{name}: shape {self.arrays[name].shape}, expected {shape}")

    def __getitem__(self, name):
        return self.arrays[name]

    def items(self):
        return [(name, self.arrays[name]) for name in param_names(self.config)]

    def zero_grad(self):
        for a in self.arrays.values():
            a.zero_grad()

    def copy(self):
        return ModelParams(
            self.config, {k: nd.parameter(v.values) for k, v in self.arrays.items()}
        )


def param_shapes(config):
    k = config.kernel_size
    shapes = {}
    for stream in STREAMS:
        for layer, (c_in, c_out) in config.layer_widths().items():
            shapes[f"{stream}.{layer}.weight"] = (k * c_in, c_out)
            shapes[f"{stream}.{layer}.bias"] = (1, c_out)
    return shapes


def param_names(config):
    return list(param_shapes(config))


def init_params(config):
    """Glorot-uniform kernels and zero biases, fully determined by ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    k = config.kernel_size
    arrays = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".bias"):
            arrays[name] = nd.parameter(np.zeros(shape))
            continue
        fan_in, fan_out = shape[0], k * shape[1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        arrays[name] = nd.parameter(rng.uniform(-limit, limit, size=shape))
    return ModelParams(config, arrays)


@dataclass
class ForwardOutput:
    embeddings: nd.DiffArray  # s x d/2
    tcam: nd.DiffArray  # s x C


def _stream(params, stream, feats):
    cfg = params.config
    k, dil, slope = cfg.kernel_size, cfg.dilation, cfg.leaky_slope

    def conv(h, layer):
        return nd.conv1d_temporal(
            h, params[f"{stream}.{layer}.weight"], params[f"{stream}.{layer}.bias"], k, dil
        )

    h1 = nd.leaky_relu(conv(feats, "tc1"), slope)
    h2 = nd.leaky_relu(conv(h1, "tc2"), slope)
    act = nd.sigmoid(conv(h2, "tc3"))
    return h2, act


def forward(params, rgb, flow):
    cfg = params.config
    rgb = nd.as_diff(rgb)
    flow = nd.as_diff(flow)
    for label, f in (("rgb", rgb), ("flow", flow)):
        if f.rows < 1 or f.cols != cfg.feature_dim:
            raise ShapeError(f"{label} features {f.shape} do not match s x {cfg.feature_dim}")
    if rgb.rows != flow.rows:
        raise ShapeError(f"streams disagree on snippet count: {rgb.rows} vs {flow.rows}")
    h_rgb, a_rgb = _stream(params, "rgb", rgb)
    h_flow, a_flow = _stream(params, "flow", flow)
    x = (h_rgb + h_flow) * 0.5
    tcam = (a_rgb + a_flow) * 0.5
    return ForwardOutput(x, tcam)
