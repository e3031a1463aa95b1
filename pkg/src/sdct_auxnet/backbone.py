"""Compact CNN backbone (C1-C6), bilinear pooling head and spectral averaging."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .nn import Parameter, Tensor, record
from .sdct import dct_layer_forward, init_stain_weights, rgb_to_od, sd_forward

NORMAL, CANCER = 0, 1


@dataclass(frozen=True)
class BackboneConfig:
    channels: tuple = (3, 16, 16, 32, 48, 64, 64)
    kernels: tuple = (5, 3, 3, 3, 3, 3)
    strides: tuple = (2, 1, 1, 1, 1, 1)
    paddings: tuple = (1, 1, 1, 1, 1, 1)
    pool_after: tuple = (2, 3, 4, 5)  # 1-based conv indices followed by a 2x2 max-pool
    input_side: int = 350
    n_classes: int = 2
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    od_eps: float = 1.0

    def __post_init__(self):
        for name in ("channels", "kernels", "strides", "paddings", "pool_after"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        n = len(self.kernels)
        if len(self.channels) != n + 1 or len(self.strides) != n or len(self.paddings) != n:
            raise ValueError("inconsistent layer plan")
        if self.channels[0] != 3:
            raise ValueError("the network consumes 3 stain channels")

    @property
    def feature_channels(self) -> int:
        return self.channels[-1]

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**d)

    def digest(self) -> str:
        import json

        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def shape_trace(config: BackboneConfig, side: int | None = None) -> list[tuple[str, tuple, tuple]]:
    """Layer-by-layer (name, input shape, output shape) by floor arithmetic alone."""
    s = config.input_side if side is None else side
    shape = (3, s, s)
    rows = [("SD-layer", shape, shape), ("DCT-layer", shape, shape)]
    for i, k in enumerate(config.kernels):
        c, h, w = shape
        out = (
            config.channels[i + 1],
            nn.conv_output_size(h, k, config.strides[i], config.paddings[i]),
            nn.conv_output_size(w, k, config.strides[i], config.paddings[i]),
        )
        if min(out[1:]) < 1:
            raise ValueError(f"input side {s} too small for C{i + 1}")
        rows.append((f"C{i + 1}", shape, out))
        shape = out
        if i + 1 in config.pool_after:
            c, h, w = shape
            if min(h, w) < 2:
                raise ValueError(f"input side {s} too small for pooling after C{i + 1}")
            out = (c, h // 2, w // 2)
            rows.append((f"Pool{config.pool_after.index(i + 1) + 1}", shape, out))
            shape = out
    c = shape[0]
    rows.append(("Bilinear", shape, (c * c,)))
    rows.append(("Linear", (c * c,), (config.n_classes,)))
    return rows


def param_count(config: BackboneConfig = BackboneConfig(), include_sd: bool = False) -> int:
    """Trainable scalars: conv weights and biases, BN scale/shift, linear head."""
    total = 0
    for i, k in enumerate(config.kernels):
        cin, cout = config.channels[i], config.channels[i + 1]
        total += k * k * cin * cout + cout  # conv
        total += 2 * cout  # batch-norm gamma, beta
    c = config.feature_channels
    total += c * c * config.n_classes + config.n_classes
    if include_sd:
        total += 9
    return total


class SdctNetModel:
    """All parameters of the SD-layer, the C1-C6 backbone and the linear head,
    plus batch-norm running statistics."""

    def __init__(self, config: BackboneConfig = BackboneConfig(), seed: int | None = 0, dtype=np.float64, sd_init=None):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.params: dict[str, Parameter] = {}
        self.buffers: dict[str, np.ndarray] = {}

        self.params["sd.weight"] = init_stain_weights(rng, init=sd_init)
        for i, k in enumerate(config.kernels, start=1):
            cin, cout = config.channels[i - 1], config.channels[i]
            bound = 1.0 / np.sqrt(cin * k * k)
            self.params[f"c{i}.weight"] = Parameter(rng.uniform(-bound, bound, (cout, cin, k, k)))
            self.params[f"c{i}.bias"] = Parameter(rng.uniform(-bound, bound, cout))
            self.params[f"bn{i}.gamma"] = Parameter(np.ones(cout))
            self.params[f"bn{i}.beta"] = Parameter(np.zeros(cout))
            self.buffers[f"bn{i}.running_mean"] = np.zeros(cout)
            self.buffers[f"bn{i}.running_var"] = np.ones(cout)
            self.buffers[f"bn{i}.num_batches"] = np.zeros(())
        d = config.feature_channels**2
        bound = 1.0 / np.sqrt(d)
        self.params["head.weight"] = Parameter(rng.uniform(-bound, bound, (config.n_classes, d)))
        self.params["head.bias"] = Parameter(rng.uniform(-bound, bound, config.n_classes))
        self.astype(self.dtype)

    def astype(self, dtype) -> "SdctNetModel":
        self.dtype = np.dtype(dtype)
        for p in self.params.values():
            p.data = p.data.astype(self.dtype)
            p.zero_grad()
        for k in self.buffers:
            self.buffers[k] = self.buffers[k].astype(self.dtype)
        return self

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: p.data.copy() for k, p in self.params.items()}
        state.update({k: v.copy() for k, v in self.buffers.items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.params) | set(self.buffers)
        if set(state) != expected:
            missing, extra = expected - set(state), set(state) - expected
            raise KeyError(f"state mismatch; missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in self.params.items():
            p.assign(state[k])
        for k in self.buffers:
            if state[k].shape != self.buffers[k].shape:
                raise ValueError(f"shape mismatch for {k}")
            self.buffers[k] = np.array(state[k], dtype=self.dtype)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.state_dict().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    # -- forward -----------------------------------------------------------

    def front_end(self, images: np.ndarray) -> Tensor:
        """RGB [N,3,H,W] in [0,255] -> DCT-layer output [N,3,H,W]."""
        od = Tensor(rgb_to_od(images, self.config.od_eps).astype(self.dtype))
        return dct_layer_forward(sd_forward(od, self.params["sd.weight"]))

    def features(self, images: np.ndarray, training: bool = False) -> Tensor:
        return backbone_forward(self.front_end(images), self, training)

    def forward(self, images: np.ndarray, training: bool = False) -> Tensor:
        """Log-probabilities [N, 2] for a batch of RGB images."""
        return classify_head(bilinear_pool(self.features(images, training)), self)

    def predict_outputs(self, images: np.ndarray, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
        """Eval-mode (log_probs [N,2], spectral-averaged features [N,h*w])."""
        logps, feats = [], []
        for start in range(0, len(images), batch_size):
            f = self.features(images[start:start + batch_size], training=False)
            logps.append(classify_head(bilinear_pool(f), self).data)
            feats.append(spectral_average(f).data)
        return np.concatenate(logps), np.concatenate(feats)


def backbone_forward(d: Tensor, model: SdctNetModel, training: bool = False) -> Tensor:
    """conv -> batch-norm -> ReLU for C1..C6 with 2x2 max-pools per the config."""
    cfg = model.config
    d = d if isinstance(d, Tensor) else Tensor(d)
    if d.ndim != 4 or d.shape[1] != cfg.channels[0]:
        raise ValueError(f"expected input [N,{cfg.channels[0]},H,W], got {d.shape}")
    shape_trace(cfg, d.shape[2])  # raises on undersized input
    if d.shape[2] != d.shape[3]:
        shape_trace(cfg, d.shape[3])
    p, b = model.params, model.buffers
    h = d
    for i in range(1, len(cfg.kernels) + 1):
        h = nn.conv2d(h, p[f"c{i}.weight"], p[f"c{i}.bias"], cfg.strides[i - 1], cfg.paddings[i - 1])
        h = nn.batchnorm2d(
            h, p[f"bn{i}.gamma"], p[f"bn{i}.beta"], b[f"bn{i}.running_mean"], b[f"bn{i}.running_var"],
            training, cfg.bn_momentum, cfg.bn_eps, b[f"bn{i}.num_batches"],
        )
        h = nn.relu(h)
        if i in cfg.pool_after:
            h = nn.maxpool2d(h, 2, 2)
    return h


def bilinear_pool(f: Tensor) -> Tensor:
    """Spatial mean of the channel outer product, flattened row-major: [N, C*C]."""
    N, C, H, W = f.shape
    hw = H * W
    x = f.data.reshape(N, C, hw)
    out = (x @ x.transpose(0, 2, 1) / hw).reshape(N, C * C)

    def backward(g):
        gm = g.reshape(N, C, C)
        return (((gm + gm.transpose(0, 2, 1)) @ x / hw).reshape(N, C, H, W),)

    return record(out, (f,), backward)


def spectral_average(f: Tensor) -> Tensor:
    """Mean over channels at every spatial position, flattened: [N, h*w]."""
    N, C, H, W = f.shape
    out = f.data.mean(axis=1).reshape(N, H * W)

    def backward(g):
        return (np.broadcast_to((g / C).reshape(N, 1, H, W), f.shape).copy(),)

    return record(out, (f,), backward)


def classify_head(b: Tensor, model: SdctNetModel) -> Tensor:
    """Linear layer then log-softmax. Column 0 = normal, column 1 = cancer."""
    return nn.log_softmax(nn.linear(b, model.params["head.weight"], model.params["head.bias"]))
