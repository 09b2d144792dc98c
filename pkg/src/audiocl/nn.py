"""VGG-style CNN layers, model assembly, AdamW and checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor

log = logging.getLogger(__name__)

FULL_SCALE_CHANNELS = (64, 64, 128, 128, 256, 256, 512, 512)
DESK_SCALE_CHANNELS = (8, 8, 16, 16)


@dataclass(frozen=True)
class ModelConfig:
    channels: tuple = DESK_SCALE_CHANNELS
    n_mels: int = 32
    n_classes: int = 4
    kernel_size: int = 3
    pool_every: int = 2
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not self.channels or any(c < 1 for c in self.channels):
            raise ValueError(f"invalid channel list {self.channels}")
        if self.n_mels < 1:
            raise ValueError("n_mels must be positive")
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be a positive odd number")
        if self.pool_every < 1:
            raise ValueError("pool_every must be positive")

    @classmethod
    def full_scale(cls, n_mels: int = 128, n_classes: int = 50, seed: int = 0) -> "ModelConfig":
        return cls(channels=FULL_SCALE_CHANNELS, n_mels=n_mels, n_classes=n_classes, seed=seed)

    def pool_positions(self) -> list[int]:
        """Indices of conv blocks followed by 2x2 max pooling."""
        return [i for i in range(len(self.channels)) if (i + 1) % self.pool_every == 0]


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d:
    def __init__(self, c_in, c_out, k, rng):
        self.weight = ag.parameter(kaiming_uniform(rng, (c_out, c_in, k, k), c_in * k * k))
        self.bias = ag.parameter(np.zeros(c_out))
        self.padding = k // 2

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, x, training):
        return ag.conv2d(x, self.weight, self.bias, self.padding)


class BatchNorm2d:
    """Batch statistics in training mode, running statistics in eval mode.

    Running estimates follow ``r <- momentum * r + (1 - momentum) * batch``
    and use the unbiased batch variance.
    """

    def __init__(self, channels, momentum=0.9, eps=1e-5):
        self.gamma = ag.parameter(np.ones(channels))
        self.beta = ag.parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def __call__(self, x, training):
        if training:
            out, mu, var = ag.batch_norm(x, self.gamma, self.beta, self.eps)
            n = x.data.size / x.shape[1]
            unbiased = var * n / max(n - 1, 1)
            self.running_mean *= self.momentum
            self.running_mean += (1 - self.momentum) * mu
            self.running_var *= self.momentum
            self.running_var += (1 - self.momentum) * unbiased
            return out
        scale = 1.0 / np.sqrt(self.running_var + self.eps)
        return ag.affine_channels(x, scale, -self.running_mean * scale, self.gamma, self.beta)


class Dense:
    def __init__(self, d_in, d_out, rng):
        self.weight = ag.parameter(kaiming_uniform(rng, (d_in, d_out), d_in))
        self.bias = ag.parameter(np.zeros(d_out))

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, x, training):
        return x @ self.weight + self.bias


class Model:
    """conv -> batchnorm -> ReLU blocks with periodic max pooling, global
    average pooling, one dense layer and a softmax over classes."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.training = True
        rng = np.random.default_rng(cfg.seed)
        self.blocks = []
        c_in = 1
        pools = set(cfg.pool_positions())
        for i, c_out in enumerate(cfg.channels):
            conv = Conv2d(c_in, c_out, cfg.kernel_size, rng)
            bn = BatchNorm2d(c_out, cfg.bn_momentum, cfg.bn_eps)
            self.blocks.append((conv, bn, i in pools))
            c_in = c_out
        self.dense = Dense(c_in, cfg.n_classes, rng)

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, (conv, bn, _) in enumerate(self.blocks):
            for k, v in conv.params().items():
                out[f"conv{i}.{k}"] = v
            for k, v in bn.params().items():
                out[f"bn{i}.{k}"] = v
        for k, v in self.dense.params().items():
            out[f"dense.{k}"] = v
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (_, bn, _) in enumerate(self.blocks):
            for k, v in bn.buffers().items():
                out[f"bn{i}.{k}"] = v
        return out

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    @property
    def n_conv_layers(self) -> int:
        return len(self.blocks)

    @property
    def n_dense_layers(self) -> int:
        return 1

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def logits(self, x) -> Tensor:
        x = ag.as_tensor(x)
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != self.cfg.n_mels:
            raise ValueError(
                f"expected input of shape (B, 1, {self.cfg.n_mels}, frames), got {x.shape}"
            )
        if x.shape[0] < 1:
            raise ValueError("empty batch")
        for conv, bn, pool in self.blocks:
            x = bn(conv(x, self.training), self.training).relu()
            if pool:
                x = ag.max_pool2d(x, 2)
        return self.dense(ag.global_avg_pool(x), self.training)

    def forward(self, x) -> Tensor:
        """Class probabilities, shape (B, n_classes)."""
        return ag.softmax(self.logits(x), axis=1)

    __call__ = forward

    def predict_proba(self, x) -> np.ndarray:
        """Eval-mode probabilities without building a graph."""
        was = self.training
        self.eval()
        try:
            with ag.no_grad():
                return self.forward(np.asarray(x, dtype=np.float64)).data
        finally:
            self.training = was


def build_model(cfg: ModelConfig | None = None) -> Model:
    return Model(cfg or ModelConfig())


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adamw_step(params, grads, state: AdamState, lr, weight_decay=0.01,
               beta1=0.9, beta2=0.999, eps=1e-8) -> bool:
    """One in-place AdamW update with decoupled weight decay.

    ``params`` and ``grads`` are parallel lists of arrays. Returns False and
    leaves everything untouched if any gradient is non-finite.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
    if not all(np.all(np.isfinite(g)) for g in grads):
        log.warning("non-finite gradient at step %d; update skipped", state.step + 1)
        return False
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]

    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * ((m / c1) / (np.sqrt(v / c2) + eps) + weight_decay * p)
    return True


class AdamW:
    def __init__(self, params, weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self, lr) -> bool:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        return adamw_step([p.data for p in self.params], grads, self.state, lr,
                          self.weight_decay, *self.betas, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: Model, path) -> None:
    """Write config and all named arrays to a ``.npz`` archive."""
    arrays = {f"param/{k}": v.data for k, v in model.named_parameters().items()}
    arrays.update({f"buffer/{k}": v for k, v in model.named_buffers().items()})
    cfg = asdict(model.cfg)
    arrays["config"] = np.frombuffer(json.dumps(cfg, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> Model:
    with np.load(Path(path)) as z:
        cfg = json.loads(bytes(z["config"]).decode())
        cfg["channels"] = tuple(cfg["channels"])
        model = Model(ModelConfig(**cfg))
        for k, p in model.named_parameters().items():
            p.data[...] = z[f"param/{k}"]
        for k, b in model.named_buffers().items():
            b[...] = z[f"buffer/{k}"]
    return model.eval()
