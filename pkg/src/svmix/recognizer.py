"""Toy (2+1)-d video classifier and the soft-target cross-entropy loss.

Each stage is a per-frame k x k convolution (optionally strided) followed by
a temporal convolution across neighbouring frames, both with ReLU. The last
stage's activations form the feature grid; the head average-pools it and
maps to class logits.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as tt
from .errors import ConfigError, ContractError
from .tensor import Tensor


@dataclass(frozen=True)
class RecognizerConfig:
    frames: int = 8
    height: int = 32
    width: int = 32
    channels: int = 1
    num_classes: int = 4
    widths: Tuple[int, ...] = (8, 16)
    strides: Tuple[int, ...] = (2, 2)
    kernel: int = 3
    temporal_kernel: int = 3
    dropout: float = 0.0
    head_init: str = "zero"
    norm: bool = True

    def validate(self):
        if len(self.widths) != len(self.strides) or not 1 <= len(self.widths) <= 4:
            raise ConfigError("widths and strides must have equal length in [1, 4]", "widths")
        if self.kernel % 2 == 0 or self.temporal_kernel % 2 == 0:
            raise ConfigError("kernels must be odd", "kernel")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("must be in [0, 1)", "dropout")
        if self.head_init not in ("zero", "he"):
            raise ConfigError("must be 'zero' or 'he'", "head_init")
        h, w = self.height, self.width
        for s in self.strides:
            if h % s or w % s:
                raise ConfigError(f"stride {s} does not divide frame size {h}x{w}", "strides")
            h, w = h // s, w // s

    @property
    def feature_shape(self) -> Tuple[int, int, int, int]:
        """(T', H', W', C_f) of the trunk output."""
        down = int(np.prod(self.strides))
        return self.frames, self.height // down, self.width // down, self.widths[-1]


@functools.lru_cache(maxsize=64)
def _spatial_index(n, hp, wp, c, k, stride):
    base = np.arange(n * hp * wp * c).reshape(n, hp, wp, c)
    win = np.lib.stride_tricks.sliding_window_view(base, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]                 # n, ho, wo, c, k, k
    win = win.transpose(0, 1, 2, 4, 5, 3)            # n, ho, wo, k, k, c
    return np.ascontiguousarray(win.reshape(-1, k * k * c)), win.shape[1], win.shape[2]


@functools.lru_cache(maxsize=64)
def _temporal_index(b, tp, rest, c, k):
    base = np.arange(b * tp * rest * c).reshape(b, tp, rest, c)
    win = np.lib.stride_tricks.sliding_window_view(base, k, axis=1)   # b, t, rest, c, k
    win = win.transpose(0, 1, 2, 4, 3)
    return np.ascontiguousarray(win.reshape(-1, k * c))


def spatial_conv(x: Tensor, weight: Tensor, bias: Tensor, stride: int) -> Tensor:
    """x: N x H x W x C_in, weight: (k*k*C_in) x C_out, 'same' padding."""
    n, h, w, c = x.shape
    k = int(round(np.sqrt(weight.shape[0] // c)))
    p = k // 2
    xp = tt.pad(x, [(0, 0), (p, p), (p, p), (0, 0)])
    idx, ho, wo = _spatial_index(n, h + 2 * p, w + 2 * p, c, k, stride)
    cols = tt.take(xp, idx)
    out = tt.bias_add(tt.matmul(cols, weight), bias)
    return tt.reshape(out, (n, ho, wo, weight.shape[1]))


def temporal_conv(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x: B x T x H x W x C_in, weight: (k*C_in) x C_out, 'same' padding in time."""
    b, t, h, w, c = x.shape
    k = weight.shape[0] // c
    p = k // 2
    xp = tt.pad(x, [(0, 0), (p, p), (0, 0), (0, 0), (0, 0)])
    idx = _temporal_index(b, t + 2 * p, h * w, c, k)
    cols = tt.take(xp, idx)
    out = tt.bias_add(tt.matmul(cols, weight), bias)
    return tt.reshape(out, (b, t, h, w, weight.shape[1]))


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardise every channel of every clip over (T, H, W)."""
    b, t, h, w, c = x.shape

    def spread(stat):
        out = tt.reshape(stat, (b, 1, 1, 1, c))
        return tt.repeat(tt.repeat(tt.repeat(out, t, 1), h, 2), w, 3)

    centred = x - spread(tt.mean(x, axis=(1, 2, 3)))
    var = tt.mean(centred * centred, axis=(1, 2, 3))
    return centred * spread(tt.power(var + eps, -0.5))


def init_params(cfg: RecognizerConfig, rng: np.random.Generator) -> Dict[str, Tensor]:
    """He-style fan-in normal initialisation; biases start at zero."""
    cfg.validate()
    params = {}
    c_in = cfg.channels
    for i, c_out in enumerate(cfg.widths):
        fan = cfg.kernel * cfg.kernel * c_in
        params[f"s{i}.w"] = rng.normal(0.0, np.sqrt(2.0 / fan), (fan, c_out))
        params[f"s{i}.b"] = np.zeros(c_out)
        fan = cfg.temporal_kernel * c_out
        params[f"t{i}.w"] = rng.normal(0.0, np.sqrt(2.0 / fan), (fan, c_out))
        params[f"t{i}.b"] = np.zeros(c_out)
        if cfg.norm:
            params[f"n{i}.g"] = np.ones(c_out)
            params[f"n{i}.b"] = np.zeros(c_out)
        c_in = c_out
    if cfg.head_init == "zero":
        params["head.w"] = np.zeros((c_in, cfg.num_classes))
    else:
        params["head.w"] = rng.normal(0.0, np.sqrt(2.0 / c_in), (c_in, cfg.num_classes))
    params["head.b"] = np.zeros(cfg.num_classes)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}


class Recognizer:
    def __init__(self, cfg: RecognizerConfig, params: Dict[str, Tensor]):
        cfg.validate()
        self.cfg = cfg
        self.params = params

    @classmethod
    def create(cls, cfg: RecognizerConfig, rng: np.random.Generator) -> "Recognizer":
        return cls(cfg, init_params(cfg, rng))

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self, requires_grad: bool = True) -> "Recognizer":
        return Recognizer(self.cfg, {k: Tensor(v.data.copy(), requires_grad=requires_grad, name=k)
                                     for k, v in self.params.items()})

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        if set(state) != set(self.params):
            raise ConfigError(f"parameter names differ: {sorted(set(state) ^ set(self.params))}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ConfigError(f"shape {v.shape} != {self.params[k].shape}", k)
            self.params[k].data = np.array(v, dtype=np.float64)

    def _check_input(self, x: Tensor):
        c = self.cfg
        want = (c.frames, c.height, c.width, c.channels)
        if x.ndim != 5 or x.shape[1:] != want:
            raise ConfigError(f"input shape {x.shape} does not match (B,) + {want}", "input")

    def features(self, x: Tensor) -> Tensor:
        """Trunk activations, B x T' x H' x W' x C_f."""
        self._check_input(x)
        c, p = self.cfg, self.params
        b, t = x.shape[:2]
        h = x
        for i, stride in enumerate(c.strides):
            _, _, hh, ww, cin = h.shape
            s = spatial_conv(tt.reshape(h, (b * t, hh, ww, cin)), p[f"s{i}.w"], p[f"s{i}.b"], stride)
            s = tt.relu(s)
            s = tt.reshape(s, (b, t) + s.shape[1:])
            h = temporal_conv(s, p[f"t{i}.w"], p[f"t{i}.b"])
            if c.norm:
                h = tt.bias_add(tt.scale_last(instance_norm(h), p[f"n{i}.g"]), p[f"n{i}.b"])
            h = tt.relu(h)
        return h

    def head(self, feats: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        pooled = tt.mean(feats, axis=(1, 2, 3))
        if rng is not None and self.cfg.dropout > 0:
            keep = (rng.random(pooled.shape) >= self.cfg.dropout) / (1.0 - self.cfg.dropout)
            pooled = pooled * Tensor(keep)
        return tt.bias_add(tt.matmul(pooled, self.params["head.w"]), self.params["head.b"])

    def forward(self, x: Tensor, return_features: bool = False,
                rng: Optional[np.random.Generator] = None):
        """Logits (and the feature grid if asked). ``rng`` enables dropout."""
        feats = self.features(x)
        logits = self.head(feats, rng)
        return (logits, feats) if return_features else logits

    __call__ = forward


def soft_ce(logits: Tensor, soft_labels, tol: float = 1e-9) -> Tensor:
    """Mean over the batch of -sum_k y_k log softmax(logits)_k."""
    y = np.asarray(soft_labels.data if isinstance(soft_labels, Tensor) else soft_labels, dtype=np.float64)
    if y.shape != logits.shape:
        raise ContractError(f"labels shape {y.shape} != logits shape {logits.shape}")
    if np.any(y < -tol) or np.any(np.abs(y.sum(axis=1) - 1.0) > tol):
        raise ContractError("soft labels must lie on the probability simplex")
    logp = tt.log_softmax(logits, axis=1)
    return -tt.mean(tt.tsum(logp * Tensor(y), axis=1))


def accuracy(logits: Tensor, labels: np.ndarray) -> float:
    return float(np.mean(logits.data.argmax(axis=1) == np.asarray(labels).argmax(axis=1)))


def evaluate(model: Recognizer, batch, batch_size: int = 64) -> float:
    correct = 0
    with tt.no_grad():
        for chunk in batch.batches(batch_size):
            logits = model(Tensor(chunk.frames))
            correct += int(np.sum(logits.data.argmax(axis=1) == chunk.classes))
    return correct / len(batch)

