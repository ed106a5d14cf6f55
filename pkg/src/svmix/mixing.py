"""Mask application, spatial/temporal ensembling and the Mixup / Cutmix baselines."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as tt
from .errors import ConfigError, ContractError, ParameterError
from .selector import FeatureGrid, Kind, MixMask, VolumeSelector, encode
from .tensor import Tensor


@dataclass
class MixedBatch:
    frames: Tensor          # B x T x H x W x C
    soft_labels: np.ndarray  # B x K
    lambdas: np.ndarray
    mask: MixMask
    kind: str


@dataclass(frozen=True)
class EnsemblePolicy:
    mode: str = "probabilistic"   # or "average"
    switch_prob: float = 0.5

    def __post_init__(self):
        if self.mode not in ("probabilistic", "average"):
            raise ConfigError(f"unknown ensemble mode {self.mode!r}", "ensemble_mode")
        if not 0.0 <= self.switch_prob <= 1.0:
            raise ConfigError(f"must be in [0, 1], got {self.switch_prob}", "switch_prob")


def _frames(x):
    return x.frames if hasattr(x, "frames") else x


def _labels(x):
    return x.labels


def mix_labels(y_i: np.ndarray, y_j: np.ndarray, lam) -> np.ndarray:
    lam = np.asarray(lam, dtype=np.float64).reshape(-1, 1)
    return lam * y_i + (1.0 - lam) * y_j


def blend(f_i, f_j, weights: Tensor) -> Tensor:
    """M * x_i + (1 - M) * x_j with the mask replicated over channels."""
    a = f_i if isinstance(f_i, Tensor) else Tensor(f_i)
    b = f_j if isinstance(f_j, Tensor) else Tensor(f_j)
    if a.shape != b.shape or a.shape[:4] != weights.shape:
        raise ContractError(f"cannot mix frames {a.shape} / {b.shape} with mask {weights.shape}")
    m = tt.repeat(tt.reshape(weights, weights.shape + (1,)), a.shape[4], 4)
    return m * a + (1.0 - m) * b


def apply_mask(x_i, x_j, mask: MixMask) -> MixedBatch:
    """Blend two aligned video batches; labels mix with the mask's sampled lambda."""
    frames = blend(_frames(x_i), _frames(x_j), mask.weights)
    soft = mix_labels(_labels(x_i), _labels(x_j), mask.lam)
    return MixedBatch(frames, soft, mask.lam, mask, mask.kind)


def choose_kind(policy: EnsemblePolicy, rng: np.random.Generator):
    """Probabilistic branch: mu ~ U(0, 1]; mu <= P picks temporal. Returns (kind, mu).

    Drawing from the half-open (0, 1] makes P = 0 and P = 1 exact.
    """
    mu = 1.0 - float(rng.random())
    return (Kind.TEMPORAL if mu <= policy.switch_prob else Kind.SPATIAL), mu


def ensemble_mask(selector: VolumeSelector, z_i: FeatureGrid, z_j: FeatureGrid, lam, target,
                  policy: EnsemblePolicy, rng: np.random.Generator, kind: Optional[Kind] = None) -> MixMask:
    """Mask from the ensemble of the two selective modules.

    ``kind`` short-circuits the probabilistic draw when the caller already made it.
    """
    if policy.mode == "average":
        m_t = selector.mask_from_features(z_i, z_j, lam, Kind.TEMPORAL, target)
        m_s = selector.mask_from_features(z_i, z_j, lam, Kind.SPATIAL, target)
        return MixMask((m_t.weights + m_s.weights) * 0.5, m_t.lam, "average")
    mu = None
    if kind is None:
        kind, mu = choose_kind(policy, rng)
    mask = selector.mask_from_features(z_i, z_j, lam, kind, target)
    mask.draw = mu
    return mask


def ensemble_select(x_i, x_j, lam, selector: VolumeSelector, teacher, policy: EnsemblePolicy,
                    rng: np.random.Generator) -> MixMask:
    f_i, f_j = _frames(x_i), _frames(x_j)
    target = tuple(np.shape(f_i)[1:4])
    return ensemble_mask(selector, encode(f_i, teacher), encode(f_j, teacher), lam, target, policy, rng)


def _check_lam(lam):
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(lam <= 0.0) or np.any(lam >= 1.0):
        raise ParameterError(f"lambda must lie in (0, 1), got {lam}")
    return lam


def mixup_baseline(x_i, x_j, lam) -> MixedBatch:
    """Constant mask lam over every pixel."""
    f_i = _frames(x_i)
    B, T, H, W = np.shape(f_i)[:4]
    lam = np.broadcast_to(_check_lam(lam), (B,)).copy()
    weights = Tensor(np.broadcast_to(lam[:, None, None, None], (B, T, H, W)))
    return apply_mask(x_i, x_j, MixMask(weights, lam, "mixup"))


def cutmix_box(H: int, W: int, lam: float, rng: np.random.Generator):
    """Rectangle (top, left, h, w) of area ~ (1 - lam) * H * W lying fully inside the frame."""
    ratio = np.sqrt(1.0 - lam)
    h = int(round(H * ratio))
    w = int(round(W * ratio))
    top = int(rng.integers(0, H - h + 1))
    left = int(rng.integers(0, W - w + 1))
    return top, left, h, w


def cutmix_baseline(x_i, x_j, lam, rng: np.random.Generator) -> MixedBatch:
    """Paste one box from x_j into every frame of x_i; lambda becomes the kept-area fraction."""
    f_i = _frames(x_i)
    B, T, H, W = np.shape(f_i)[:4]
    lam = np.broadcast_to(_check_lam(lam), (B,))
    weights = np.ones((B, T, H, W))
    kept = np.empty(B)
    for b in range(B):
        top, left, h, w = cutmix_box(H, W, float(lam[b]), rng)
        weights[b, :, top:top + h, left:left + w] = 0.0
        kept[b] = 1.0 - (h * w) / (H * W)
    return apply_mask(x_i, x_j, MixMask(Tensor(weights), kept, "cutmix"))
