"""Synthetic moving-shape videos, in-batch pairing and Beta(alpha, alpha) mixing ratios.

Each class is a motion direction. Objects live on a torus (they wrap around
the frame borders) and their position at the reference frame is uniform, so
the position, size, shape and brightness seen in any single frame have the
same distribution for every class: only the displacement between frames
carries the label. Leading and trailing frames hold background only.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional, Tuple

import numpy as np

from .errors import ConfigError, ContractError, ParameterError

# (dy, dx) unit steps; the class index selects the direction
MOTIONS = (
    ("right", (0, 1)),
    ("left", (0, -1)),
    ("down", (1, 0)),
    ("up", (-1, 0)),
    ("down-right", (1, 1)),
    ("up-left", (-1, -1)),
    ("down-left", (1, -1)),
    ("up-right", (-1, 1)),
)


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 4
    samples_per_class: int = 8
    val_per_class: int = 32
    frames: int = 8
    height: int = 32
    width: int = 32
    channels: int = 1
    lead_background: int = 1
    trail_background: int = 1
    noise_std: float = 0.1
    speed: Tuple[float, float] = (2.0, 4.0)
    size: Tuple[int, int] = (5, 9)
    clutter: int = 0
    split_seed: int = 7

    def validate(self):
        if not 2 <= self.num_classes <= len(MOTIONS):
            raise ConfigError(f"must be in [2, {len(MOTIONS)}], got {self.num_classes}", "num_classes")
        if self.samples_per_class < 2:
            raise ConfigError("must be >= 2", "samples_per_class")
        if self.val_per_class < 1:
            raise ConfigError("must be >= 1", "val_per_class")
        if self.frames < 4:
            raise ConfigError("must be >= 4", "frames")
        if self.height < 4 or self.width < 4 or self.channels < 1:
            raise ConfigError(f"degenerate frame size {self.height}x{self.width}x{self.channels}", "height")
        if self.lead_background < 0 or self.trail_background < 0:
            raise ConfigError("must be >= 0", "lead_background")
        if self.frames - self.lead_background - self.trail_background < 2:
            raise ConfigError("fewer than two foreground frames remain", "trail_background")
        if self.noise_std < 0:
            raise ConfigError("must be >= 0", "noise_std")
        lo, hi = self.size
        if not 1 <= lo <= hi < min(self.height, self.width):
            raise ConfigError(f"object size range {self.size} does not fit the frame", "size")
        if self.clutter < 0:
            raise ConfigError("must be >= 0", "clutter")
        if not 0 <= self.speed[0] <= self.speed[1]:
            raise ConfigError(f"bad speed range {self.speed}", "speed")

    @property
    def motion_classes(self):
        return [name for name, _ in MOTIONS[: self.num_classes]]

    def foreground(self, t: int) -> bool:
        return self.lead_background <= t < self.frames - self.trail_background


@dataclass
class VideoBatch:
    frames: np.ndarray   # B x T x H x W x C, values in [0, 1]
    labels: np.ndarray   # B x K one-hot
    ids: np.ndarray      # B integer identifiers

    def __post_init__(self):
        if self.frames.ndim != 5:
            raise ContractError(f"frames must be 5-d (B,T,H,W,C), got {self.frames.shape}")
        if not (len(self.frames) == len(self.labels) == len(self.ids)):
            raise ContractError("frames, labels and ids disagree on batch size")

    def __len__(self):
        return len(self.frames)

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]

    @property
    def classes(self) -> np.ndarray:
        return self.labels.argmax(axis=1)

    def subset(self, index) -> "VideoBatch":
        index = np.asarray(index)
        return VideoBatch(self.frames[index], self.labels[index], self.ids[index])

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None,
                drop_last: bool = False) -> Iterator["VideoBatch"]:
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            if drop_last and len(idx) < batch_size:
                break
            yield self.subset(idx)


def _render(spec: DatasetSpec, label: int, rng: np.random.Generator) -> np.ndarray:
    T, H, W, C = spec.frames, spec.height, spec.width, spec.channels
    dy, dx = MOTIONS[label][1]
    norm = np.hypot(dy, dx)
    speed = rng.uniform(*spec.speed)
    vy, vx = speed * dy / norm, speed * dx / norm
    cy, cx = rng.uniform(0, H), rng.uniform(0, W)
    radius = rng.integers(spec.size[0], spec.size[1] + 1) / 2.0
    disc = rng.random() < 0.5
    level = rng.uniform(0.05, 0.25, size=C)
    ink = rng.uniform(0.6, 0.9, size=C)
    ref = (T - 1) / 2.0

    yy = np.arange(H)[:, None] + 0.5
    xx = np.arange(W)[None, :] + 0.5

    def footprint(py, px, r, round_):
        ddy = (yy - py + H / 2) % H - H / 2
        ddx = (xx - px + W / 2) % W - W / 2
        if round_:
            return ddy ** 2 + ddx ** 2 <= r ** 2
        return (np.abs(ddy) <= r) & (np.abs(ddx) <= r)

    # static distractors drawn like the mover; present in every frame
    backdrop = np.broadcast_to(level, (H, W, C)).copy()
    for _ in range(spec.clutter):
        r = rng.integers(spec.size[0], spec.size[1] + 1) / 2.0
        where = footprint(rng.uniform(0, H), rng.uniform(0, W), r, rng.random() < 0.5)
        backdrop[where] = rng.uniform(0.6, 0.9, size=C)

    video = np.empty((T, H, W, C))
    for t in range(T):
        frame = backdrop.copy()
        if spec.foreground(t):
            frame[footprint(cy + vy * (t - ref), cx + vx * (t - ref), radius, disc)] = ink
        video[t] = frame
    video += rng.normal(0.0, spec.noise_std, size=video.shape)
    return np.clip(video, 0.0, 1.0)


def _make_split(spec: DatasetSpec, per_class: int, split: int) -> VideoBatch:
    K = spec.num_classes
    n = K * per_class
    labels = np.repeat(np.arange(K), per_class)
    seeds = np.random.SeedSequence([spec.split_seed, split]).spawn(n)
    frames = np.stack([_render(spec, int(labels[i]), np.random.default_rng(seeds[i])) for i in range(n)])
    onehot = np.zeros((n, K))
    onehot[np.arange(n), labels] = 1.0
    ids = split * 1_000_000 + np.arange(n, dtype=np.int64)
    return VideoBatch(frames, onehot, ids)


def generate(spec: DatasetSpec) -> Tuple[VideoBatch, VideoBatch]:
    """Build the (train, val) splits; pure in ``spec``."""
    spec.validate()
    return _make_split(spec, spec.samples_per_class, 0), _make_split(spec, spec.val_per_class, 1)


@dataclass
class LambdaSampler:
    """Beta(alpha, alpha) draws from the ratio of two Gamma(alpha) variates."""
    alpha: float
    rng_seed: int = 0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if not self.alpha > 0:
            raise ParameterError(f"alpha must be positive, got {self.alpha}")
        self.rng = np.random.default_rng(self.rng_seed)

    def sample(self, size=None):
        return beta_from_gammas(self.rng, self.alpha, size)


_LO = np.nextafter(0.0, 1.0)
_HI = np.nextafter(1.0, 0.0)


def beta_from_gammas(rng: np.random.Generator, alpha: float, size=None):
    if not alpha > 0:
        raise ParameterError(f"alpha must be positive, got {alpha}")
    g1 = rng.standard_gamma(alpha, size)
    g2 = rng.standard_gamma(alpha, size)
    # for small alpha one gamma can be below float64 resolution of the other;
    # keep draws strictly inside (0, 1)
    lam = np.clip(g1 / (g1 + g2), _LO, _HI)
    return float(lam) if size is None else lam


def sample_lambda(sampler: LambdaSampler, size=None):
    return sampler.sample(size)


def pair_batches(batch: VideoBatch, rng: np.random.Generator):
    """Pair every sample with a partner drawn by a uniform permutation of the batch.

    Returns ``(b_i, b_j, perm)`` with ``b_j = b_i.subset(perm)``.
    """
    if len(batch) < 2:
        raise ContractError(f"pairing needs at least 2 samples, got {len(batch)}")
    perm = rng.permutation(len(batch))
    return batch, batch.subset(perm), perm
