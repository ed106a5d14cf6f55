"""Learnable volume selection: lambda-conditioned cross-attention over feature volumes.

Pipeline for one mixing event::

    encode -> partition_{spatial,temporal} -> embed_lambda -> attend -> upsample

Queries come from video i, keys and values from video j. The attention
response passes through a sigmoid and is inverted, so volumes of x_i that
look least like x_j get the largest weight.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as tt
from .errors import ConfigError, ContractError, ParameterError
from .tensor import Tensor


class Kind(str, enum.Enum):
    SPATIAL = "spatial"
    TEMPORAL = "temporal"


@dataclass
class FeatureGrid:
    values: Tensor                   # B x T' x H' x W' x C_f
    factors: Tuple[int, int, int]    # (T/T', H/H', W/W')

    @property
    def shape(self):
        return self.values.shape


@dataclass
class VolumeSet:
    volumes: Tensor                  # G x N x C
    kind: Kind
    grid: Tuple[int, int, int, int]  # (B, T', H', W') of the source feature grid

    @property
    def groups(self) -> int:
        return self.volumes.shape[0]

    @property
    def count(self) -> int:
        return self.volumes.shape[1]

    def sample_of_group(self) -> np.ndarray:
        """Batch index b for every group g."""
        B, T = self.grid[:2]
        return np.repeat(np.arange(B), T) if self.kind is Kind.SPATIAL else np.arange(B)

    def cells(self, g: int, n: int) -> List[Tuple[int, int, int, int]]:
        """Feature-grid cells (b, t', h', w') covered by volume n of group g."""
        B, T, H, W = self.grid
        if self.kind is Kind.SPATIAL:
            b, t = divmod(g, T)
            h, w = divmod(n, W)
            return [(b, t, h, w)]
        return [(g, n, h, w) for h in range(H) for w in range(W)]


@dataclass
class MixMask:
    weights: Tensor                  # B x T x H x W in [0, 1]
    lam: np.ndarray                  # per-sample label proportion
    kind: str                        # "spatial", "temporal", "average", "mixup" or "cutmix"
    draw: Optional[float] = None     # ensemble draw that picked the kind, if any

    def detached(self) -> "MixMask":
        return MixMask(tt.detach(self.weights), self.lam, self.kind, self.draw)


@dataclass
class SelectorParams:
    w_q: Tensor   # C_in x d_k
    w_k: Tensor   # C_in x d_k
    w_v: Tensor   # C_in x 1

    @property
    def d_k(self) -> int:
        return self.w_q.shape[1]

    @property
    def in_dim(self) -> int:
        return self.w_q.shape[0]

    @classmethod
    def init(cls, in_dim: int, d_k: int, rng: np.random.Generator, value_scale: float = 0.1) -> "SelectorParams":
        s = 1.0 / np.sqrt(in_dim)
        return cls(
            Tensor(rng.normal(0.0, s, (in_dim, d_k)), requires_grad=True, name="w_q"),
            Tensor(rng.normal(0.0, s, (in_dim, d_k)), requires_grad=True, name="w_k"),
            Tensor(rng.normal(0.0, s * value_scale, (in_dim, 1)), requires_grad=True, name="w_v"),
        )

    def parameters(self) -> List[Tensor]:
        return [self.w_q, self.w_k, self.w_v]

    def state_dict(self, prefix: str = "") -> Dict[str, np.ndarray]:
        return {f"{prefix}w_q": self.w_q.data.copy(), f"{prefix}w_k": self.w_k.data.copy(),
                f"{prefix}w_v": self.w_v.data.copy()}


# -- stages ------------------------------------------------------------------

def encode(frames, teacher) -> FeatureGrid:
    """Teacher trunk features; no graph is recorded through the teacher."""
    x = frames if isinstance(frames, Tensor) else Tensor(frames)
    with tt.no_grad():
        z = teacher.features(x)
    T, H, W = x.shape[1:4]
    Tf, Hf, Wf = z.shape[1:4]
    return FeatureGrid(tt.detach(z), _factors((T, H, W), (Tf, Hf, Wf)))


def _factors(full, small) -> Tuple[int, int, int]:
    out = []
    for a, b in zip(full, small):
        if b == 0 or a % b:
            raise ConfigError(f"feature grid {small} does not tile input {full} by integer factors", "upsample")
        out.append(a // b)
    return tuple(out)


def partition_spatial(z: FeatureGrid) -> VolumeSet:
    B, T, H, W, C = z.shape
    return VolumeSet(tt.reshape(z.values, (B * T, H * W, C)), Kind.SPATIAL, (B, T, H, W))


def partition_temporal(z: FeatureGrid) -> VolumeSet:
    B, T, H, W, C = z.shape
    return VolumeSet(tt.mean(z.values, axis=(2, 3)), Kind.TEMPORAL, (B, T, H, W))


def partition(z: FeatureGrid, kind) -> VolumeSet:
    return partition_spatial(z) if Kind(kind) is Kind.SPATIAL else partition_temporal(z)


def embed_lambda(v: VolumeSet, lam, side: str) -> VolumeSet:
    """Append a constant channel holding lam (side "i") or 1 - lam (side "j").

    ``lam`` is a scalar or one value per batch sample.
    """
    lam_arr = np.asarray(lam, dtype=np.float64)
    if np.any(lam_arr <= 0.0) or np.any(lam_arr >= 1.0):
        raise ParameterError(f"lambda must lie in (0, 1), got {lam}")
    if side not in ("i", "j"):
        raise ParameterError(f"side must be 'i' or 'j', got {side!r}")
    B = v.grid[0]
    lam_arr = np.broadcast_to(lam_arr, (B,))
    per_group = lam_arr[v.sample_of_group()]
    value = per_group if side == "i" else 1.0 - per_group
    col = np.broadcast_to(value[:, None, None], (v.groups, v.count, 1))
    return VolumeSet(tt.concat([v.volumes, Tensor(col)], axis=2), v.kind, v.grid)


def _invert(response: Tensor) -> Tensor:
    return 1.0 - response


def attend(v_i: VolumeSet, v_j: VolumeSet, p: SelectorParams) -> Tensor:
    """Per-volume keep weight for x_i, G x N, strictly inside (0, 1)."""
    if v_i.kind is not v_j.kind:
        raise ContractError(f"volume kinds differ: {v_i.kind.value} vs {v_j.kind.value}")
    if v_i.volumes.shape != v_j.volumes.shape:
        raise ContractError(f"volume sets differ in shape: {v_i.volumes.shape} vs {v_j.volumes.shape}")
    G, N, C = v_i.volumes.shape
    if C != p.in_dim:
        raise ContractError(f"volumes have {C} channels, selector expects {p.in_dim}")
    d_k = p.d_k
    flat_i = tt.reshape(v_i.volumes, (G * N, C))
    flat_j = tt.reshape(v_j.volumes, (G * N, C))
    q = tt.reshape(tt.matmul(flat_i, p.w_q), (G, N, d_k))
    k = tt.reshape(tt.matmul(flat_j, p.w_k), (G, N, d_k))
    v = tt.reshape(tt.matmul(flat_j, p.w_v), (G, N, 1))
    scores = tt.softmax(tt.matmul(q, tt.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(d_k)), axis=-1)
    response = tt.reshape(tt.matmul(scores, v), (G, N))
    return _invert(tt.sigmoid(response))


def _linear_weights(n_in: int, n_out: int) -> np.ndarray:
    """n_in x n_out half-pixel-centred linear interpolation matrix (columns sum to 1)."""
    m = np.zeros((n_in, n_out))
    scale = n_in / n_out
    for o in range(n_out):
        src = min(max((o + 0.5) * scale - 0.5, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[lo, o] += 1.0 - frac
        m[hi, o] += frac
    return m


def _resize_axis(x: Tensor, axis: int, n_out: int) -> Tensor:
    n_in = x.shape[axis]
    if n_in == n_out:
        return x
    perm = [a for a in range(x.ndim) if a != axis] + [axis]
    moved = tt.transpose(x, perm)
    lead = moved.shape[:-1]
    out = tt.matmul(tt.reshape(moved, (-1, n_in)), Tensor(_linear_weights(n_in, n_out)))
    out = tt.reshape(out, lead + (n_out,))
    return tt.transpose(out, list(np.argsort(perm)))


def upsample(raw: Tensor, kind, grid: Tuple[int, int, int, int], target: Tuple[int, int, int],
             mode: str = "nearest") -> Tensor:
    """Expand G x N volume weights to a B x T x H x W mask."""
    kind = Kind(kind)
    B, Tf, Hf, Wf = grid
    if kind is Kind.SPATIAL:
        small = tt.reshape(raw, (B, Tf, Hf, Wf))
        factors = _factors(target, (Tf, Hf, Wf))
    else:
        small = tt.reshape(raw, (B, Tf, 1, 1))
        factors = _factors(target, (Tf, 1, 1))
    if mode == "nearest":
        out = small
        for axis, f in enumerate(factors, start=1):
            out = tt.repeat(out, f, axis)
        return out
    if mode == "trilinear":
        out = _resize_axis(small, 1, target[0])
        if kind is Kind.SPATIAL:
            out = _resize_axis(_resize_axis(out, 2, target[1]), 3, target[2])
            return out
        return tt.repeat(tt.repeat(out, target[1], 2), target[2], 3)
    raise ConfigError(f"unknown upsample mode {mode!r}", "upsample")


# -- composition ---------------------------------------------------------------

@dataclass
class VolumeSelector:
    """Selector parameters plus the switches that shape the mask computation.

    With ``share_params`` one parameter set serves both kinds; otherwise each
    kind owns a separate set.
    """
    params: Dict[Kind, SelectorParams]
    embed: bool = True
    upsample_mode: str = "nearest"

    @classmethod
    def create(cls, feature_channels: int, d_k: int, rng: np.random.Generator, share_params: bool = True,
               embed: bool = True, upsample_mode: str = "nearest") -> "VolumeSelector":
        if d_k < 1:
            raise ConfigError("must be >= 1", "d_k")
        if upsample_mode not in ("nearest", "trilinear"):
            raise ConfigError(f"unknown upsample mode {upsample_mode!r}", "upsample")
        in_dim = feature_channels + (1 if embed else 0)
        shared = SelectorParams.init(in_dim, d_k, rng)
        if share_params:
            params = {Kind.SPATIAL: shared, Kind.TEMPORAL: shared}
        else:
            params = {Kind.SPATIAL: shared, Kind.TEMPORAL: SelectorParams.init(in_dim, d_k, rng)}
        return cls(params, embed, upsample_mode)

    @property
    def shared(self) -> bool:
        return self.params[Kind.SPATIAL] is self.params[Kind.TEMPORAL]

    def parameters(self) -> List[Tensor]:
        seen, out = set(), []
        for p in self.params.values():
            if id(p) not in seen:
                seen.add(id(p))
                out.extend(p.parameters())
        return out

    def state_dict(self) -> Dict[str, np.ndarray]:
        if self.shared:
            return self.params[Kind.SPATIAL].state_dict("shared.")
        out = {}
        for kind, p in self.params.items():
            out.update(p.state_dict(f"{kind.value}."))
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        current = {}
        for kind, p in self.params.items():
            prefix = "shared." if self.shared else f"{kind.value}."
            for name in ("w_q", "w_k", "w_v"):
                current[prefix + name] = getattr(p, name)
        if set(current) != set(state):
            raise ConfigError(f"selector parameter names differ: {sorted(set(current) ^ set(state))}")
        for k, v in state.items():
            if current[k].shape != v.shape:
                raise ConfigError(f"shape {v.shape} != {current[k].shape}", k)
            current[k].data = np.array(v, dtype=np.float64)

    def raw_mask(self, z_i: FeatureGrid, z_j: FeatureGrid, lam, kind) -> Tuple[Tensor, VolumeSet]:
        kind = Kind(kind)
        v_i, v_j = partition(z_i, kind), partition(z_j, kind)
        if self.embed:
            v_i, v_j = embed_lambda(v_i, lam, "i"), embed_lambda(v_j, lam, "j")
        return attend(v_i, v_j, self.params[kind]), v_i

    def mask_from_features(self, z_i: FeatureGrid, z_j: FeatureGrid, lam, kind,
                           target: Tuple[int, int, int]) -> MixMask:
        raw, v = self.raw_mask(z_i, z_j, lam, kind)
        weights = upsample(raw, kind, v.grid, target, self.upsample_mode)
        lam_arr = np.broadcast_to(np.asarray(lam, dtype=np.float64), (z_i.shape[0],)).copy()
        return MixMask(weights, lam_arr, Kind(kind).value)


def select(x_i, x_j, lam, kind, selector: Union[VolumeSelector, SelectorParams], teacher,
           upsample_mode: str = "nearest") -> MixMask:
    """Mixing mask for the pair (x_i, x_j) from the teacher's features."""
    if isinstance(selector, SelectorParams):
        selector = VolumeSelector({Kind.SPATIAL: selector, Kind.TEMPORAL: selector},
                                  embed=True, upsample_mode=upsample_mode)
    fi = x_i.frames if hasattr(x_i, "frames") else x_i
    fj = x_j.frames if hasattr(x_j, "frames") else x_j
    z_i, z_j = encode(fi, teacher), encode(fj, teacher)
    target = tuple(np.shape(fi.data if isinstance(fi, Tensor) else fi)[1:4])
    return selector.mask_from_features(z_i, z_j, lam, kind, target)


def permute_grid(z: FeatureGrid, perm: Sequence[int]) -> FeatureGrid:
    """Reorder the batch of a detached feature grid."""
    return FeatureGrid(Tensor(z.values.data[np.asarray(perm)]), z.factors)
