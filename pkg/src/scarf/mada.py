"""Modality-agnostic deformable attention (MADA).

One pair of projectors reads the concatenated token ``z = [e_v | e_t]`` (or the
duplicated ``[e_s | e_s]`` when a modality is missing) and emits, per head,
four groups of ``K`` sampling offsets and attention logits. The groups are
ordered ``[v-update-from-v, v-update-from-t, t-update-from-v, t-update-from-t]``.

* complete input: groups 0-1 drive the visible update, 2-3 the infrared
  update; each update is normalised over its own ``2K`` points.
* incomplete input: both halves are merged into one ``[2, 2K]`` set that reads
  the single available map, normalised over all ``4K`` points.

Offsets are in grid units of the current map and are added to the integer
reference point ``(i, j)`` of each token.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Linear, Tensor

SOURCES = 2   # source-modality slots per output set
SLOTS = 4     # two output sets x two sources


@dataclass(frozen=True)
class MadaConfig:
    channels: int
    heads: int
    points: int = 4
    double_sampling: bool = True

    def __post_init__(self):
        if self.channels < 1 or self.heads < 1 or self.channels % self.heads:
            raise ValueError(f"channels ({self.channels}) must be divisible by heads ({self.heads})")
        if self.points < 1:
            raise ValueError("points (K) must be >= 1")

    @property
    def d_head(self) -> int:
        return self.channels // self.heads


@dataclass
class MadaParams:
    offset_proj: Linear   # 2c -> m*4*K*2
    weight_proj: Linear   # 2c -> m*4*K
    value_proj: Linear    # c -> m*d_head, shared by both modalities
    out_proj: Linear      # m*d_head -> c, shared by both outputs

    @classmethod
    def init(cls, cfg: MadaConfig, rng: np.random.Generator) -> "MadaParams":
        c, m, k = cfg.channels, cfg.heads, cfg.points
        offset = Linear.init(2 * c, m * SLOTS * k * 2, rng, zero=True)
        offset.bias.data[...] = radial_offset_bias(m, k)
        return cls(
            offset_proj=offset,
            weight_proj=Linear.init(2 * c, m * SLOTS * k, rng, zero=True),
            value_proj=Linear.init(c, m * cfg.d_head, rng),
            out_proj=Linear.init(m * cfg.d_head, c, rng),
        )


def radial_offset_bias(heads: int, points: int) -> np.ndarray:
    """Unit-radius offsets with a distinct direction per (head, slot, point)."""
    n = heads * SLOTS * points
    angles = 2.0 * math.pi * np.arange(n) / n
    return np.stack([np.sin(angles), np.cos(angles)], axis=-1).reshape(-1)


@dataclass
class SamplingSet:
    """Offsets ``[..., L, m, 2, Kp, 2]``, normalised weights ``[..., L, m, 2, Kp]``, reference ``[L, 2]``."""

    offsets: Tensor
    weights: Tensor
    reference: Tensor


def reference_points(height: int, width: int) -> Tensor:
    if height < 1 or width < 1:
        raise ValueError("reference_points needs H, W >= 1")
    ii, jj = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return Tensor(np.stack([ii.reshape(-1), jj.reshape(-1)], axis=-1).astype(np.float64))


def combine_tokens(e_v: Tensor | None, e_t: Tensor | None) -> Tensor:
    """``[e_v | e_t]``; a missing modality is filled by duplicating the present one."""
    if e_v is None and e_t is None:
        raise ValueError("no modality available")
    if e_v is None:
        return ad.concat([e_t, e_t], axis=-1)
    if e_t is None:
        return ad.concat([e_v, e_v], axis=-1)
    if e_v.shape != e_t.shape:
        raise DimensionError(f"token shapes differ: {e_v.shape} vs {e_t.shape}")
    return ad.concat([e_v, e_t], axis=-1)


def raw_projections(z: Tensor, params: MadaParams, cfg: MadaConfig) -> tuple[Tensor, Tensor]:
    """Raw offsets ``[..., L, m, 4, K, 2]`` and raw logits ``[..., L, m, 4, K]``."""
    if z.shape[-1] != 2 * cfg.channels:
        raise DimensionError(f"z has {z.shape[-1]} features, expected {2 * cfg.channels}")
    lead = z.shape[:-1]
    m, k = cfg.heads, cfg.points
    off = ad.reshape(params.offset_proj(z), lead + (m, SLOTS, k, 2))
    logits = ad.reshape(params.weight_proj(z), lead + (m, SLOTS, k))
    return off, logits


def _normalize(logits: Tensor) -> Tensor:
    return ad.softmax(logits, axes=2)


def _check_raw(off: Tensor, logits: Tensor) -> None:
    if off.ndim < 5 or off.shape[-3] != SLOTS or off.shape[-1] != 2 or off.shape[:-1] != logits.shape:
        raise DimensionError(f"raw offsets {off.shape} / weights {logits.shape} are not [.., m, 4, K, (2)]")


def split_complete(off: Tensor, logits: Tensor, reference: Tensor) -> tuple[SamplingSet, SamplingSet]:
    _check_raw(off, logits)
    lead = (Ellipsis,)
    sets = []
    for lo in (0, 2):
        o = ad.slice_(off, lead + (slice(lo, lo + 2), slice(None), slice(None)))
        w = ad.slice_(logits, lead + (slice(lo, lo + 2), slice(None)))
        sets.append(SamplingSet(o, _normalize(w), reference))
    return sets[0], sets[1]


def project_and_split_complete(z: Tensor, params: MadaParams, cfg: MadaConfig,
                               reference: Tensor | None = None) -> tuple[SamplingSet, SamplingSet]:
    """Visible-update and infrared-update sampling sets from combined tokens ``z[..., L, 2c]``."""
    off, logits = raw_projections(z, params, cfg)
    if reference is None:
        reference = Tensor(np.zeros((z.shape[-2], 2)))
    return split_complete(off, logits, reference)


def _merge(x: Tensor, trailing: tuple[int, ...]) -> Tensor:
    # [.., m, 4, K, *t] -> [.., m, set, src, K, *t] -> [.., m, src, set, K, *t] -> [.., m, 2, 2K, *t]
    lead = x.shape[: x.ndim - 3 - len(trailing)]
    k = x.shape[x.ndim - 1 - len(trailing)]
    n = len(lead)
    x = ad.reshape(x, lead + (x.shape[n], 2, SOURCES, k) + trailing)
    perm = list(range(n + 1)) + [n + 2, n + 1] + list(range(n + 3, n + 4 + len(trailing)))
    x = ad.transpose(x, perm)
    return ad.reshape(x, lead + (x.shape[n], SOURCES, 2 * k) + trailing)


def merge_incomplete(off: Tensor, logits: Tensor, reference: Tensor | None = None) -> SamplingSet:
    """Fold both halves into one ``[m, 2, 2K]`` set; first half at ``k < K``, second at ``k >= K``."""
    _check_raw(off, logits)
    if reference is None:
        reference = Tensor(np.zeros((off.shape[-5], 2)))
    return SamplingSet(_merge(off, (2,)), _normalize(_merge(logits, ())), reference)


def first_set_only(off: Tensor, logits: Tensor, reference: Tensor | None = None) -> SamplingSet:
    """Single-sampling ablation: keep only the first ``[m, 2, K]`` half, renormalised over ``2K``."""
    _check_raw(off, logits)
    if reference is None:
        reference = Tensor(np.zeros((off.shape[-5], 2)))
    o = ad.slice_(off, (Ellipsis, slice(0, 2), slice(None), slice(None)))
    w = ad.slice_(logits, (Ellipsis, slice(0, 2), slice(None)))
    return SamplingSet(o, _normalize(w), reference)


def _attend(values: list[Tensor], sset: SamplingSet, cfg: MadaConfig, hw: tuple[int, int]) -> Tensor:
    """Weighted deformable read. ``values[i]`` is the ``[B, H, W, m*dh]`` map bound to source slot ``i``."""
    B = values[0].shape[0]
    H, W = hw
    S, L, m, dh = len(values), H * W, cfg.heads, cfg.d_head
    kp = sset.offsets.shape[-2]
    # every (source, batch, head) map is one group of a single bilinear read
    vals = ad.reshape(ad.stack(values), (S, B, H, W, m, dh))
    vmap = ad.reshape(ad.transpose(vals, (0, 1, 4, 2, 3, 5)), (S * B * m, H, W, dh))
    pts = ad.add(sset.offsets, ad.reshape(sset.reference, (1, L, 1, 1, 1, 2)))      # [B, L, m, S, Kp, 2]
    pts = ad.reshape(ad.transpose(pts, (3, 0, 2, 1, 4, 5)), (S * B * m, L * kp, 2))
    sampled = ad.reshape(ad.bilinear_sample(vmap, pts), (S, B, m, L, kp, dh))
    w = ad.reshape(ad.transpose(sset.weights, (3, 0, 2, 1, 4)), (S, B, m, L, kp, 1))
    total = ad.sum_(ad.mul(sampled, w), axis=(0, 4))                                  # [B, m, L, dh]
    return ad.reshape(ad.transpose(total, (0, 2, 1, 3)), (B, L, m * dh))


def _batched(x: Tensor, cfg: MadaConfig) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        x = ad.reshape(x, (1,) + x.shape)
        unbatched = True
    elif x.ndim == 4:
        unbatched = False
    else:
        raise DimensionError(f"expected [H, W, c] or [B, H, W, c], got {x.shape}")
    if x.shape[-1] != cfg.channels:
        raise DimensionError(f"feature map has {x.shape[-1]} channels, config says {cfg.channels}")
    return x, unbatched


def _finish(y: Tensor, shape: tuple[int, ...], unbatched: bool) -> Tensor:
    y = ad.reshape(y, shape)
    return ad.reshape(y, shape[1:]) if unbatched else y


def mada_forward_complete(x_v, x_t, params: MadaParams, cfg: MadaConfig) -> tuple[Tensor, Tensor]:
    """Visible and infrared updates from both maps, ``[H, W, c]`` (or batched)."""
    x_v, x_t = ad.as_tensor(x_v), ad.as_tensor(x_t)
    if x_v.shape != x_t.shape:
        raise DimensionError(f"modality maps differ in shape: {x_v.shape} vs {x_t.shape}")
    x_v, unbatched = _batched(x_v, cfg)
    x_t, _ = _batched(x_t, cfg)
    B, H, W, c = x_v.shape
    L = H * W
    z = combine_tokens(ad.reshape(x_v, (B, L, c)), ad.reshape(x_t, (B, L, c)))
    set_v, set_t = project_and_split_complete(z, params, cfg, reference_points(H, W))
    values = [params.value_proj(x_v), params.value_proj(x_t)]
    y_v = params.out_proj(_attend(values, set_v, cfg, (H, W)))
    y_t = params.out_proj(_attend(values, set_t, cfg, (H, W)))
    return _finish(y_v, x_v.shape, unbatched), _finish(y_t, x_v.shape, unbatched)


def _forward_single(x_s, params: MadaParams, cfg: MadaConfig, double: bool) -> Tensor:
    x_s = ad.as_tensor(x_s)
    x_s, unbatched = _batched(x_s, cfg)
    B, H, W, c = x_s.shape
    L = H * W
    e = ad.reshape(x_s, (B, L, c))
    off, logits = raw_projections(combine_tokens(e, None), params, cfg)
    ref = reference_points(H, W)
    sset = merge_incomplete(off, logits, ref) if double else first_set_only(off, logits, ref)
    value = params.value_proj(x_s)
    y = params.out_proj(_attend([value, value], sset, cfg, (H, W)))
    return _finish(y, x_s.shape, unbatched)


def mada_forward_incomplete(x_s, params: MadaParams, cfg: MadaConfig) -> Tensor:
    """Update of the only available map using all ``4K`` points per head."""
    return _forward_single(x_s, params, cfg, double=True)


def mada_forward_incomplete_single_sampling(x_s, params: MadaParams, cfg: MadaConfig) -> Tensor:
    return _forward_single(x_s, params, cfg, double=False)
