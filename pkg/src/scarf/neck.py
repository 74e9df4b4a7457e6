"""Scarf Block, per-scale Scarf Group and the multi-scale Scarf Neck.

A block updates each available modality stream with MADA, then applies the
post-norm transformer pattern ``u = norm1(x + y); out = norm2(u + ffn(u))``.
FFN and norm parameters are shared by the two streams. A group runs its blocks
and fuses the streams with a 1x1 convolution over ``concat(vis, ir)``; with a
missing modality the surviving map is duplicated so the same fuse weights
apply.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Linear, Parameter, Tensor
from .mada import (
    MadaConfig,
    MadaParams,
    mada_forward_complete,
    mada_forward_incomplete,
    mada_forward_incomplete_single_sampling,
)


@dataclass
class FeatureBundle:
    vis: Tensor | None
    ir: Tensor | None
    scale_index: int = 0

    def __post_init__(self):
        if self.vis is None and self.ir is None:
            raise ValueError("no modality available")
        if self.vis is not None:
            self.vis = ad.as_tensor(self.vis)
        if self.ir is not None:
            self.ir = ad.as_tensor(self.ir)
        if self.vis is not None and self.ir is not None and self.vis.shape != self.ir.shape:
            raise DimensionError(f"vis {self.vis.shape} and ir {self.ir.shape} differ")

    @property
    def missing(self) -> str | None:
        if self.vis is None:
            return "vis"
        if self.ir is None:
            return "ir"
        return None


@dataclass(frozen=True)
class BlockConfig:
    mada: MadaConfig
    use_ffn: bool = True
    use_norm: bool = True
    eps: float = 1e-5


@dataclass(frozen=True)
class NeckConfig:
    """Per-scale channel widths and head counts plus settings shared by every block."""

    channels: tuple[int, ...] = (96, 192, 384, 768)
    heads: tuple[int, ...] = (3, 6, 12, 24)
    blocks: int = 2
    points: int = 4
    ffn_ratio: int = 2
    use_ffn: bool = True
    use_norm: bool = True
    double_sampling: bool = True

    def __post_init__(self):
        if len(self.channels) < 1 or len(self.channels) != len(self.heads):
            raise ValueError("channels and heads need one entry per scale")
        if self.blocks < 0:
            raise ValueError("blocks must be >= 0")

    @property
    def num_scales(self) -> int:
        return len(self.channels)

    def block_config(self, scale: int) -> BlockConfig:
        mcfg = MadaConfig(self.channels[scale], self.heads[scale], self.points, self.double_sampling)
        return BlockConfig(mcfg, self.use_ffn, self.use_norm)

    def to_dict(self) -> dict:
        return {"channels": list(self.channels), "heads": list(self.heads), "blocks": self.blocks,
                "points": self.points, "ffn_ratio": self.ffn_ratio, "use_ffn": self.use_ffn,
                "use_norm": self.use_norm, "double_sampling": self.double_sampling,
                "nonlinearity": "gelu-tanh"}

    @classmethod
    def from_dict(cls, d: dict) -> "NeckConfig":
        d = {k: v for k, v in d.items() if k != "nonlinearity"}
        for key in ("channels", "heads"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class NormParams:
    gamma: Parameter
    beta: Parameter

    @classmethod
    def init(cls, c: int) -> "NormParams":
        return cls(Parameter(np.ones(c)), Parameter(np.zeros(c)))


@dataclass
class ScarfBlockParams:
    mada: MadaParams
    ffn_in: Linear | None = None
    ffn_out: Linear | None = None
    norm1: NormParams | None = None
    norm2: NormParams | None = None

    @classmethod
    def init(cls, cfg: BlockConfig, rng: np.random.Generator, ffn_hidden: int | None = None) -> "ScarfBlockParams":
        c = cfg.mada.channels
        hidden = ffn_hidden or 2 * c
        return cls(
            mada=MadaParams.init(cfg.mada, rng),
            ffn_in=Linear.init(c, hidden, rng) if cfg.use_ffn else None,
            ffn_out=Linear.init(hidden, c, rng) if cfg.use_ffn else None,
            norm1=NormParams.init(c) if cfg.use_norm else None,
            norm2=NormParams.init(c) if cfg.use_norm else None,
        )


@dataclass
class GroupParams:
    blocks: list[ScarfBlockParams]
    fuse: Linear   # 1x1 conv, 2c -> c


@dataclass
class NeckParams:
    groups: list[GroupParams] = field(default_factory=list)

    @classmethod
    def init(cls, cfg: NeckConfig, rng: np.random.Generator) -> "NeckParams":
        groups = []
        for s in range(cfg.num_scales):
            bcfg = cfg.block_config(s)
            c = cfg.channels[s]
            blocks = [ScarfBlockParams.init(bcfg, rng, cfg.ffn_ratio * c) for _ in range(cfg.blocks)]
            groups.append(GroupParams(blocks, Linear.init(2 * c, c, rng)))
        return cls(groups)


def _norm(x: Tensor, p: NormParams | None, eps: float) -> Tensor:
    return x if p is None else ad.layer_norm(x, p.gamma, p.beta, eps)


def _stream_update(x: Tensor, y: Tensor, params: ScarfBlockParams, cfg: BlockConfig) -> Tensor:
    u = _norm(ad.add(x, y), params.norm1, cfg.eps)
    if params.ffn_in is not None:
        u = ad.add(u, params.ffn_out(ad.gelu(params.ffn_in(u))))
    return _norm(u, params.norm2, cfg.eps)


def scarf_block_forward(bundle: FeatureBundle, params: ScarfBlockParams, cfg: BlockConfig) -> FeatureBundle:
    if bundle.missing is None:
        y_v, y_t = mada_forward_complete(bundle.vis, bundle.ir, params.mada, cfg.mada)
        return FeatureBundle(_stream_update(bundle.vis, y_v, params, cfg),
                             _stream_update(bundle.ir, y_t, params, cfg), bundle.scale_index)
    x = bundle.vis if bundle.ir is None else bundle.ir
    if cfg.mada.double_sampling:
        y = mada_forward_incomplete(x, params.mada, cfg.mada)
    else:
        y = mada_forward_incomplete_single_sampling(x, params.mada, cfg.mada)
    out = _stream_update(x, y, params, cfg)
    if bundle.ir is None:
        return FeatureBundle(out, None, bundle.scale_index)
    return FeatureBundle(None, out, bundle.scale_index)


def fuse_streams(bundle: FeatureBundle, fuse: Linear) -> Tensor:
    if bundle.missing is None:
        stacked = ad.concat([bundle.vis, bundle.ir], axis=-1)
    else:
        x = bundle.vis if bundle.ir is None else bundle.ir
        stacked = ad.concat([x, x], axis=-1)
    return ad.conv1x1(stacked, fuse.weight, fuse.bias)


def group_forward(bundle: FeatureBundle, params: GroupParams, cfg: BlockConfig) -> Tensor:
    for block in params.blocks:
        bundle = scarf_block_forward(bundle, block, cfg)
    return fuse_streams(bundle, params.fuse)


def neck_forward(inputs: list[FeatureBundle], params: NeckParams, cfg: NeckConfig) -> list[Tensor]:
    if len(inputs) != cfg.num_scales or len(params.groups) != cfg.num_scales:
        raise DimensionError(f"neck has {cfg.num_scales} scales, got {len(inputs)} bundles")
    patterns = {b.missing for b in inputs}
    if len(patterns) > 1:
        raise ValueError("missing-modality pattern must be the same at every scale")
    return [group_forward(b, g, cfg.block_config(s)) for s, (b, g) in enumerate(zip(inputs, params.groups))]
