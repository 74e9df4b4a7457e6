"""Training-set composition under none / vanilla / pseudo modality dropout.

Pairs chosen for dropout are handled differently by the two dropout modes:
vanilla keeps one randomly chosen image of the pair and discards the other,
pseudo keeps both images as two independent single-modality items that share
the pair's labels. Non-dropped pairs become one 6-channel item (VIS channels
first, then IR).
"""
from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Any, Sequence

import numpy as np

VIS = "VIS"
IR = "IR"
MODES = ("none", "vanilla", "pseudo")


def round_half_up(ratio: float, n: int) -> int:
    """``round(ratio * n)`` with halves rounded up, computed on the decimal repr of ``ratio``."""
    return int((Decimal(repr(float(ratio))) * n).quantize(Decimal(1), rounding=ROUND_HALF_UP))


@dataclass
class SamplePair:
    pair_id: str
    vis_image: np.ndarray   # [H, W, 3]
    ir_image: np.ndarray    # [H, W, 3]
    labels: Any

    def __post_init__(self):
        if self.vis_image.shape != self.ir_image.shape:
            raise ValueError(f"pair {self.pair_id}: image shapes differ "
                             f"{self.vis_image.shape} vs {self.ir_image.shape}")


@dataclass
class BatchItem:
    """``modality`` is None for a paired ``[H, W, 6]`` input, else VIS or IR with ``[H, W, 3]``."""

    pair_id: str
    input: np.ndarray
    modality: str | None
    labels: Any

    @property
    def paired(self) -> bool:
        return self.modality is None

    @property
    def vis(self) -> np.ndarray | None:
        if self.modality is None:
            return self.input[..., :3]
        return self.input if self.modality == VIS else None

    @property
    def ir(self) -> np.ndarray | None:
        if self.modality is None:
            return self.input[..., 3:]
        return self.input if self.modality == IR else None


@dataclass(frozen=True)
class DropoutPolicy:
    mode: str = "none"
    ratio: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown dropout mode {self.mode!r}; expected one of {MODES}")
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"dropout ratio must be in [0, 1], got {self.ratio}")

    def epoch_seed(self, epoch: int) -> int:
        return self.seed + epoch


def select_dropped(pair_ids: Sequence[str], ratio: float, rng: np.random.Generator) -> set[str]:
    """Seeded shuffle, then take the first ``round_half_up(ratio * n)`` ids."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must be in [0, 1], got {ratio}")
    order = rng.permutation(len(pair_ids))
    k = round_half_up(ratio, len(pair_ids))
    return {pair_ids[i] for i in order[:k]}


def paired_item(pair: SamplePair) -> BatchItem:
    return BatchItem(pair.pair_id, np.concatenate([pair.vis_image, pair.ir_image], axis=-1), None, pair.labels)


def single_item(pair: SamplePair, modality: str) -> BatchItem:
    image = pair.vis_image if modality == VIS else pair.ir_image
    return BatchItem(pair.pair_id, image, modality, pair.labels)


def build_batch(pairs: Sequence[SamplePair], policy: DropoutPolicy,
                rng: np.random.Generator | None = None, epoch: int = 0) -> list[BatchItem]:
    """Compose one epoch of items. Without an explicit ``rng`` the per-epoch seed ``policy.seed + epoch`` is used."""
    if not pairs:
        raise ValueError("build_batch needs at least one pair")
    if policy.mode == "none":
        return [paired_item(p) for p in pairs]
    if rng is None:
        rng = np.random.default_rng(policy.epoch_seed(epoch))
    dropped = select_dropped([p.pair_id for p in pairs], policy.ratio, rng)
    items: list[BatchItem] = []
    for pair in pairs:
        if pair.pair_id not in dropped:
            items.append(paired_item(pair))
        elif policy.mode == "vanilla":
            items.append(single_item(pair, VIS if rng.random() < 0.5 else IR))
        else:
            items.append(single_item(pair, VIS))
            items.append(single_item(pair, IR))
    return items


def count_images(batch: Sequence[BatchItem]) -> dict[str, int]:
    paired = sum(1 for it in batch if it.paired)
    vis = sum(1 for it in batch if it.modality == VIS)
    ir = sum(1 for it in batch if it.modality == IR)
    return {"paired": paired, "vis_single": vis, "ir_single": ir, "total_images": 2 * paired + vis + ir}
