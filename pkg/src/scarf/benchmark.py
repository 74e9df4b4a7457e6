"""Modality-incomplete (MI) test manifests and COCO-style box evaluation.

Detections against an MI split name their image as ``"<pair_id>@VIS"`` or
``"<pair_id>@IR"``; ground truth is keyed by the bare pair id because both
images of a pair share labels.

AP uses 101 recall points ``0.00, 0.01, ..., 1.00`` over the precision
envelope, IoU thresholds ``0.50:0.05:0.95``, no detection cap and no area
ranges. A detection matches the unmatched ground truth of highest IoU with
``IoU >= threshold`` (first one on IoU ties); detections are processed by
descending score, ties in input order. Categories without ground truth are
left out of the mean.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .batching import IR, VIS, round_half_up

IOU_THRESHOLDS = np.arange(50, 100, 5) / 100.0
RECALL_POINTS = np.arange(101) / 100.0
SEPARATOR = "@"


class ValidationError(ValueError):
    """Input files or records violate the benchmark contracts."""


@dataclass(frozen=True)
class Detection:
    image_id: str
    category: int
    bbox: tuple[float, float, float, float]   # x, y, w, h in pixels
    score: float

    def __post_init__(self):
        if self.bbox[2] <= 0 or self.bbox[3] <= 0:
            raise ValidationError(f"detection box needs positive w, h: {self.bbox}")

    def to_json(self) -> dict:
        return {"image_id": self.image_id, "category": self.category,
                "bbox": list(self.bbox), "score": self.score}


@dataclass(frozen=True)
class GroundTruthBox:
    image_id: str
    category: int
    bbox: tuple[float, float, float, float]

    def __post_init__(self):
        if self.bbox[2] <= 0 or self.bbox[3] <= 0:
            raise ValidationError(f"ground-truth box needs positive w, h: {self.bbox}")


@dataclass(frozen=True)
class ManifestEntry:
    pair_id: str
    kept: str


@dataclass(frozen=True)
class MiManifest:
    entries: tuple[ManifestEntry, ...]
    vis_fraction: float
    seed: int

    def kept(self) -> dict[str, str]:
        return {e.pair_id: e.kept for e in self.entries}

    def ids(self, modality: str) -> list[str]:
        return [e.pair_id for e in self.entries if e.kept == modality]

    def to_json(self) -> str:
        payload = {"vis_fraction": self.vis_fraction, "seed": self.seed,
                   "entries": [{"pair_id": e.pair_id, "kept": e.kept} for e in self.entries]}
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_dict(cls, payload: dict) -> "MiManifest":
        try:
            entries = tuple(ManifestEntry(str(e["pair_id"]), e["kept"]) for e in payload["entries"])
            manifest = cls(entries, float(payload["vis_fraction"]), int(payload["seed"]))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed manifest: {exc}") from exc
        bad = [e for e in entries if e.kept not in (VIS, IR)]
        if bad:
            raise ValidationError(f"manifest entry {bad[0].pair_id!r} keeps unknown modality {bad[0].kept!r}")
        ids = [e.pair_id for e in entries]
        if len(set(ids)) != len(ids):
            raise ValidationError("manifest lists a pair more than once")
        return manifest

    @classmethod
    def load(cls, path) -> "MiManifest":
        return cls.from_dict(load_json(path))


def load_json(path):
    """Parse a UTF-8 JSON file, reporting the line of a syntax error."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


def generate_manifest(pair_ids: Sequence[str], vis_fraction: float, seed: int) -> MiManifest:
    """Keep VIS for the first ``round_half_up(f * n)`` pairs of a seeded shuffle, IR for the rest."""
    pair_ids = [str(p) for p in pair_ids]
    if len(set(pair_ids)) != len(pair_ids):
        raise ValidationError("duplicate pair ids")
    if not 0.0 <= vis_fraction <= 1.0:
        raise ValidationError(f"vis_fraction must be in [0, 1], got {vis_fraction}")
    order = np.random.default_rng(seed).permutation(len(pair_ids))
    n_vis = round_half_up(vis_fraction, len(pair_ids))
    vis_ids = {pair_ids[i] for i in order[:n_vis]}
    entries = tuple(ManifestEntry(p, VIS if p in vis_ids else IR) for p in pair_ids)
    return MiManifest(entries, float(vis_fraction), int(seed))


def split_image_id(image_id: str) -> tuple[str, str | None]:
    pair_id, sep, modality = image_id.rpartition(SEPARATOR)
    if not sep or modality not in (VIS, IR):
        return image_id, None
    return pair_id, modality


def modality_image_id(pair_id: str, modality: str) -> str:
    return f"{pair_id}{SEPARATOR}{modality}"


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def iou_matrix(dets: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``[D, 4]`` and ``[G, 4]`` xywh arrays."""
    if len(dets) == 0 or len(gts) == 0:
        return np.zeros((len(dets), len(gts)))
    d, g = dets[:, None, :], gts[None, :, :]
    iw = np.minimum(d[..., 0] + d[..., 2], g[..., 0] + g[..., 2]) - np.maximum(d[..., 0], g[..., 0])
    ih = np.minimum(d[..., 1] + d[..., 3], g[..., 1] + g[..., 3]) - np.maximum(d[..., 1], g[..., 1])
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    return inter / (d[..., 2] * d[..., 3] + g[..., 2] * g[..., 3] - inter)


def match_detections(det_boxes: Sequence, gt_boxes: Sequence, iou_thr: float) -> list[bool]:
    """TP flags for detections of one image/category, given in descending score order."""
    ious = iou_matrix(np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4),
                      np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4))
    taken = np.zeros(ious.shape[1], dtype=bool)
    flags = []
    for row in ious:
        cand = np.where(taken | (row < iou_thr), -1.0, row)
        if cand.size and cand.max() >= 0:
            j = int(np.argmax(cand))
            taken[j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from TP flags sorted by descending score."""
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    recall = tp_cum / n_gt
    precision = tp_cum / np.arange(1, len(tp) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def _group(records: Iterable, key) -> dict:
    out: dict = {}
    for r in records:
        out.setdefault(key(r), []).append(r)
    return out


def evaluate(dets: Sequence[Detection], gts: Sequence[GroundTruthBox],
             categories: Sequence[int]) -> dict:
    """COCO-style mAP / AP50 / AP75 and per-category AP50."""
    categories = list(categories)
    known = set(categories)
    for d in dets:
        if d.category not in known:
            raise ValidationError(f"detection on {d.image_id!r} has unknown category {d.category}")
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)   # stable: ties keep input order
    gts_by = _group(gts, lambda g: (g.image_id, g.category))

    ap = {}   # category -> AP per IoU threshold
    for cat in categories:
        n_gt = sum(len(v) for (_, c), v in gts_by.items() if c == cat)
        if n_gt == 0:
            continue
        ranked = [i for i in order if dets[i].category == cat]
        by_image = _group(range(len(ranked)), lambda pos: dets[ranked[pos]].image_id)
        per_thr = []
        for thr in IOU_THRESHOLDS:
            tp = np.zeros(len(ranked))
            for img, positions in by_image.items():
                gt_boxes = [g.bbox for g in gts_by.get((img, cat), [])]
                det_boxes = [dets[ranked[pos]].bbox for pos in positions]
                tp[positions] = match_detections(det_boxes, gt_boxes, thr)
            per_thr.append(average_precision(tp, n_gt))
        ap[cat] = np.array(per_thr)

    if not ap:
        return {"mAP": 0.0, "AP50": 0.0, "AP75": 0.0, "per_category_AP50": {}}
    table = np.stack(list(ap.values()))
    return {
        "mAP": float(table.mean()),
        "AP50": float(table[:, 0].mean()),
        "AP75": float(table[:, 5].mean()),
        "per_category_AP50": {str(c): float(v[0]) for c, v in ap.items()},
    }


def evaluate_split(dets: Sequence[Detection], gts: Sequence[GroundTruthBox], manifest: MiManifest,
                   categories: Sequence[int]) -> dict:
    """Evaluate detections made on the images an MI manifest retains.

    Every detection must name ``<pair_id>@<kept modality>``; anything pointing
    at a discarded image is rejected.
    """
    kept = manifest.kept()
    mapped = []
    for d in dets:
        pair_id, modality = split_image_id(d.image_id)
        if modality is None or pair_id not in kept:
            raise ValidationError(f"detection image {d.image_id!r} does not resolve to a manifest entry")
        if kept[pair_id] != modality:
            raise ValidationError(f"detection on {d.image_id!r}: the manifest discarded the "
                                  f"{modality} image of pair {pair_id!r}")
        mapped.append(Detection(pair_id, d.category, d.bbox, d.score))
    split_gts = [g for g in gts if g.image_id in kept]
    metrics = evaluate(mapped, split_gts, categories)
    metrics["vis_fraction"] = manifest.vis_fraction
    return metrics


# ---------------------------------------------------------------------------
# file formats


def detections_from_json(payload) -> list[Detection]:
    if not isinstance(payload, list):
        raise ValidationError("detections file must hold a JSON array")
    try:
        return [Detection(str(d["image_id"]), int(d["category"]), tuple(float(v) for v in d["bbox"]),
                          float(d["score"])) for d in payload]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed detection record: {exc}") from exc


def ground_truth_from_json(payload) -> tuple[list[GroundTruthBox], list[int], list[str]]:
    try:
        cats = [int(c["id"]) if isinstance(c, dict) else int(c) for c in payload["categories"]]
        images = [str(i["id"]) if isinstance(i, dict) else str(i) for i in payload.get("images", [])]
        gts = [GroundTruthBox(str(a["image_id"]), int(a["category"]), tuple(float(v) for v in a["bbox"]))
               for a in payload["annotations"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed ground-truth file: {exc}") from exc
    return gts, cats, images


def ground_truth_to_json(gts: Sequence[GroundTruthBox], categories: Sequence[int], images: Sequence[str]) -> dict:
    return {"categories": list(categories), "images": list(images),
            "annotations": [{"image_id": g.image_id, "category": g.category, "bbox": list(g.bbox)} for g in gts]}
