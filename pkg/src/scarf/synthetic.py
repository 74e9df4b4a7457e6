"""Toy two-modality detection task exercising stem -> Scarf Neck -> dense head.

Scenes are small noisy images with bright rectangles. Each rectangle is
visible in VIS only, IR only, or both, so the two modalities carry
complementary information while sharing one set of labels.

The detector is deliberately tiny: a patchify stem (space-to-depth followed by
a 1x1 conv, shared by both modalities), the Scarf Neck, and a dense per-cell
head instead of a DETR decoder. With ``stride=1`` the stem is a plain 1x1 conv.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Linear, NonFiniteError, Tape, Tensor
from .batching import IR, VIS, BatchItem, DropoutPolicy, SamplePair, build_batch, count_images
from .benchmark import (
    Detection,
    GroundTruthBox,
    evaluate,
    evaluate_split,
    generate_manifest,
    modality_image_id,
)
from .neck import FeatureBundle, NeckConfig, NeckParams, neck_forward

logger = logging.getLogger(__name__)

VISIBILITY = ("both", "vis", "ir")
VIS_COLORS = np.array([[1.0, 0.7, 0.2], [0.2, 0.6, 1.0], [0.9, 0.2, 0.8]])
IR_LEVELS = np.array([[0.9, 0.9, 0.9], [0.5, 0.5, 0.5], [1.3, 1.3, 1.3]])


@dataclass(frozen=True)
class SceneSpec:
    size: int = 32
    min_objects: int = 1
    max_objects: int = 3
    min_box: int = 6
    max_box: int = 12
    p_both: float = 0.5
    p_vis_only: float = 0.25
    p_ir_only: float = 0.25
    noise: float = 0.1
    num_classes: int = 1

    def __post_init__(self):
        if abs(self.p_both + self.p_vis_only + self.p_ir_only - 1.0) > 1e-9:
            raise ValueError("visibility probabilities must sum to 1")
        if not 1 <= self.min_box <= self.max_box <= self.size:
            raise ValueError("object size range must fit inside the image")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("bad object count range")
        if not 1 <= self.num_classes <= len(VIS_COLORS):
            raise ValueError(f"num_classes must be 1..{len(VIS_COLORS)}")


@dataclass(frozen=True)
class SceneObject:
    category: int
    bbox: tuple[float, float, float, float]   # x, y, w, h
    visibility: str


def generate_scene(spec: SceneSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, list[SceneObject]]:
    """Render one VIS/IR pair. Boxes do not depend on visibility; labels are shared."""
    s = spec.size
    vis = rng.normal(0.0, spec.noise, size=(s, s, 3))
    ir = rng.normal(0.0, spec.noise, size=(s, s, 3))
    probs = [spec.p_both, spec.p_vis_only, spec.p_ir_only]
    objects: list[SceneObject] = []
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    for _ in range(n):
        for _attempt in range(20):
            w = int(rng.integers(spec.min_box, spec.max_box + 1))
            h = int(rng.integers(spec.min_box, spec.max_box + 1))
            x = int(rng.integers(0, s - w + 1))
            y = int(rng.integers(0, s - h + 1))
            if all(_disjoint((x, y, w, h), o.bbox) for o in objects):
                break
        else:
            continue
        cat = int(rng.integers(spec.num_classes))
        seen = VISIBILITY[int(rng.choice(3, p=probs))]
        if seen in ("both", "vis"):
            vis[y:y + h, x:x + w] += VIS_COLORS[cat]
        if seen in ("both", "ir"):
            ir[y:y + h, x:x + w] += IR_LEVELS[cat]
        objects.append(SceneObject(cat, (float(x), float(y), float(w), float(h)), seen))
    return vis, ir, objects


def _disjoint(a, b) -> bool:
    return a[0] + a[2] <= b[0] or b[0] + b[2] <= a[0] or a[1] + a[3] <= b[1] or b[1] + b[3] <= a[1]


def make_pairs(spec: SceneSpec, n: int, seed: int, prefix: str = "s") -> list[SamplePair]:
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        vis, ir, objects = generate_scene(spec, rng)
        pairs.append(SamplePair(f"{prefix}{i:04d}", vis, ir, objects))
    return pairs


# ---------------------------------------------------------------------------
# detector


@dataclass(frozen=True)
class DetectorConfig:
    image_size: int = 32
    stride: int = 4
    channels: int = 8
    heads: int = 2
    points: int = 2
    blocks: int = 2
    ffn_ratio: int = 2
    num_classes: int = 1
    double_sampling: bool = True
    use_ffn: bool = True
    use_norm: bool = True
    box_weight: float = 1.0

    def __post_init__(self):
        if self.image_size % self.stride:
            raise ValueError("image_size must be a multiple of stride")

    @property
    def grid(self) -> int:
        return self.image_size // self.stride

    def neck_config(self) -> NeckConfig:
        return NeckConfig(channels=(self.channels,), heads=(self.heads,), blocks=self.blocks,
                          points=self.points, ffn_ratio=self.ffn_ratio, use_ffn=self.use_ffn,
                          use_norm=self.use_norm, double_sampling=self.double_sampling)


@dataclass
class ToyDetectorParams:
    stem: Linear      # 3*stride^2 -> c, shared by both modalities
    neck: NeckParams
    head: Linear      # c -> num_classes * 5  (objectness logit, l, t, r, b per class)

    @classmethod
    def init(cls, cfg: DetectorConfig, rng: np.random.Generator) -> "ToyDetectorParams":
        stem = Linear.init(3 * cfg.stride ** 2, cfg.channels, rng)
        neck = NeckParams.init(cfg.neck_config(), rng)
        head = Linear.init(cfg.channels, 5 * cfg.num_classes, rng)
        head.bias.data[0::5] = -2.0   # start with low objectness
        return cls(stem, neck, head)


def patchify(images: np.ndarray, stride: int) -> np.ndarray:
    """``[..., H, W, C] -> [..., H/s, W/s, s*s*C]`` (space-to-depth)."""
    *lead, H, W, C = images.shape
    x = images.reshape(*lead, H // stride, stride, W // stride, stride, C)
    n = len(lead)
    x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return np.ascontiguousarray(x.reshape(*lead, H // stride, W // stride, stride * stride * C))


def _stem(images: np.ndarray, params: ToyDetectorParams, cfg: DetectorConfig) -> Tensor:
    return ad.conv1x1(Tensor(patchify(images, cfg.stride)), params.stem.weight, params.stem.bias)


def forward_features(vis: np.ndarray | None, ir: np.ndarray | None,
                     params: ToyDetectorParams, cfg: DetectorConfig) -> Tensor:
    """Head map ``[..., h, w, 5 * num_classes]`` for either or both modality images."""
    bundle = FeatureBundle(None if vis is None else _stem(vis, params, cfg),
                           None if ir is None else _stem(ir, params, cfg))
    fused = neck_forward([bundle], params.neck, cfg.neck_config())[0]
    return ad.conv1x1(fused, params.head.weight, params.head.bias)


def forward_detector(item: BatchItem, params: ToyDetectorParams, cfg: DetectorConfig) -> Tensor:
    """Paired items take the complete path, single items the incomplete one."""
    return forward_features(item.vis, item.ir, params, cfg)


# ---------------------------------------------------------------------------
# targets, loss, decoding


def cell_centers(cfg: DetectorConfig) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(cfg.grid) + 0.5) * cfg.stride
    return np.meshgrid(c, c, indexing="ij")   # cy, cx


def build_targets(objects: Sequence, cfg: DetectorConfig) -> tuple[np.ndarray, np.ndarray]:
    """Objectness ``[h, w, n_cls]`` and box distances ``[h, w, n_cls, 4]`` in stride units.

    A cell is positive for a class when its centre lies strictly inside a box
    of that class; with several candidates the smallest box wins.
    """
    g, k = cfg.grid, cfg.num_classes
    obj = np.zeros((g, g, k))
    box = np.zeros((g, g, k, 4))
    area = np.full((g, g, k), np.inf)
    cy, cx = cell_centers(cfg)
    for o in objects:
        x, y, w, h = o.bbox
        inside = (cx > x) & (cx < x + w) & (cy > y) & (cy < y + h) & (w * h < area[..., o.category])
        obj[inside, o.category] = 1.0
        area[inside, o.category] = w * h
        dist = np.stack([cx - x, cy - y, x + w - cx, y + h - cy], axis=-1) / cfg.stride
        box[inside, o.category] = dist[inside]
    return obj, box


def loss(head_map: Tensor, objectness: np.ndarray, boxes: np.ndarray, cfg: DetectorConfig) -> Tensor:
    """Detection loss for a head map ``[..., h, w, 5k]`` averaged over leading items.

    Per item::

        BCE(objectness logits, targets) averaged over all h*w*k cell/class slots
        + box_weight * sum_{positive slots} sum_{l,t,r,b} |pred - target| / max(1, n_positive)

    Box offsets are distances from the cell centre to the four box edges in
    units of the stride.
    """
    head_map = ad.as_tensor(head_map)
    lead = head_map.shape[:-3]
    g, k = cfg.grid, cfg.num_classes
    n_items = math.prod(lead) if lead else 1
    pred = ad.reshape(head_map, lead + (g, g, k, 5))
    logits = ad.slice_(pred, (Ellipsis, 0))
    offsets = ad.slice_(pred, (Ellipsis, slice(1, 5)))
    bce = ad.sum_(ad.bce_with_logits(logits, objectness))
    bce = ad.scale(bce, 1.0 / (g * g * k * n_items))
    npos = objectness.reshape(lead + (-1,)).sum(axis=-1) if lead else objectness.sum()
    weight = objectness / np.maximum(npos, 1.0).reshape(lead + (1, 1, 1) if lead else ())
    l1 = ad.sum_(ad.mul(ad.abs_(ad.sub(offsets, boxes)), weight[..., None]))
    return ad.add(bce, ad.scale(l1, cfg.box_weight / n_items))


def _nms(boxes: np.ndarray, scores: np.ndarray, iou_thr: float) -> list[int]:
    from .benchmark import iou_matrix
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    keep: list[int] = []
    for i in order:
        if keep and iou_matrix(boxes[i:i + 1], boxes[keep]).max() > iou_thr:
            continue
        keep.append(i)
    return keep


def decode(head_map, cfg: DetectorConfig, image_id: str = "", score_thr: float = 0.3,
           nms_iou: float = 0.5) -> list[Detection]:
    """Threshold sigmoid scores, build clipped boxes, greedy NMS per class."""
    if not (0 < score_thr < 1 and 0 < nms_iou < 1):
        raise ValueError("thresholds must lie in (0, 1)")
    hm = np.asarray(head_map.data if isinstance(head_map, Tensor) else head_map, dtype=np.float64)
    g, k, s = cfg.grid, cfg.num_classes, cfg.stride
    pred = hm.reshape(g, g, k, 5)
    with np.errstate(over="ignore"):
        scores = 1.0 / (1.0 + np.exp(-pred[..., 0]))
    cy, cx = cell_centers(cfg)
    size = float(cfg.image_size)
    out: list[Detection] = []
    for cat in range(k):
        ii, jj = np.nonzero(scores[..., cat] >= score_thr)
        if len(ii) == 0:
            continue
        d = np.maximum(pred[ii, jj, cat, 1:5], 0.0) * s
        x1 = np.clip(cx[ii, jj] - d[:, 0], 0.0, size)
        y1 = np.clip(cy[ii, jj] - d[:, 1], 0.0, size)
        x2 = np.clip(cx[ii, jj] + d[:, 2], 0.0, size)
        y2 = np.clip(cy[ii, jj] + d[:, 3], 0.0, size)
        ok = (x2 > x1) & (y2 > y1)
        boxes = np.stack([x1, y1, x2 - x1, y2 - y1], axis=-1)[ok]
        sc = scores[ii, jj, cat][ok]
        for i in _nms(boxes, sc, nms_iou):
            out.append(Detection(image_id, cat, tuple(float(v) for v in boxes[i]), float(sc[i])))
    return out


# ---------------------------------------------------------------------------
# training


class Adam:
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = [p for _, p in ad.named_parameters(params)]
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad ** 2
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class _Targets:
    obj: np.ndarray
    box: np.ndarray


def _targets_for(items: Sequence[BatchItem], cfg: DetectorConfig, cache: dict) -> _Targets:
    objs, boxes = [], []
    for it in items:
        if it.pair_id not in cache:
            cache[it.pair_id] = build_targets(it.labels, cfg)
        o, b = cache[it.pair_id]
        objs.append(o)
        boxes.append(b)
    return _Targets(np.stack(objs), np.stack(boxes))


def batch_loss(items: Sequence[BatchItem], params: ToyDetectorParams, cfg: DetectorConfig,
               cache: dict | None = None) -> Tensor:
    """Mean per-item loss; paired and single items run as two batched forwards."""
    cache = {} if cache is None else cache
    paired = [it for it in items if it.paired]
    single = [it for it in items if not it.paired]
    total = None
    for group, fwd in ((paired, lambda g: forward_features(np.stack([it.vis for it in g]),
                                                           np.stack([it.ir for it in g]), params, cfg)),
                       (single, lambda g: forward_features(np.stack([it.input for it in g]), None, params, cfg))):
        if not group:
            continue
        t = _targets_for(group, cfg, cache)
        part = ad.scale(loss(fwd(group), t.obj, t.box, cfg), len(group) / len(items))
        total = part if total is None else ad.add(total, part)
    return total


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    lr: float = 3e-3
    batch_size: int = 8
    cosine: bool = True   # decay lr to zero over the run

    def lr_at(self, epoch: int) -> float:
        if not self.cosine:
            return self.lr
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * epoch / self.epochs))


def train_detector(pairs: Sequence[SamplePair], policy: DropoutPolicy, det_cfg: DetectorConfig,
                   train_cfg: TrainConfig, seed: int) -> tuple[ToyDetectorParams, dict]:
    """Train one model; returns params and a history with per-step losses and image counts."""
    params = ToyDetectorParams.init(det_cfg, np.random.default_rng(seed))
    opt = Adam(params, lr=train_cfg.lr)
    order_rng = np.random.default_rng(seed + 1)
    cache: dict = {}
    history = {"loss": [], "images_per_epoch": []}
    for epoch in range(train_cfg.epochs):
        items = build_batch(pairs, policy, epoch=epoch)
        opt.lr = train_cfg.lr_at(epoch)
        history["images_per_epoch"].append(count_images(items)["total_images"])
        perm = order_rng.permutation(len(items))
        for start in range(0, len(items), train_cfg.batch_size):
            chunk = [items[i] for i in perm[start:start + train_cfg.batch_size]]
            try:
                with Tape() as tape:
                    value = batch_loss(chunk, params, det_cfg, cache)
                ad.zero_grads(params)
                ad.backward(tape, value)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
            opt.step()
            history["loss"].append(value.item())
        logger.debug("epoch %d loss %.4f", epoch, history["loss"][-1])
    return params, history


def predict(pairs: Sequence[SamplePair], params: ToyDetectorParams, cfg: DetectorConfig,
            score_thr: float = 0.3, nms_iou: float = 0.5, batch_size: int = 64) -> dict[str, list[Detection]]:
    """Detections on each test pair under three inputs: ``complete``, ``VIS`` only and ``IR`` only.

    Complete detections use the bare pair id; single-modality ones use ``<pair_id>@VIS|IR``.
    """
    out: dict[str, list[Detection]] = {"complete": [], VIS: [], IR: []}
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        vis = np.stack([p.vis_image for p in chunk])
        ir = np.stack([p.ir_image for p in chunk])
        maps = {
            "complete": forward_features(vis, ir, params, cfg).data,
            VIS: forward_features(vis, None, params, cfg).data,
            IR: forward_features(ir, None, params, cfg).data,
        }
        for key, hm in maps.items():
            for p, m in zip(chunk, hm):
                image_id = p.pair_id if key == "complete" else modality_image_id(p.pair_id, key)
                out[key].extend(decode(m, cfg, image_id, score_thr, nms_iou))
    return out


def ground_truth(pairs: Sequence[SamplePair]) -> list[GroundTruthBox]:
    return [GroundTruthBox(p.pair_id, o.category, o.bbox) for p in pairs for o in p.labels]


# ---------------------------------------------------------------------------
# experiments


@dataclass(frozen=True)
class ArmSpec:
    name: str
    mode: str = "none"
    ratio: float = 0.0
    double_sampling: bool = True
    blocks: int | None = None


DEFAULT_ARMS = (
    ArmSpec("none"),
    ArmSpec("vanilla-60", "vanilla", 0.6),
    ArmSpec("pseudo-60", "pseudo", 0.6),
)


@dataclass(frozen=True)
class ExperimentConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    train_scenes: int = 300
    test_scenes: int = 200
    arms: tuple[ArmSpec, ...] = DEFAULT_ARMS
    mixed_fractions: tuple[float, ...] = (0.3, 0.5, 0.7)
    seed: int = 0
    score_thr: float = 0.05
    nms_iou: float = 0.5

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        kw = {}
        if "scene" in d:
            kw["scene"] = SceneSpec(**d.pop("scene"))
        if "detector" in d:
            kw["detector"] = DetectorConfig(**d.pop("detector"))
        if "train" in d:
            kw["train"] = TrainConfig(**d.pop("train"))
        if "arms" in d:
            kw["arms"] = tuple(ArmSpec(**a) for a in d.pop("arms"))
        if "mixed_fractions" in d:
            kw["mixed_fractions"] = tuple(d.pop("mixed_fractions"))
        return cls(**kw, **d)


def _row(metrics: dict) -> dict:
    return {k: metrics[k] for k in ("mAP", "AP50", "AP75")}


def evaluate_model(params: ToyDetectorParams, det_cfg: DetectorConfig, test_pairs: Sequence[SamplePair],
                   config: ExperimentConfig) -> dict:
    """Complete, VIS-only, IR-only and mixed MI-split metrics for one trained model."""
    cats = list(range(det_cfg.num_classes))
    gts = ground_truth(test_pairs)
    preds = predict(test_pairs, params, det_cfg, config.score_thr, config.nms_iou)
    ids = [p.pair_id for p in test_pairs]
    results = {"complete": _row(evaluate(preds["complete"], gts, cats))}
    for name, frac in (("VIS", 1.0), ("IR", 0.0)) + tuple((f"mixed-{f:g}", f) for f in config.mixed_fractions):
        manifest = generate_manifest(ids, frac, config.seed)
        kept = manifest.kept()
        dets = [d for m in (VIS, IR) for d in preds[m] if kept[d.image_id.rsplit("@", 1)[0]] == m]
        results[name] = _row(evaluate_split(dets, gts, manifest, cats))
    return results


def run_arm(arm: ArmSpec, config: ExperimentConfig, train_pairs, test_pairs) -> dict:
    det_cfg = replace(config.detector, double_sampling=arm.double_sampling,
                      blocks=config.detector.blocks if arm.blocks is None else arm.blocks)
    policy = DropoutPolicy(arm.mode, arm.ratio, seed=config.seed + 17)
    try:
        params, history = train_detector(train_pairs, policy, det_cfg, config.train, config.seed + 29)
    except TrainingDiverged as exc:
        logger.warning("arm %s diverged: %s", arm.name, exc)
        return {"status": "diverged", "error": str(exc)}
    return {
        "status": "ok",
        "metrics": evaluate_model(params, det_cfg, test_pairs, config),
        "final_loss": history["loss"][-1],
        "images_per_epoch": history["images_per_epoch"][0],
    }


def run_robustness_experiment(config: ExperimentConfig) -> dict:
    """Train one model per arm on identical data and seeds, evaluate every split, report deltas."""
    train_pairs = make_pairs(config.scene, config.train_scenes, config.seed, prefix="train")
    test_pairs = make_pairs(config.scene, config.test_scenes, config.seed + 1_000_003, prefix="test")
    arms = {}
    for arm in config.arms:
        logger.info("training arm %s", arm.name)
        arms[arm.name] = run_arm(arm, config, train_pairs, test_pairs)
    return {"config": config.to_dict(), "arms": arms, "deltas": _deltas(config.arms, arms)}


def _deltas(specs: Sequence[ArmSpec], arms: dict) -> dict:
    """Gain of each pseudo arm over the vanilla arm with the same ratio, and of every arm over ``none``."""
    ok = {k: v["metrics"] for k, v in arms.items() if v["status"] == "ok"}
    out = {}
    base = next((s.name for s in specs if s.mode == "none"), None)
    for s in specs:
        if s.name not in ok:
            continue
        if base in ok and s.name != base:
            out[f"{s.name} vs {base}"] = {split: ok[s.name][split]["mAP"] - ok[base][split]["mAP"]
                                          for split in ok[s.name]}
        if s.mode == "pseudo":
            twin = next((t.name for t in specs if t.mode == "vanilla" and t.ratio == s.ratio
                         and t.double_sampling == s.double_sampling), None)
            if twin in ok:
                out[f"{s.name} vs {twin}"] = {split: ok[s.name][split]["mAP"] - ok[twin][split]["mAP"]
                                              for split in ok[s.name]}
    return out


def format_report(report: dict) -> str:
    arms = report["arms"]
    splits = None
    lines = []
    for name, arm in arms.items():
        if arm["status"] != "ok":
            lines.append(f"{name:<18} DIVERGED: {arm['error']}")
            continue
        if splits is None:
            splits = list(arm["metrics"])
            lines.insert(0, f"{'arm':<18}" + "".join(f"{s:>12}" for s in splits))
        lines.append(f"{name:<18}" + "".join(f"{100 * arm['metrics'][s]['mAP']:>12.1f}" for s in splits))
    for name, delta in report.get("deltas", {}).items():
        lines.append(f"{name:<18}" + "".join(f"{100 * delta[s]:>+12.1f}" for s in delta))
    return "\n".join(lines)


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
