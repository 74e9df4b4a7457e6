"""Independent reference implementations used as test oracles.

Everything here is written with explicit Python loops over plain numpy arrays
and never calls into the vectorised code paths it is compared against.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


def bilinear_point(feat: np.ndarray, y: float, x: float) -> np.ndarray:
    H, W, C = feat.shape
    y0, x0 = math.floor(y), math.floor(x)
    out = np.zeros(C)
    for yy, xx in ((y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)):
        if 0 <= yy < H and 0 <= xx < W:
            w = (1 - abs(y - yy)) * (1 - abs(x - xx))
            out += w * feat[yy, xx]
    return out


def _softmax(v: list[float]) -> list[float]:
    top = max(v)
    e = [math.exp(a - top) for a in v]
    s = sum(e)
    return [a / s for a in e]


def _arrays(params) -> dict[str, np.ndarray]:
    return {
        "wo": params.offset_proj.weight.data, "bo": params.offset_proj.bias.data,
        "ww": params.weight_proj.weight.data, "bw": params.weight_proj.bias.data,
        "wv": params.value_proj.weight.data, "bv": params.value_proj.bias.data,
        "wout": params.out_proj.weight.data, "bout": params.out_proj.bias.data,
    }


def _value_map(x: np.ndarray, P: dict) -> np.ndarray:
    H, W, _ = x.shape
    out = np.zeros((H, W, P["wv"].shape[1]))
    for i in range(H):
        for j in range(W):
            for o in range(P["wv"].shape[1]):
                out[i, j, o] = sum(x[i, j, k] * P["wv"][k, o] for k in range(x.shape[2])) + P["bv"][o]
    return out


def _project(z: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.array([sum(z[k] * w[k, o] for k in range(len(z))) + b[o] for o in range(w.shape[1])])


def mada_reference(maps: list[np.ndarray], params, cfg, mode: str) -> list[np.ndarray]:
    """Per-query scalar MADA.

    ``mode`` is ``complete`` (maps = [x_v, x_t], returns [y_v, y_t]),
    ``double`` or ``single`` (maps = [x_s], returns [y]).
    """
    P = _arrays(params)
    m, K, dh, c = cfg.heads, cfg.points, cfg.d_head, cfg.channels
    H, W, _ = maps[0].shape
    values = [_value_map(x, P) for x in maps]
    if mode == "complete":
        outputs = [[0, 1], [2, 3]]            # slots used by each output
    elif mode == "double":
        outputs = [[0, 1, 2, 3]]
    else:
        outputs = [[0, 1]]
    results = [np.zeros((H, W, c)) for _ in outputs]
    for i in range(H):
        for j in range(W):
            if mode == "complete":
                z = np.concatenate([maps[0][i, j], maps[1][i, j]])
            else:
                z = np.concatenate([maps[0][i, j], maps[0][i, j]])
            off = _project(z, P["wo"], P["bo"]).reshape(m, 4, K, 2)
            logit = _project(z, P["ww"], P["bw"]).reshape(m, 4, K)
            for oi, slots in enumerate(outputs):
                heads = np.zeros(m * dh)
                for h in range(m):
                    flat = [(a, k) for a in slots for k in range(K)]
                    weights = _softmax([logit[h, a, k] for a, k in flat])
                    acc = np.zeros(dh)
                    for wgt, (a, k) in zip(weights, flat):
                        src = a % 2 if mode == "complete" else 0
                        v = values[src][:, :, h * dh:(h + 1) * dh]
                        acc += wgt * bilinear_point(v, i + off[h, a, k, 0], j + off[h, a, k, 1])
                    heads[h * dh:(h + 1) * dh] = acc
                results[oi][i, j] = _project(heads, P["wout"], P["bout"])
    return results


def greedy_match_bruteforce(ious: np.ndarray, thr: float) -> list[bool]:
    """Enumerate every partial one-to-one assignment and keep the greedy-optimal one.

    Greedy-by-score with best-IoU choice equals the lexicographically largest
    vector ``(iou of det 0, iou of det 1, ...)`` (unmatched = -1), with ties
    broken towards lower ground-truth indices.
    """
    D, G = ious.shape
    best_key, best = None, None
    options = [[None] + [g for g in range(G) if ious[d, g] >= thr] for d in range(D)]
    for combo in itertools.product(*options):
        used = [g for g in combo if g is not None]
        if len(used) != len(set(used)):
            continue
        key = tuple(x for d, g in enumerate(combo)
                    for x in ((ious[d, g], -g) if g is not None else (-1.0, 0)))
        if best_key is None or key > best_key:
            best_key, best = key, combo
    return [g is not None for g in best]


def iou_xywh(a, b) -> float:
    ix = max(0.0, min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1]))
    inter = ix * iy
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def all_point_map(dets, gts, categories) -> float:
    """VOC-style all-point (area under the precision envelope) mAP over IoU 0.50:0.95."""
    thresholds = [0.5 + 0.05 * i for i in range(10)]
    per_cat = []
    for cat in categories:
        cat_gts = [g for g in gts if g.category == cat]
        if not cat_gts:
            continue
        cat_dets = sorted([d for d in dets if d.category == cat], key=lambda d: -d.score)
        aps = []
        for thr in thresholds:
            used = set()
            tps = []
            for d in cat_dets:
                best, best_iou = None, -1.0
                for gi, g in enumerate(cat_gts):
                    if g.image_id != d.image_id or gi in used:
                        continue
                    v = iou_xywh(d.bbox, g.bbox)
                    if v >= thr - 1e-12 and v > best_iou:
                        best, best_iou = gi, v
                if best is not None:
                    used.add(best)
                tps.append(best is not None)
            # area under the monotone envelope
            tp = fp = 0
            rec, prec = [0.0], [1.0]
            for t in tps:
                tp += t
                fp += not t
                rec.append(tp / len(cat_gts))
                prec.append(tp / (tp + fp))
            prec[0] = 0.0
            for k in range(len(prec) - 2, -1, -1):
                prec[k] = max(prec[k], prec[k + 1])
            aps.append(sum((rec[k] - rec[k - 1]) * prec[k] for k in range(1, len(rec))))
        per_cat.append(sum(aps) / len(aps))
    return sum(per_cat) / len(per_cat) if per_cat else 0.0


def loss_reference(head_map: np.ndarray, objects, cfg) -> float:
    """Cell-by-cell detection loss for one unbatched head map."""
    g, k, s = cfg.grid, cfg.num_classes, cfg.stride
    pred = head_map.reshape(g, g, k, 5)
    bce_total, l1_total, npos = 0.0, 0.0, 0
    for i in range(g):
        for j in range(g):
            cy, cx = (i + 0.5) * s, (j + 0.5) * s
            for c in range(k):
                best = None
                for o in objects:
                    x, y, w, h = o.bbox
                    if o.category == c and x < cx < x + w and y < cy < y + h:
                        if best is None or w * h < best.bbox[2] * best.bbox[3]:
                            best = o
                z = pred[i, j, c, 0]
                t = 1.0 if best is not None else 0.0
                p = 1.0 / (1.0 + math.exp(-z))
                bce_total += -(t * math.log(p) + (1 - t) * math.log(1 - p))
                if best is not None:
                    npos += 1
                    x, y, w, h = best.bbox
                    target = [(cx - x) / s, (cy - y) / s, (x + w - cx) / s, (y + h - cy) / s]
                    l1_total += sum(abs(pred[i, j, c, 1 + n] - target[n]) for n in range(4))
    return bce_total / (g * g * k) + cfg.box_weight * l1_total / max(1, npos)


def random_eval_instance(seed: int, max_dets: int = 20):
    """Small random two-category evaluation instance: jittered copies of ground truth plus clutter."""
    from scarf.benchmark import Detection, GroundTruthBox

    rng = np.random.default_rng(seed)
    gts, dets = [], []
    for img in range(int(rng.integers(1, 4))):
        for _ in range(int(rng.integers(1, 5))):
            x, y = rng.uniform(0, 50, 2)
            w, h = rng.uniform(5, 20, 2)
            gts.append(GroundTruthBox(f"i{img}", int(rng.integers(2)), (x, y, w, h)))
    for _ in range(int(rng.integers(1, max_dets + 1))):
        if rng.random() < 0.7:
            g = gts[int(rng.integers(len(gts)))]
            x, y, w, h = g.bbox
            j = rng.normal(0, 0.12, 4) * np.array([w, h, w, h])
            cat = g.category if rng.random() < 0.9 else 1 - g.category
            dets.append(Detection(g.image_id, cat, (x + j[0], y + j[1], max(1, w + j[2]), max(1, h + j[3])),
                                  float(rng.random())))
        else:
            x, y = rng.uniform(0, 50, 2)
            w, h = rng.uniform(5, 20, 2)
            dets.append(Detection(f"i{int(rng.integers(3))}", int(rng.integers(2)), (x, y, w, h),
                                  float(rng.random())))
    return dets, gts
