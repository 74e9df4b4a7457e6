import json
from dataclasses import replace

import numpy as np
import pytest

from scarf import autodiff as ad
from scarf import synthetic as syn
from scarf.batching import DropoutPolicy, SamplePair, build_batch, round_half_up
from scarf.gradcheck import case_detector, check
from scarf.mada import combine_tokens, raw_projections
from scarf.synthetic import (
    DetectorConfig,
    ExperimentConfig,
    SceneObject,
    SceneSpec,
    ToyDetectorParams,
    TrainConfig,
    build_targets,
    decode,
    forward_detector,
    generate_scene,
    loss,
    make_pairs,
    patchify,
    run_robustness_experiment,
    train_detector,
)

from oracles import loss_reference


# --- scenes ----------------------------------------------------------------

def test_zero_objects_gives_noise_only():
    spec = SceneSpec(min_objects=0, max_objects=0, noise=0.1)
    vis, ir, objects = generate_scene(spec, np.random.default_rng(0))
    assert objects == [] and vis.shape == ir.shape == (32, 32, 3)
    assert abs(vis.std() - 0.1) < 0.01 and abs(ir.mean()) < 0.01


def test_both_visible_object_same_location():
    spec = SceneSpec(min_objects=1, max_objects=1, p_both=1.0, p_vis_only=0.0, p_ir_only=0.0, noise=0.0)
    vis, ir, (obj,) = generate_scene(spec, np.random.default_rng(1))
    x, y, w, h = map(int, obj.bbox)
    mask = np.zeros((32, 32), dtype=bool)
    mask[y:y + h, x:x + w] = True
    np.testing.assert_array_equal(vis.any(axis=-1), mask)
    np.testing.assert_array_equal(ir.any(axis=-1), mask)


def test_visibility_controls_rendering():
    spec = SceneSpec(min_objects=1, max_objects=1, p_both=0.0, p_vis_only=0.0, p_ir_only=1.0, noise=0.0)
    vis, ir, (obj,) = generate_scene(spec, np.random.default_rng(2))
    assert not vis.any() and ir.any() and obj.visibility == "ir"


def test_objects_inside_image_and_deterministic():
    a = make_pairs(SceneSpec(), 20, seed=3)
    b = make_pairs(SceneSpec(), 20, seed=3)
    for p, q in zip(a, b):
        assert p.vis_image.tobytes() == q.vis_image.tobytes() and p.labels == q.labels
        for o in p.labels:
            x, y, w, h = o.bbox
            assert x >= 0 and y >= 0 and x + w <= 32 and y + h <= 32


def test_scene_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(p_both=0.5, p_vis_only=0.5, p_ir_only=0.5)
    with pytest.raises(ValueError):
        SceneSpec(min_box=40)


# --- detector forward ------------------------------------------------------

CFG = DetectorConfig(image_size=16, stride=4, channels=4, heads=2, points=1, blocks=1)


def test_patchify_layout():
    img = np.arange(4 * 4 * 1, dtype=float).reshape(4, 4, 1)
    out = patchify(img, 2)
    assert out.shape == (2, 2, 4)
    np.testing.assert_array_equal(out[0, 1], [2, 3, 6, 7])


def test_output_shape_matches_fused_map():
    params = ToyDetectorParams.init(CFG, np.random.default_rng(0))
    pair = make_pairs(SceneSpec(size=16, min_box=3, max_box=6), 1, seed=0)[0]
    for item in build_batch([pair], DropoutPolicy()) + build_batch([pair], DropoutPolicy("pseudo", 1.0)):
        assert forward_detector(item, params, CFG).shape == (4, 4, 5)


def test_paired_identical_images_match_single_projections():
    params = ToyDetectorParams.init(CFG, np.random.default_rng(1))
    img = np.random.default_rng(2).normal(size=(16, 16, 3))
    feat = syn._stem(img, params, CFG)
    e = ad.reshape(feat, (16, 4))
    mcfg = CFG.neck_config().block_config(0).mada
    mp = params.neck.groups[0].blocks[0].mada
    paired = raw_projections(combine_tokens(e, syn._stem(img.copy(), params, CFG).data.reshape(16, 4)), mp, mcfg)
    single = raw_projections(combine_tokens(e, None), mp, mcfg)
    for a, b in zip(paired, single):
        assert a.data.tobytes() == b.data.tobytes()


def test_stem_shared_across_modalities():
    params = ToyDetectorParams.init(CFG, np.random.default_rng(3))
    img = np.random.default_rng(4).normal(size=(16, 16, 3))
    pair = SamplePair("p", img, img.copy(), [])
    vis_item, ir_item = build_batch([pair], DropoutPolicy("pseudo", 1.0))
    np.testing.assert_array_equal(forward_detector(vis_item, params, CFG).data,
                                  forward_detector(ir_item, params, CFG).data)


# --- targets and loss ------------------------------------------------------

def test_targets_strict_inside_and_smallest_box():
    cfg = DetectorConfig(image_size=8, stride=2, channels=4, heads=1, points=1, blocks=0)
    big = SceneObject(0, (0.0, 0.0, 8.0, 8.0), "both")
    small = SceneObject(0, (2.0, 2.0, 2.0, 2.0), "both")
    obj, box = build_targets([big, small], cfg)
    assert obj.sum() == 16
    np.testing.assert_allclose(box[1, 1, 0], [0.5, 0.5, 0.5, 0.5])     # centre (3, 3) in the small box
    np.testing.assert_allclose(box[0, 0, 0], [0.5, 0.5, 3.5, 3.5])
    edge = SceneObject(0, (1.0, 1.0, 2.0, 2.0), "both")                # centre (1, 1) on the edge
    assert build_targets([edge], cfg)[0][0, 0, 0] == 0


def test_perfect_predictions_give_near_zero_loss():
    cfg = DetectorConfig(image_size=8, stride=2, channels=4, heads=1, points=1, blocks=0)
    objects = [SceneObject(0, (1.0, 1.0, 4.0, 3.0), "both")]
    obj, box = build_targets(objects, cfg)
    hm = np.concatenate([np.where(obj > 0, 40.0, -40.0)[..., None], box], axis=-1).reshape(4, 4, 5)
    assert loss(ad.Tensor(hm), obj, box, cfg).item() < 1e-15


def test_empty_gt_is_pure_negative_bce():
    cfg = DetectorConfig(image_size=8, stride=2, channels=4, heads=1, points=1, blocks=0)
    hm = np.random.default_rng(5).normal(size=(4, 4, 5))
    obj, box = build_targets([], cfg)
    expect = np.mean(np.log1p(np.exp(hm[..., 0])))
    assert loss(ad.Tensor(hm), obj, box, cfg).item() == pytest.approx(expect, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_loss_matches_cell_by_cell_reference(seed):
    rng = np.random.default_rng(seed)
    cfg = DetectorConfig(image_size=16, stride=2, channels=4, heads=1, points=1, blocks=0, num_classes=2,
                         box_weight=0.7)
    _, _, objects = generate_scene(SceneSpec(size=16, min_box=3, max_box=7, num_classes=2), rng)
    hm = rng.normal(size=(8, 8, 10)) * 2
    obj, box = build_targets(objects, cfg)
    assert loss(ad.Tensor(hm), obj, box, cfg).item() == pytest.approx(loss_reference(hm, objects, cfg), abs=1e-12)


def test_batched_loss_is_item_mean():
    cfg = DetectorConfig(image_size=8, stride=2, channels=4, heads=1, points=1, blocks=0)
    rng = np.random.default_rng(6)
    hms = rng.normal(size=(3, 4, 4, 5))
    objs = [[SceneObject(0, (0.0, 0.0, 3.0, 5.0), "both")], [], [SceneObject(0, (2.0, 1.0, 5.0, 5.0), "vis")]]
    targets = [build_targets(o, cfg) for o in objs]
    batched = loss(ad.Tensor(hms), np.stack([t[0] for t in targets]), np.stack([t[1] for t in targets]), cfg)
    single = [loss(ad.Tensor(h), t[0], t[1], cfg).item() for h, t in zip(hms, targets)]
    assert batched.item() == pytest.approx(np.mean(single), abs=1e-13)


# --- decoding --------------------------------------------------------------

def test_decode_all_negative_is_empty():
    hm = np.full((4, 4, 5), -50.0)
    assert decode(hm, DetectorConfig(image_size=16, stride=4), "x") == []


def test_decode_single_positive_cell():
    cfg = DetectorConfig(image_size=16, stride=4)
    hm = np.full((4, 4, 5), -50.0)
    hm[1, 2] = [3.0, 0.5, 0.25, 1.0, 0.75]    # centre (x=10, y=6)
    (d,) = decode(hm, cfg, "img")
    assert d.image_id == "img" and d.category == 0
    np.testing.assert_allclose(d.bbox, (8.0, 5.0, 6.0, 4.0))
    assert d.score == pytest.approx(1 / (1 + np.exp(-3.0)))


def test_decode_nms_suppresses_lower_score_and_clips():
    cfg = DetectorConfig(image_size=16, stride=4)
    hm = np.full((4, 4, 5), -50.0)
    hm[1, 1] = [2.0, 1.0, 1.0, 1.0, 1.0]      # box (2, 2, 8, 8)
    hm[1, 2] = [1.0, 2.0, 1.0, 0.0, 1.0]      # box (2, 2, 8, 8) as well, lower score
    hm[3, 3] = [4.0, 1.0, 1.0, 5.0, 5.0]      # extends past the border
    dets = decode(hm, cfg, "i", score_thr=0.3, nms_iou=0.5)
    assert len(dets) == 2
    clipped = max(dets, key=lambda d: d.score)
    assert clipped.bbox[0] + clipped.bbox[2] == 16.0 and clipped.bbox[1] + clipped.bbox[3] == 16.0
    kept = min(dets, key=lambda d: d.score)
    assert kept.score == pytest.approx(1 / (1 + np.exp(-2.0)))


def test_decode_threshold_validation():
    with pytest.raises(ValueError):
        decode(np.zeros((4, 4, 5)), DetectorConfig(image_size=16, stride=4), score_thr=0.0)


# --- training --------------------------------------------------------------

TINY = ExperimentConfig(
    scene=SceneSpec(size=16, min_box=4, max_box=8),
    detector=DetectorConfig(image_size=16, stride=4, channels=4, heads=2, points=1, blocks=1),
    train=TrainConfig(epochs=2, lr=3e-3, batch_size=4),
    train_scenes=8, test_scenes=6,
)


def test_training_is_deterministic():
    pairs = make_pairs(TINY.scene, 8, seed=0)
    runs = [train_detector(pairs, DropoutPolicy("pseudo", 0.5, 1), TINY.detector, TINY.train, seed=4)[1]
            for _ in range(2)]
    assert len(runs[0]["loss"]) >= 4
    np.testing.assert_allclose(runs[0]["loss"], runs[1]["loss"], rtol=0, atol=1e-12)


def test_images_per_epoch():
    pairs = make_pairs(TINY.scene, 10, seed=0)
    cfg = replace(TINY.train, epochs=1)
    for mode, expect in (("pseudo", 20), ("vanilla", 20 - round_half_up(0.6, 10)), ("none", 20)):
        _, hist = train_detector(pairs, DropoutPolicy(mode, 0.6, 2), TINY.detector, cfg, seed=0)
        assert hist["images_per_epoch"] == [expect]


def test_lr_schedule():
    t = TrainConfig(epochs=10, lr=1.0)
    assert t.lr_at(0) == 1.0 and t.lr_at(5) == pytest.approx(0.5)
    assert TrainConfig(epochs=10, lr=1.0, cosine=False).lr_at(9) == 1.0


def test_experiment_report_structure():
    report = run_robustness_experiment(TINY)
    assert set(report["arms"]) == {"none", "vanilla-60", "pseudo-60"}
    for arm in report["arms"].values():
        assert arm["status"] == "ok"
        assert set(arm["metrics"]) == {"complete", "VIS", "IR", "mixed-0.3", "mixed-0.5", "mixed-0.7"}
        for m in arm["metrics"].values():
            assert 0.0 <= m["mAP"] <= 1.0
    assert "pseudo-60 vs vanilla-60" in report["deltas"]
    assert ExperimentConfig.from_dict(json.loads(syn.report_json(report))["config"]) == TINY
    assert "pseudo-60" in syn.format_report(report)


def test_diverged_arm_is_reported(monkeypatch):
    orig = syn.train_detector

    def flaky(pairs, policy, *a, **k):
        if policy.mode == "vanilla":
            raise syn.TrainingDiverged("epoch 0: loss produced non-finite values")
        return orig(pairs, policy, *a, **k)

    monkeypatch.setattr(syn, "train_detector", flaky)
    cfg = replace(TINY, train=replace(TINY.train, epochs=1))
    report = run_robustness_experiment(cfg)
    assert report["arms"]["vanilla-60"]["status"] == "diverged"
    assert report["arms"]["pseudo-60"]["status"] == "ok"
    assert "DIVERGED" in syn.format_report(report)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_raises_training_diverged():
    pairs = make_pairs(TINY.scene, 4, seed=0)
    with pytest.raises(syn.TrainingDiverged):
        train_detector(pairs, DropoutPolicy(), TINY.detector, replace(TINY.train, lr=1e200), seed=0)


def test_gradcheck_full_stack():
    assert check(case_detector(0)) < 1e-3
