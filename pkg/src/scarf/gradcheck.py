"""Finite-difference gradient checks for every differentiable op and the full stack.

Each case builds a random instance from a seed and returns the scalar loss
closure plus the parameters to check. The analytic side comes from
:func:`~scarf.autodiff.backward`, the numeric side from
:func:`~scarf.autodiff.finite_diff_grad`; the two never share state.

Relative error per parameter is ``|a - n| / max(|a|, |n|, 1e-8)`` in the
Euclidean norm. Instances whose bilinear sampling locations fall within
``1e-3`` of an integer grid line are redrawn (the location gradient has a kink
there).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape
from .mada import MadaConfig, MadaParams, mada_forward_complete, mada_forward_incomplete, \
    mada_forward_incomplete_single_sampling

GRID_EXEMPTION = 1e-3
OP_TOLERANCE = 1e-4
STACK_TOLERANCE = 1e-3

LossFn = Callable[[], "ad.Tensor"]


@dataclass
class Case:
    loss: LossFn
    params: list[Parameter]
    tolerance: float = OP_TOLERANCE


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    num = float(np.linalg.norm(analytic - numeric))
    den = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), floor)
    return num / den


def analytic_grads(loss: LossFn, params: list[Parameter]) -> list[np.ndarray]:
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        value = loss()
    ad.backward(tape, value)
    return [p.grad.copy() for p in params]


def check(case: Case, h: float = 1e-5) -> float:
    """Worst relative error over the case's parameters."""
    grads = analytic_grads(case.loss, case.params)
    f = lambda: case.loss().item()
    return max(relative_error(g, ad.finite_diff_grad(f, p, h).data) for g, p in zip(grads, case.params))


def _weighted_sum(out: "ad.Tensor", rng: np.random.Generator) -> "ad.Tensor":
    # random projection so every output element carries a distinct weight
    return ad.sum_(ad.mul(out, rng.normal(size=out.shape)))


def _clear_of_grid(loss: LossFn) -> bool:
    with ad.record_sample_points() as pts:
        loss()
    return ad.min_grid_distance(pts) > GRID_EXEMPTION


def _redraw(build: Callable[[np.random.Generator], Case], seed: int) -> Case:
    rng = np.random.default_rng(seed)
    for _ in range(200):
        case = build(rng)
        if _clear_of_grid(case.loss):
            return case
    raise RuntimeError("could not draw an instance clear of grid lines")


# ---------------------------------------------------------------------------
# op cases


def case_linear(seed: int) -> Case:
    rng = np.random.default_rng(seed)
    x, w, b = Parameter(rng.normal(size=(3, 4))), Parameter(rng.normal(size=(4, 2))), Parameter(rng.normal(size=2))
    r = np.random.default_rng(seed + 1)
    proj = r.normal(size=(3, 2))
    return Case(lambda: ad.sum_(ad.mul(ad.linear(x, w, b), proj)), [x, w, b])


def case_softmax(seed: int) -> Case:
    rng = np.random.default_rng(seed)
    x = Parameter(rng.normal(size=(2, 3, 4)))
    proj = rng.normal(size=(2, 3, 4))
    return Case(lambda: ad.sum_(ad.mul(ad.softmax(x, axes=2), proj)), [x])


def case_layer_norm(seed: int) -> Case:
    rng = np.random.default_rng(seed)
    x = Parameter(rng.normal(size=(5, 8)))
    gamma, beta = Parameter(rng.normal(size=8)), Parameter(rng.normal(size=8))
    proj = rng.normal(size=(5, 8))
    return Case(lambda: ad.sum_(ad.mul(ad.layer_norm(x, gamma, beta, 1e-5), proj)), [x, gamma, beta])


def case_bilinear_sample(seed: int) -> Case:
    def build(rng):
        feat = Parameter(rng.normal(size=(4, 5, 3)))
        pts = Parameter(np.stack([rng.uniform(-1.5, 4.5, 12), rng.uniform(-1.5, 5.5, 12)], axis=-1))
        proj = rng.normal(size=(12, 3))
        return Case(lambda: ad.sum_(ad.mul(ad.bilinear_sample(feat, pts), proj)), [feat, pts])
    return _redraw(build, seed)


def case_conv1x1(seed: int) -> Case:
    rng = np.random.default_rng(seed)
    x = Parameter(rng.normal(size=(4, 4, 6)))
    w, b = Parameter(rng.normal(size=(6, 3))), Parameter(rng.normal(size=3))
    proj = rng.normal(size=(4, 4, 3))
    return Case(lambda: ad.sum_(ad.mul(ad.conv1x1(x, w, b), proj)), [x, w, b])


def case_gelu(seed: int) -> Case:
    rng = np.random.default_rng(seed)
    x = Parameter(rng.normal(size=(4, 5)) * 2)
    proj = rng.normal(size=(4, 5))
    return Case(lambda: ad.sum_(ad.mul(ad.gelu(x), proj)), [x])


def case_bce_with_logits(seed: int) -> Case:
    rng = np.random.default_rng(seed)
    z = Parameter(rng.normal(size=(3, 4)) * 3)
    y = (rng.random((3, 4)) < 0.5).astype(float)
    return Case(lambda: ad.sum_(ad.bce_with_logits(z, y)), [z])


def case_abs(seed: int) -> Case:
    rng = np.random.default_rng(seed)
    x = Parameter(rng.choice([-1.0, 1.0], size=(3, 4)) * rng.uniform(0.1, 2.0, size=(3, 4)))
    proj = rng.normal(size=(3, 4))
    return Case(lambda: ad.sum_(ad.mul(ad.abs_(x), proj)), [x])


def case_structural(seed: int) -> Case:
    """add/sub/mul/scale/reshape/transpose/concat/stack/slice/mean composed."""
    rng = np.random.default_rng(seed)
    a, b = Parameter(rng.normal(size=(2, 3, 4))), Parameter(rng.normal(size=(2, 3, 4)))
    c = Parameter(rng.normal(size=(1, 3, 1)))
    proj = rng.normal(size=(3, 2, 8))

    def loss():
        t = ad.mul(ad.add(a, c), ad.sub(b, ad.scale(a, 0.5)))
        t = ad.concat([t, ad.stack([ad.slice_(b, (0,)), ad.slice_(a, (1,))], axis=0)], axis=-1)
        t = ad.transpose(ad.reshape(t, (2, 3, 8)), (1, 0, 2))
        return ad.add(ad.sum_(ad.mul(t, proj)), ad.mean(ad.sum_(t, axis=2)))

    return Case(loss, [a, b, c])


# ---------------------------------------------------------------------------
# composite cases


def _random_mada(cfg: MadaConfig, rng: np.random.Generator) -> MadaParams:
    params = MadaParams.init(cfg, rng)
    for _, p in ad.named_parameters(params):
        p.data[...] = rng.normal(scale=0.4, size=p.shape)
    return params


def case_mada(seed: int, path: str = "complete") -> Case:
    cfg = MadaConfig(channels=4, heads=2, points=2)

    def build(rng):
        params = _random_mada(cfg, rng)
        x_v, x_t = Parameter(rng.normal(size=(3, 3, 4))), Parameter(rng.normal(size=(3, 3, 4)))
        proj = rng.normal(size=(2, 3, 3, 4))
        plist = [p for _, p in ad.named_parameters(params)]

        if path == "complete":
            def loss():
                y_v, y_t = mada_forward_complete(x_v, x_t, params, cfg)
                return ad.sum_(ad.mul(ad.stack([y_v, y_t]), proj))
            return Case(loss, plist + [x_v, x_t])
        fwd = mada_forward_incomplete if path == "incomplete" else mada_forward_incomplete_single_sampling
        return Case(lambda: ad.sum_(ad.mul(fwd(x_v, params, cfg), proj[0])), plist + [x_v])

    return _redraw(build, seed)


def case_neck(seed: int) -> Case:
    from .neck import FeatureBundle, NeckConfig, NeckParams, neck_forward

    cfg = NeckConfig(channels=(4, 4), heads=(2, 1), blocks=1, points=1, ffn_ratio=1)

    def build(rng):
        params = NeckParams.init(cfg, rng)
        for _, p in ad.named_parameters(params):
            p.data[...] += rng.normal(scale=0.2, size=p.shape)
        xs = [(Parameter(rng.normal(size=(3 - s, 3 - s, c))), Parameter(rng.normal(size=(3 - s, 3 - s, c))))
              for s, c in enumerate(cfg.channels)]
        projs = [rng.normal(size=(3 - s, 3 - s, c)) for s, c in enumerate(cfg.channels)]

        def loss():
            outs = neck_forward([FeatureBundle(v, t, s) for s, (v, t) in enumerate(xs)], params, cfg)
            return ad.add(*[ad.sum_(ad.mul(o, p)) for o, p in zip(outs, projs)])

        return Case(loss, [p for _, p in ad.named_parameters(params)] + [x for pair in xs for x in pair])

    return _redraw(build, seed)


def case_detector(seed: int) -> Case:
    """Full stem -> neck -> head -> loss stack on an 8x8 scene, paired and single items."""
    from .batching import DropoutPolicy, SamplePair, build_batch
    from .synthetic import DetectorConfig, SceneSpec, ToyDetectorParams, batch_loss, generate_scene

    cfg = DetectorConfig(image_size=8, stride=2, channels=4, heads=2, points=1, blocks=1)
    spec = SceneSpec(size=8, min_objects=1, max_objects=2, min_box=2, max_box=4)

    def build(rng):
        params = ToyDetectorParams.init(cfg, rng)
        for _, p in ad.named_parameters(params):
            p.data[...] += rng.normal(scale=0.2, size=p.shape)
        vis, ir, objects = generate_scene(spec, rng)
        pair = SamplePair("p0", vis, ir, objects)
        items = build_batch([pair], DropoutPolicy("none")) + build_batch([pair], DropoutPolicy("pseudo", 1.0))
        return Case(lambda: batch_loss(items, params, cfg), [p for _, p in ad.named_parameters(params)],
                    STACK_TOLERANCE)

    return _redraw(build, seed)


CASES: dict[str, Callable[[int], Case]] = {
    "linear": case_linear,
    "softmax": case_softmax,
    "layer_norm": case_layer_norm,
    "bilinear_sample": case_bilinear_sample,
    "conv1x1": case_conv1x1,
    "gelu": case_gelu,
    "bce_with_logits": case_bce_with_logits,
    "abs": case_abs,
    "structural": case_structural,
    "mada_complete": lambda s: case_mada(s, "complete"),
    "mada_incomplete": lambda s: case_mada(s, "incomplete"),
    "mada_single_sampling": lambda s: case_mada(s, "single"),
    "neck": case_neck,
    "detector": case_detector,
}


# primitive ops; everything else in CASES is a composite built from them
OP_CASES = ("linear", "softmax", "layer_norm", "bilinear_sample", "conv1x1", "gelu", "bce_with_logits",
            "abs", "structural")
COMPOSITE_CASES = ("mada_complete", "mada_incomplete", "mada_single_sampling", "neck")
STACK_CASE = "detector"


def run_suite(names: list[str] | None = None, seeds: range | list[int] = range(10)) -> dict[str, dict]:
    """Worst relative error per case over the seeds, with its tolerance and verdict."""
    results = {}
    for name in names or list(CASES):
        worst, tol = 0.0, OP_TOLERANCE
        for seed in seeds:
            case = CASES[name](seed)
            tol = case.tolerance
            worst = max(worst, check(case))
        results[name] = {"worst_rel_err": worst, "tolerance": tol, "passed": worst < tol}
    return results
