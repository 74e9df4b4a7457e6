"""Command-line entry point: ``scarf <subcommand> [flags]``.

Every run prints its resolved configuration as a ``config: {...}`` line first.
``--config FILE`` supplies a JSON object whose values sit under explicit
flags: a flag given on the command line always wins. Exit codes are 0 on
success, 1 when a tolerance or check fails, 2 on usage or input errors.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .benchmark import (
    MiManifest,
    ValidationError,
    detections_from_json,
    evaluate,
    evaluate_split,
    generate_manifest,
    ground_truth_from_json,
    load_json,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _emit_config(resolved: dict) -> None:
    print("config: " + json.dumps(resolved, sort_keys=True))


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return text == "on"


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(opts: dict) -> int:
    from .gradcheck import CASES, run_suite

    names = list(CASES) if opts["op"] == "all" else [opts["op"]]
    if any(n not in CASES for n in names):
        raise UsageError(f"unknown op {opts['op']!r}; choose from all, {', '.join(CASES)}")
    seeds = range(opts["seed"], opts["seed"] + opts["num_seeds"])
    results = run_suite(names, seeds)
    failed = False
    for name, r in results.items():
        verdict = "pass" if r["passed"] else "FAIL"
        failed |= not r["passed"]
        print(f"{name:<22} worst_rel_err={r['worst_rel_err']:.3e} tol={r['tolerance']:.0e} {verdict}")
    return EXIT_FAIL if failed else EXIT_OK


# ---------------------------------------------------------------------------
# demo-forward


def checksum(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()[:16]


def cmd_demo_forward(opts: dict) -> int:
    from .neck import FeatureBundle, NeckConfig, NeckParams, neck_forward

    if opts["missing"] == "none" and not opts["double_sampling"]:
        print("warning: --double-sampling only affects the incomplete path; ignored with --missing none",
              file=sys.stderr)
    cfg = NeckConfig(channels=tuple(opts["channels"]), heads=tuple(opts["heads"]), blocks=opts["blocks"],
                     points=opts["points"], double_sampling=opts["double_sampling"])
    rng = np.random.default_rng(opts["seed"])
    params = NeckParams.init(cfg, rng)
    for _, p in ad.named_parameters(params):
        p.data[...] += rng.normal(scale=0.1, size=p.shape)
    bundles = []
    size = opts["size"]
    for s, c in enumerate(cfg.channels):
        hw = max(1, size >> s)
        vis = rng.normal(size=(hw, hw, c))
        ir = rng.normal(size=(hw, hw, c))
        bundles.append(FeatureBundle(None if opts["missing"] == "vis" else vis,
                                     None if opts["missing"] == "ir" else ir, s))
    path = {"none": "complete", "vis": "incomplete (IR only)", "ir": "incomplete (VIS only)"}[opts["missing"]]
    print(f"path: {path}")
    for s, (b, out) in enumerate(zip(bundles, neck_forward(bundles, params, cfg))):
        shape_in = (b.vis if b.vis is not None else b.ir).shape
        print(f"scale {s}: input {list(shape_in)} -> output {list(out.shape)} checksum {checksum(out.data)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# benchmark files


def _read_pair_ids(path: str) -> list[str]:
    payload = load_json(path)
    if isinstance(payload, dict):
        payload = payload.get("pair_ids", payload.get("images"))
    if not isinstance(payload, list):
        raise ValidationError(f"{path}: expected a JSON array of pair ids or an object with 'pair_ids'")
    return [str(p["id"]) if isinstance(p, dict) else str(p) for p in payload]


def cmd_make_mi_manifest(opts: dict) -> int:
    if opts["pairs"] is None:
        raise UsageError("make-mi-manifest needs --pairs")
    manifest = generate_manifest(_read_pair_ids(opts["pairs"]), opts["vis_fraction"], opts["seed"])
    if opts["out"]:
        manifest.save(opts["out"])
        print(f"wrote {opts['out']}: {len(manifest.ids('VIS'))} VIS / {len(manifest.ids('IR'))} IR")
    else:
        sys.stdout.write(manifest.to_json())
    return EXIT_OK


def cmd_evaluate(opts: dict) -> int:
    if opts["dets"] is None or opts["gt"] is None:
        raise UsageError("evaluate needs --dets and --gt")
    dets = detections_from_json(load_json(opts["dets"]))
    gts, cats, _ = ground_truth_from_json(load_json(opts["gt"]))
    if opts["manifest"]:
        metrics = evaluate_split(dets, gts, MiManifest.load(opts["manifest"]), cats)
    else:
        metrics = evaluate(dets, gts, cats)
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# experiments


def _experiment_config(opts: dict, file_cfg: dict):
    from .synthetic import ExperimentConfig

    try:
        cfg = ExperimentConfig.from_dict(file_cfg)
    except TypeError as exc:
        raise ValidationError(f"bad experiment config: {exc}") from exc
    if opts.get("seed") is not None:
        cfg = replace(cfg, seed=opts["seed"])
    if opts.get("epochs") is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=opts["epochs"]))
    if opts.get("train_scenes") is not None:
        cfg = replace(cfg, train_scenes=opts["train_scenes"])
    if opts.get("test_scenes") is not None:
        cfg = replace(cfg, test_scenes=opts["test_scenes"])
    return cfg


def _write_report(report: dict, path: str | None) -> None:
    from .synthetic import report_json

    if path:
        Path(path).write_text(report_json(report) + "\n", encoding="utf-8")
        print(f"report written to {path}")


def cmd_synth_train(opts: dict, file_cfg: dict) -> int:
    from .synthetic import format_report, run_robustness_experiment

    cfg = _experiment_config(opts, file_cfg)
    _emit_config(cfg.to_dict())
    report = run_robustness_experiment(cfg)
    print(format_report(report))
    _write_report(report, opts["report"])
    return EXIT_OK if all(a["status"] == "ok" for a in report["arms"].values()) else EXIT_FAIL


def ablation_arms(axis: str, opts: dict):
    from .synthetic import ArmSpec

    mode, ratio = opts["mode"], opts["ratio"]
    if axis == "ratio":
        modes = ["vanilla", "pseudo"] if mode == "both" else [mode]
        return [(f"{round(100 * r)}%", [ArmSpec(f"{m}-{round(100 * r)}", m, r) for m in modes])
                for r in opts["ratios"]]
    m = "pseudo" if mode == "both" else mode
    if axis == "blocks":
        return [(f"{b} blocks", [ArmSpec(f"{m}-b{b}", m, ratio, blocks=b)]) for b in opts["blocks"]]
    return [(label, [ArmSpec(f"{m}-{label}", m, ratio, double_sampling=flag)])
            for label, flag in (("double", True), ("single", False))]


def format_ablation(rows: list[tuple[str, dict]], splits=("complete", "VIS", "IR")) -> str:
    """One line per ablation row, one column per (dropout policy, split) in mAP points."""
    policies = list(dict.fromkeys(name.split("-")[0] for _, arms in rows for name in arms))
    lines = [f"{'row':<12}" + "".join(f"{pol + ':' + s:>18}" for pol in policies for s in splits)]
    for label, arms in rows:
        by_policy = {name.split("-")[0]: arm for name, arm in arms.items()}
        cells = []
        for pol in policies:
            arm = by_policy.get(pol)
            for s in splits:
                ok = arm is not None and arm["status"] == "ok"
                cells.append(f"{100 * arm['metrics'][s]['mAP']:>18.1f}" if ok else f"{'-':>18}")
        lines.append(f"{label:<12}" + "".join(cells))
    return "\n".join(lines)


def cmd_ablate(opts: dict, file_cfg: dict) -> int:
    from .synthetic import make_pairs, run_arm

    if opts["axis"] not in ("blocks", "ratio", "double"):
        raise UsageError("ablate needs --axis blocks|ratio|double")
    cfg = _experiment_config(opts, file_cfg)
    plan = ablation_arms(opts["axis"], opts)
    all_arms = tuple(a for _, arms in plan for a in arms)
    cfg = replace(cfg, arms=all_arms)
    _emit_config({"ablation": {"axis": opts["axis"], "rows": [label for label, _ in plan]}, **cfg.to_dict()})
    train_pairs = make_pairs(cfg.scene, cfg.train_scenes, cfg.seed, prefix="train")
    test_pairs = make_pairs(cfg.scene, cfg.test_scenes, cfg.seed + 1_000_003, prefix="test")
    rows, results = [], {}
    for label, arms in plan:
        row = {}
        for arm in arms:
            row[arm.name] = results[arm.name] = run_arm(arm, cfg, train_pairs, test_pairs)
        rows.append((label, row))
    print(format_ablation(rows))
    _write_report({"config": cfg.to_dict(), "axis": opts["axis"], "arms": results}, opts["report"])
    return EXIT_OK if all(a["status"] == "ok" for a in results.values()) else EXIT_FAIL


# ---------------------------------------------------------------------------
# parsing


DEFAULTS = {
    "gradcheck": {"op": "all", "seed": 0, "num_seeds": 1},
    "demo-forward": {"missing": "none", "double_sampling": True, "seed": 0, "size": 4,
                     "channels": [8, 12], "heads": [2, 3], "blocks": 2, "points": 2},
    "make-mi-manifest": {"pairs": None, "vis_fraction": 0.5, "seed": 0, "out": None},
    "evaluate": {"dets": None, "gt": None, "manifest": None},
    "synth-train": {"seed": None, "epochs": None, "train_scenes": None, "test_scenes": None, "report": None},
    "ablate": {"axis": None, "ratios": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0], "blocks": [0, 1, 2, 3],
               "mode": "pseudo", "ratio": 0.6, "seed": None, "epochs": None, "train_scenes": None,
               "test_scenes": None, "report": None},
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scarf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON file with defaults; explicit flags override it")
        return p

    p = add("gradcheck", "finite-difference gradient checks")
    p.add_argument("--op", help="op name or 'all'")
    p.add_argument("--seed", type=int)
    p.add_argument("--num-seeds", type=int)

    p = add("demo-forward", "run a seeded random neck and print shapes and checksums")
    p.add_argument("--missing", choices=["none", "vis", "ir"])
    p.add_argument("--double-sampling", type=_on_off, metavar="{on,off}")
    p.add_argument("--seed", type=int)
    p.add_argument("--size", type=int)

    p = add("make-mi-manifest", "seeded modality-incomplete test split")
    p.add_argument("--pairs", help="JSON array of pair ids")
    p.add_argument("--vis-fraction", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = add("evaluate", "COCO-style mAP of a detections file")
    p.add_argument("--dets")
    p.add_argument("--gt")
    p.add_argument("--manifest")

    for name, text in (("synth-train", "train and evaluate the dropout arms on synthetic scenes"),
                       ("ablate", "sweep one configuration axis on synthetic scenes")):
        p = add(name, text)
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--train-scenes", type=int)
        p.add_argument("--test-scenes", type=int)
        p.add_argument("--report", help="write the JSON report here")
        if name == "ablate":
            p.add_argument("--axis", choices=["blocks", "ratio", "double"])
            p.add_argument("--ratios", type=_floats)
            p.add_argument("--blocks", type=_ints)
            p.add_argument("--mode", choices=["vanilla", "pseudo", "both"])
            p.add_argument("--ratio", type=float)
    return parser


def resolve(command: str, args: dict, file_cfg: dict) -> dict:
    """Defaults, then the config file, then explicit flags."""
    opts = dict(DEFAULTS[command])
    unknown = [k for k in file_cfg if k.replace("-", "_") not in opts]
    if command not in ("synth-train", "ablate") and unknown:
        raise ValidationError(f"config file has unknown keys for {command}: {', '.join(sorted(unknown))}")
    for k, v in file_cfg.items():
        if k.replace("-", "_") in opts:
            opts[k.replace("-", "_")] = v
    opts.update({k: v for k, v in args.items() if k not in ("command", "config")})
    return opts


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args = vars(ns)
    command = args["command"]
    try:
        file_cfg = {}
        if args.get("config"):
            file_cfg = load_json(args["config"])
            if not isinstance(file_cfg, dict):
                raise ValidationError(f"{args['config']}: config must be a JSON object")
        if command in ("synth-train", "ablate"):
            experiment_keys = {"scene", "detector", "train", "train_scenes", "test_scenes", "arms",
                               "mixed_fractions", "seed", "score_thr", "nms_iou"}
            opts = resolve(command, args, {k: v for k, v in file_cfg.items() if k not in experiment_keys})
            exp_cfg = {k: v for k, v in file_cfg.items() if k in experiment_keys}
            if command == "synth-train":
                return cmd_synth_train(opts, exp_cfg)
            return cmd_ablate(opts, exp_cfg)
        opts = resolve(command, args, file_cfg)
        _emit_config({"command": command, **opts})
        return {
            "gradcheck": cmd_gradcheck,
            "demo-forward": cmd_demo_forward,
            "make-mi-manifest": cmd_make_mi_manifest,
            "evaluate": cmd_evaluate,
        }[command](opts)
    except (UsageError, ValidationError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
