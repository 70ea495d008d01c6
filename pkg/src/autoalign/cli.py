"""Command-line entry point: ``autoalign <command> ...``.

Failures print one JSON object on stderr and exit 1; argparse usage
errors exit 2.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import AutoAlignError, ConfigError
from .harness import (
    ABLATION_AXES, ablate, dump_align_map, evaluate, format_table, gradcheck_modules, load_checkpoint,
    save_checkpoint, train_model, versions,
)
from .model import FUSIONS, SCFI_MODES, RunConfig
from .scene import Dataset, SceneConfig, generate_dataset, load_scene

GRADCHECK_LIMIT = 1e-4


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _run_json(out, command, config=None, seed=None, **extra):
    _write_json(Path(out) / "run.json",
                {"command": command, "config": config, "seed": seed, "versions": versions(), **extra})


def _load_config(args):
    """Config file (if any) with command-line flags applied on top."""
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for name in ("data", "seed", "steps", "fusion", "scfi", "lr_3d", "lr_2d"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "joint_2d", None) is not None:
        overrides["joint_2d"] = args.joint_2d
    return cfg.replace(**overrides) if overrides else cfg


def _add_overrides(p):
    p.add_argument("--data", help="dataset directory (overrides the config file)")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--fusion", choices=FUSIONS)
    p.add_argument("--scfi", choices=SCFI_MODES)
    p.add_argument("--lr-3d", dest="lr_3d", type=float)
    p.add_argument("--lr-2d", dest="lr_2d", type=float)
    p.add_argument("--joint-2d", dest="joint_2d", action=argparse.BooleanOptionalAction, default=None)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    scene_cfg = SceneConfig()
    if args.config:
        try:
            scene_cfg = SceneConfig.from_dict(json.loads(Path(args.config).read_text()))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{args.config}: {exc}") from exc
    manifest = generate_dataset(args.out, args.scenes, args.seed, scene_cfg, args.eval_fraction)
    _run_json(args.out, "gen-data", scene_cfg.to_dict(), args.seed, scenes=args.scenes)
    print(json.dumps({"out": str(args.out), "scenes": len(manifest["scenes"]),
                      "train": len(manifest["splits"]["train"]), "eval": len(manifest["splits"]["eval"])}))


def cmd_train(args):
    cfg = _load_config(args)
    out = Path(args.out)
    _run_json(out, "train", cfg.to_dict(), cfg.seed)

    def on_step(step, rec):
        if args.log_every and step % args.log_every == 0:
            print(json.dumps({"step": step, **rec}), flush=True)

    model, report = train_model(cfg, on_step=on_step)
    save_checkpoint(model, out / "checkpoint")
    _write_json(out / "report.json", report.to_dict())
    metrics = {k: getattr(report, k) for k in ("map_3d", "map_bev", "ap_3d", "ap_bev", "attention_mass")}
    _write_json(out / "metrics.json", {**metrics, "wall_time": report.wall_time})
    print(json.dumps(metrics))


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    dataset = Dataset(args.data)
    if args.split not in dataset.manifest["splits"]:
        raise ConfigError(f"dataset has no split {args.split!r}")
    metrics = evaluate(model, dataset, args.split)
    if args.out:
        _run_json(args.out, "eval", model.cfg.to_dict(), model.cfg.seed, checkpoint=str(args.checkpoint))
        _write_json(Path(args.out) / "metrics.json", metrics)
    print(json.dumps(metrics))


def cmd_ablate(args):
    cfg = _load_config(args)
    seeds = tuple(range(args.seeds))
    _run_json(args.out, "ablate", cfg.to_dict(), cfg.seed, axis=args.axis, seeds=list(seeds))
    table = ablate(cfg, args.axis, args.out, seeds=seeds)
    print(format_table(table), end="")


def cmd_gradcheck(args):
    errors = gradcheck_modules(args.module)
    for name, err in errors.items():
        print(f"{name:<16} {err:.3e}")
    return 0 if all(e < GRADCHECK_LIMIT for e in errors.values()) else 1


def _resolve_scene(spec, model, data):
    path = Path(spec)
    if (path / "scene.json").exists():
        return load_scene(path)
    root = data or model.cfg.data
    if not root:
        raise ConfigError(f"scene {spec!r} is not a scene directory and no dataset is configured")
    return Dataset(root).scene(spec)


def cmd_dump_align_map(args):
    model = load_checkpoint(args.checkpoint)
    scene = _resolve_scene(args.scene, model, args.data)
    voxels = [int(v) for v in args.voxel] if args.voxel else None
    _run_json(args.out, "dump-align-map", model.cfg.to_dict(), model.cfg.seed,
              checkpoint=str(args.checkpoint), scene=args.scene)
    summary = dump_align_map(model, scene, args.out, voxel_ids=voxels)
    print(json.dumps({"out": str(args.out), "voxels": [v["voxel"] for v in summary["voxels"]],
                      "mean_in_box_mass": summary["mean_in_box_mass"]}))


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="autoalign", description="Toy-scale LiDAR/camera fusion detector.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--config", help="scene-generator config JSON")
    p.add_argument("--eval-fraction", type=float, default=0.25)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model and save a checkpoint")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--log-every", type=int, default=0)
    _add_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="eval")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run one ablation table over several seeds")
    p.add_argument("--axis", required=True, choices=ABLATION_AXES)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=3)
    _add_overrides(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="compare tape gradients with finite differences")
    p.add_argument("--module", action="append", help="restrict to this module (repeatable)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump-align-map", help="write alignment heatmaps for voxels of one scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True, help="scene directory or scene name in the dataset")
    p.add_argument("--data", help="dataset holding --scene (default: the checkpoint's dataset)")
    p.add_argument("--voxel", action="append", help="voxel index (repeatable; default two in-box voxels)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_align_map)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except (AutoAlignError, OSError, KeyError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        print(json.dumps({"error": type(exc).__name__, "message": str(msg), "command": args.command}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
