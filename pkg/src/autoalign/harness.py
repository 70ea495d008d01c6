"""
Training loop, evaluation, checkpoints, ablation tables and diagnostics.
"""

import hashlib
import json
import logging
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as T
from .cafa import attention_mass_in_box, write_alignment_pgm
from .detect import per_class_ap
from .errors import AutoAlignError, ConfigError, UnsupportedDiagnosticError
from .geometry import iou_axis_aligned, iou_bev
from .model import RunConfig, attention_mass, build_model
from .optim import clip_grad_norm, make_optimizer
from .scene import Dataset, SceneConfig

log = logging.getLogger(__name__)


@dataclass
class RunReport:
    config_hash: str
    seed: int
    losses: list = field(default_factory=list)        # per-step dict of floats
    ap_3d: list = field(default_factory=list)         # per class
    ap_bev: list = field(default_factory=list)
    map_3d: float = 0.0
    map_bev: float = 0.0
    attention_mass: object = None
    evals: list = field(default_factory=list)         # periodic (step, map_3d, map_bev)
    wall_time: float = 0.0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def config_hash(cfg):
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def versions():
    return {"autoalign": __version__, "numpy": np.__version__, "python": platform.python_version()}


# ---------------------------------------------------------------------------
# training


def _optimizers(model, cfg):
    opts = []
    point, image = model.point_parameters(), model.image_parameters()
    if point:
        opts.append(make_optimizer(cfg.opt_3d, point, cfg.lr_3d, cfg.momentum, cfg.weight_decay))
    if image:
        opts.append(make_optimizer(cfg.opt_2d, image, cfg.lr_2d, cfg.momentum, cfg.weight_decay))
    return opts


def train_model(cfg, dataset=None, model=None, on_step=None):
    """Train and return (model, RunReport)."""
    dataset = dataset or Dataset(cfg.data)
    model = model or build_model(cfg, dataset.config)
    names = dataset.split("train")
    if not names:
        raise ConfigError(f"dataset {cfg.data!r} has an empty train split")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xDA7A]))
    opts = _optimizers(model, cfg)
    report = RunReport(config_hash(cfg), cfg.seed)
    start = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        batch = [names[i] for i in rng.integers(0, len(names), cfg.batch_size)]
        tape = T.Tape()
        try:
            with T.use_tape(tape):
                bds = [model.forward(dataset.scene(n), rng).breakdown for n in batch]
                total = bds[0].total
                for bd in bds[1:]:
                    total = total + bd.total
                total = T.scale(total, 1.0 / len(bds))
                tape.backward(total)
        except AutoAlignError as exc:
            exc.step = step
            exc.args = (f"step {step}: {exc}",)
            raise
        for opt in opts:
            if cfg.grad_clip:
                clip_grad_norm(opt.params, cfg.grad_clip)
            opt.step()
            opt.zero_grad()
        rec = {k: float(np.mean([bd.terms[k].item() for bd in bds])) for k in bds[0].terms}
        rec["total"] = float(total.item())
        if not np.isfinite(rec["total"]):
            raise AutoAlignError(f"step {step}: non-finite loss {rec}")
        report.losses.append(rec)
        if on_step:
            on_step(step, rec)
        if cfg.eval_every and step % cfg.eval_every == 0 and step < cfg.steps:
            m = evaluate(model, dataset, cfg.eval_split)
            report.evals.append({"step": step, "map_3d": m["map_3d"], "map_bev": m["map_bev"]})
    metrics = evaluate(model, dataset, cfg.eval_split)
    report.ap_3d, report.ap_bev = metrics["ap_3d"], metrics["ap_bev"]
    report.map_3d, report.map_bev = metrics["map_3d"], metrics["map_bev"]
    report.attention_mass = metrics["attention_mass"]
    report.evals.append({"step": cfg.steps, "map_3d": report.map_3d, "map_bev": report.map_bev})
    report.wall_time = time.perf_counter() - start
    return model, report


def train(cfg, dataset=None):
    return train_model(cfg, dataset)[1]


def evaluate(model, dataset, split="eval"):
    """Per-class AP (3D and BEV), mAPs and the attention-mass diagnostic over a split."""
    preds, gts, masses = [], [], []
    for name in dataset.split(split):
        scene = dataset.scene(name)
        dets, out = model.predict(scene)
        preds.append(dets)
        gts.append(scene.gt_boxes3d)
        mass = attention_mass(out, scene, model.cfg.stride)
        if mass is not None:
            masses.append(mass)
    n_cls = model.scene_cfg.num_classes
    ap3 = per_class_ap(preds, gts, n_cls, model.cfg.iou_3d, iou_axis_aligned)
    apb = per_class_ap(preds, gts, n_cls, model.cfg.iou_bev, iou_bev)
    return {
        "ap_3d": ap3, "ap_bev": apb, "map_3d": float(np.mean(ap3)), "map_bev": float(np.mean(apb)),
        "classes": [c.name for c in model.scene_cfg.classes],
        "attention_mass": float(np.mean(masses)) if masses else None,
        "num_scenes": len(gts),
    }


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    params = {}
    for i, (name, p) in enumerate(model.named_parameters()):
        fname = f"p{i:04d}.aatn"
        T.save_tensor(p, directory / fname)
        params[name] = {"file": fname, "shape": list(p.shape)}
    manifest = {"config": model.cfg.to_dict(), "scene_config": model.scene_cfg.to_dict(),
                "params": params, "versions": versions()}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return directory


def load_checkpoint(directory):
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"no checkpoint manifest in {directory}") from exc
    cfg = RunConfig.from_dict(manifest["config"])
    model = build_model(cfg, SceneConfig.from_dict(manifest["scene_config"]))
    own = dict(model.named_parameters())
    if set(own) != set(manifest["params"]):
        raise ConfigError("checkpoint parameter names do not match the configured model")
    for name, meta in manifest["params"].items():
        t = T.load_tensor(directory / meta["file"])
        if t.shape != own[name].shape:
            raise ConfigError(f"checkpoint tensor {name} has shape {t.shape}, expected {own[name].shape}")
        own[name].data[...] = t.data
    return model


# ---------------------------------------------------------------------------
# ablations

ABLATION_AXES = ("components", "query", "source", "loss")


def ablation_rows(base, axis):
    """(label, RunConfig) rows for one ablation table."""
    scfi = base.scfi if base.scfi != "off" else "ncs_pos"
    if axis == "components":
        return [
            ("baseline", base.replace(fusion="none", scfi="off", joint_2d=False)),
            ("+CAFA", base.replace(fusion="cafa", scfi="off", joint_2d=False)),
            ("+CAFA+SCFI", base.replace(fusion="cafa", scfi=scfi, joint_2d=False)),
            ("+all", base.replace(fusion="cafa", scfi=scfi, joint_2d=True)),
        ]
    if axis == "query":
        return [(label, base.replace(fusion=f)) for label, f in
                [("point_proj", "point_proj"), ("non_local", "nonlocal"),
                 ("multi_head", "cafa_multihead"), ("single_head", "cafa")]]
    if axis == "source":
        return [(f"{img}/{pt}", base.replace(fusion="cafa", scfi=scfi, scfi_image_source=img,
                                             scfi_point_source=pt))
                for img in ("C5", "P5") for pt in ("before", "after")]
    if axis == "loss":
        return [(v, base.replace(fusion="cafa", scfi=v)) for v in ("nce", "infonce", "ce_pos", "ncs_pos")]
    raise ConfigError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")


def _summary(reports):
    maps = [r.map_3d for r in reports]
    out = {"map_3d_mean": float(np.mean(maps)), "map_3d_std": float(np.std(maps)),
           "map_bev_mean": float(np.mean([r.map_bev for r in reports])),
           "ap_3d_mean": np.mean([r.ap_3d for r in reports], axis=0).tolist()}
    masses = [r.attention_mass for r in reports if r.attention_mass is not None]
    out["attention_mass_mean"] = float(np.mean(masses)) if masses else None
    return out


def format_table(table):
    lines = [f"ablation: {table['axis']}", f"{'row':<14} {'mAP3D mean':>10} {'std':>7} {'mAP_BEV':>8}  per-seed"]
    for row in table["rows"]:
        s = row["summary"]
        seeds = " ".join(f"{r['map_3d']:.3f}" for r in row["runs"])
        lines.append(f"{row['label']:<14} {s['map_3d_mean']:>10.4f} {s['map_3d_std']:>7.4f} "
                     f"{s['map_bev_mean']:>8.4f}  {seeds}")
    return "\n".join(lines) + "\n"


def ablate(base, axis, out_dir=None, seeds=(0, 1, 2), dataset=None, cache=None):
    """Run each row of an ablation table over ``seeds``; saves partial results on failure.

    ``cache`` (dict keyed by config hash) lets several tables share identical runs.
    """
    rows = ablation_rows(base, axis)
    dataset = dataset or Dataset(base.data)
    cache = cache if cache is not None else {}
    table = {"axis": axis, "seeds": list(seeds), "rows": [], "versions": versions()}
    out_dir = Path(out_dir) if out_dir else None

    def flush(status):
        table["status"] = status
        if out_dir:
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / "table.json").write_text(json.dumps(table, indent=1))
            (out_dir / "table.txt").write_text(format_table(table))

    try:
        for label, cfg in rows:
            reports = []
            for s in seeds:
                run_cfg = cfg.replace(seed=base.seed + s)
                key = config_hash(run_cfg)
                if key not in cache:
                    log.info("ablation %s row %s seed %d", axis, label, run_cfg.seed)
                    cache[key] = train(run_cfg, dataset)
                reports.append(cache[key])
            table["rows"].append({"label": label, "config": cfg.to_dict(), "summary": _summary(reports),
                                  "runs": [_run_brief(r) for r in reports]})
    except Exception:
        flush("failed")
        raise
    flush("complete")
    return table


def _run_brief(r):
    return {"seed": r.seed, "map_3d": r.map_3d, "map_bev": r.map_bev, "ap_3d": r.ap_3d, "ap_bev": r.ap_bev,
            "attention_mass": r.attention_mass, "final_loss": r.losses[-1] if r.losses else None,
            "losses_finite": bool(all(np.isfinite(l["total"]) for l in r.losses)), "wall_time": r.wall_time}


# ---------------------------------------------------------------------------
# alignment-map dump


def dump_align_map(model, scene, out_dir, voxel_ids=None, rng=None, count=2):
    """Write one heatmap per selected voxel plus the attention-mass statistics.

    By default two random voxels lying inside ground-truth boxes are chosen.
    """
    if model.cfg.fusion not in ("cafa", "cafa_multihead"):
        raise UnsupportedDiagnosticError(f"fusion {model.cfg.fusion!r} produces no alignment map")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _, out = model.predict(scene)
    h, w = out.fmap_hw
    centers = out.voxels.centers
    owner = np.full(len(centers), -1)
    for g, b in enumerate(scene.gt_boxes3d):
        owner[(owner < 0) & b.contains(centers)] = g
    if voxel_ids is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        inside = np.flatnonzero(owner >= 0)
        voxel_ids = sorted(rng.choice(inside, size=min(count, len(inside)), replace=False).tolist())
    stats = []
    for j in voxel_ids:
        row = out.align.weights[j]
        path = out_dir / f"voxel_{j:05d}.pgm"
        write_alignment_pgm(row, h, w, path)
        entry = {"voxel": int(j), "center": centers[j].tolist(), "file": path.name}
        if owner[j] >= 0:
            box = scene.gt_boxes2d[owner[j]]
            entry["object"] = int(owner[j])
            entry["attention_mass"] = attention_mass_in_box(row, box, (h, w), model.cfg.stride)
            entry["uniform_mass"] = box.area / (scene.image_size[0] * scene.image_size[1])
        stats.append(entry)
    summary = {"scene_seed": scene.seed, "fmap_hw": [h, w], "voxels": stats,
               "mean_in_box_mass": attention_mass(out, scene, model.cfg.stride)}
    (out_dir / "align_stats.json").write_text(json.dumps(summary, indent=1))
    return summary


# ---------------------------------------------------------------------------
# gradient checks


def gradcheck_modules(names=None):
    """Max relative gradient error per module on micro inputs."""
    from .gradcheck import CHECKS
    names = names or list(CHECKS)
    unknown = set(names) - set(CHECKS)
    if unknown:
        raise ConfigError(f"unknown gradcheck module(s) {sorted(unknown)}; choose from {list(CHECKS)}")
    return {n: CHECKS[n]() for n in names}


__all__ = [
    "RunReport", "train", "train_model", "evaluate", "save_checkpoint", "load_checkpoint", "ablate",
    "ablation_rows", "format_table", "dump_align_map", "gradcheck_modules", "config_hash", "versions",
]
