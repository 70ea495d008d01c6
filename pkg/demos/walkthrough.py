"""
Walk one synthetic scene through the fusion detector, printing what each stage produces.

    python3 demos/walkthrough.py [--seed 3]

No training happens here; weights are at initialisation, so the numbers show
shapes and plumbing rather than accuracy.
"""

import argparse

import numpy as np

from autoalign import tensor as T
from autoalign.image import flatten_spatial
from autoalign.model import RunConfig, attention_mass, build_model
from autoalign.points import voxelize
from autoalign.scene import SceneConfig, generate_scene


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[1])
    ap.add_argument("--seed", type=int, default=3)
    args = ap.parse_args()

    scene_cfg = SceneConfig()
    scene = generate_scene(args.seed, scene_cfg)
    names = [c.name for c in scene_cfg.classes]
    print(f"scene {args.seed}: {len(scene.points)} lidar points, image {scene.image.shape}")
    for b3, b2 in zip(scene.gt_boxes3d, scene.gt_boxes2d):
        print(f"  {names[b3.class_id]:<10} centre {np.round(b3.center, 2)}  size {np.round(b3.size, 2)}"
              f"  -> image box u[{b2.u_min:.0f}, {b2.u_max:.0f}] v[{b2.v_min:.0f}, {b2.v_max:.0f}]")

    cfg = RunConfig(fusion="cafa", scfi="ncs_pos", joint_2d=True, scfi_hidden=64, scfi_out=128)
    model = build_model(cfg, scene_cfg)

    with T.no_grad():
        vs = voxelize(scene.points, model.spec)
        P = model.embed(vs).feats
        maps = model.backbone(scene.image)
        F = flatten_spatial(model.reduce(maps["c5"]))
    print(f"\nvoxels: {len(vs)} non-empty of grid {tuple(int(e) for e in model.spec.extents)}; voxel features {P.shape}")
    print(f"image features: C5 {maps['c5'].feats.shape}, P5 {maps['p5'].feats.shape}, flattened F {F.shape}")

    out = model.forward(scene, np.random.default_rng(0))
    print("\nlosses at initialisation:")
    for k, v in out.breakdown.as_floats().items():
        print(f"  {k:<14} {v:8.4f}")

    h, w = out.fmap_hw
    print(f"\nalignment map: {out.align.weights.shape} (one softmax row over {h}x{w} cells per voxel)")
    mass = attention_mass(out, scene, cfg.stride)
    if mass is not None:
        H, W = scene.image_size
        uniform = np.mean([b.area / (H * W) for b in scene.gt_boxes2d])
        print(f"mean in-box attention mass {mass:.4f} (uniform attention would give about {uniform:.4f})")

    dets, _ = model.predict(scene)
    print(f"\n{len(dets)} detections above score {cfg.score_thresh} (untrained head)")


if __name__ == "__main__":
    main()
