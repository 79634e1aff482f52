#!/usr/bin/env python3
"""Desk-scale experiment: render data, train GAP vs SMD branches, evaluate.

Reproduces the headline property of the architecture at laptop scale: a
Siamese pair of FFN-free attention backbones learns cross-view retrieval on
synthetic scenes, and the spatial-mixing head keeps pace with (or beats)
global average pooling. Also demonstrates the limited-FoV evaluation grid.

Usage:
    python scripts/run_desk_experiment.py --out runs/desk [--epochs 100]
"""

import argparse
import json
from pathlib import Path

import numpy as np

from crossview.data import fov_crop, generate_scene_pairs, load_dataset, save_dataset
from crossview.evaluate import build_index, evaluate_retrieval, self_match_labels
from crossview.losses import LossConfig
from crossview.model import ModelConfig
from crossview.train import TrainConfig, compute_descriptors, evaluate_checkpoint, train


def run_branch(head, smd_k, manifest, out_dir, epochs, seed):
    cfg = TrainConfig(
        epochs=epochs,
        data=str(manifest),
        model=ModelConfig.desk(depth=2, dim=64, heads=4, input_hw=(32, 64), head=head, smd_k=smd_k),
        loss=LossConfig(alpha=10.0, strategy="exhaustive"),
        lr=1.5e-3,
        batch_size=32,
        seed=seed,
        early_stop_r1=0.97,
    )
    print(f"== training {head} head ==")
    result = train(
        cfg,
        out_dir=out_dir,
        log_fn=lambda e: print(f"  epoch {e['epoch']:3d}  loss {e['loss']:.4f}  r@1 {e['r_at_1']:.3f}"),
    )
    print(f"  best r@1: {result.best_r1:.3f}")
    return result


def fov_sweep(result, manifest):
    """Re-rank the gallery with ground panoramas cropped to narrower FoVs.

    The cropped strip is tiled back to full width (duplicating observed
    columns, never inventing unseen ones) so the backbone sees in-range
    inputs; narrower FoV should degrade retrieval monotonically.
    """
    pairs = load_dataset(manifest)
    siamese = result.siamese
    aerial = np.stack([p.aerial for p in pairs])
    da = compute_descriptors(aerial, siamese.aerial_config, siamese.aerial)
    index = build_index(da, [p.pair_id for p in pairs])
    labels = self_match_labels([p.pair_id for p in pairs])
    print("== limited field-of-view sweep (full gallery, tiled crops) ==")
    for fov in (360, 180, 90, 70):
        cropped = []
        for p in pairs:
            crop = fov_crop(p.ground, fov, orientation_deg=0.0)
            w = p.ground.shape[-1]
            reps = int(np.ceil(w / crop.shape[-1]))
            cropped.append(np.tile(crop, (1, 1, reps))[..., :w].astype(np.float32))
        dg = compute_descriptors(np.stack(cropped), siamese.ground_config, siamese.ground)
        report = evaluate_retrieval(dg, index, labels)
        print(
            f"  fov {fov:3d}: r@1 {report.r_at[1]:.3f}  r@5 {report.r_at[5]:.3f}  "
            f"r@1% {report.r_at_1pct:.3f}"
        )


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--pairs", type=int, default=256)
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    out = Path(args.out)
    data_dir = out / "data"
    if (data_dir / "manifest.json").exists():
        manifest = data_dir / "manifest.json"
        print(f"reusing dataset at {manifest}")
    else:
        pairs = generate_scene_pairs(args.seed, args.pairs, ground_hw=(32, 64), aerial_hw=(32, 32))
        manifest = save_dataset(pairs, data_dir)
        print(f"rendered {args.pairs} pairs -> {manifest}")

    gap = run_branch("gap", 8, manifest, out / "gap", args.epochs, seed=0)
    smd = run_branch("smd", 4, manifest, out / "smd", args.epochs, seed=0)

    print("== full-gallery evaluation of best checkpoints ==")
    for name, result in (("gap", gap), ("smd", smd)):
        report, doc = evaluate_checkpoint(result.best_checkpoint, manifest)
        (out / f"{name}_report.json").write_text(doc + "\n")
        print(f"  {name}: r@1 {report.r_at[1]:.3f}  hit {report.hit_rate:.3f}  mAP {report.map:.3f}")

    fov_sweep(gap, manifest)
    print(json.dumps({"gap_best_r1": gap.best_r1, "smd_best_r1": smd.best_r1}))


if __name__ == "__main__":
    main()
