"""Command line interface: synth, seg, train, eval, check-grad, report."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import kernels
from .data import generate_synthetic, write_dataset
from .evaluation import evaluate
from .losses import LossConfig, cross_centre_loss, id_loss, total_loss
from .model import BackboneConfig, DualStreamNet, EmbeddingBatch
from .numerics import Tensor, finite_diff_check
from .reporting import emit_report, load_run, rebuild_model, rebuild_test_split
from .spectral import export_seg
from .training import PRESETS, TrainConfig, config_from_file, train


def _cmd_synth(args):
    index = generate_synthetic(
        args.num_ids,
        args.images_per_id,
        (args.height, args.width),
        seed=args.seed,
        difficulty=args.difficulty,
    )
    manifest = {
        "seed": args.seed,
        "num_identities": args.num_ids,
        "images_per_id_per_modality": args.images_per_id,
        "height": args.height,
        "width": args.width,
        "difficulty": args.difficulty,
    }
    write_dataset(index, args.out, manifest)
    print(f"wrote {len(index)} images for {index.num_identities} identities to {args.out}")
    return 0


def _cmd_seg(args):
    report = export_seg(args.input, args.output, weight=args.weight)
    print(f"converted {len(report['converted'])} images to {args.output}")
    for rel, reason in report["skipped"]:
        print(f"skipped {rel}: {reason}")
    return 0


def _cmd_train(args):
    overrides = {}
    if args.preset:
        overrides["preset"] = args.preset
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.config:
        cfg = config_from_file(args.config, **overrides)
    else:
        cfg = TrainConfig(**overrides)
    summary = train(cfg, args.out)
    final = summary["final"]
    print(
        f"preset {cfg.preset}: best epoch {summary['best_epoch']}, "
        f"Rank-1 {final['rank1']:.4f}, mAP {final['mAP']:.4f}"
    )
    return 0


def _cmd_eval(args):
    run_dir = Path(args.checkpoint).parent
    cfg, summary = load_run(run_dir)
    if args.data:
        cfg.data_root = args.data
    model = rebuild_model(cfg, summary, run_dir)
    test_index = rebuild_test_split(cfg)
    use_seg = PRESETS[cfg.preset][0]
    result = evaluate(
        model, test_index, protocol=args.protocol, use_seg=use_seg, seg_weight=cfg.seg_weight
    )
    payload = {
        "protocol": result.protocol,
        "rank1": result.rank1,
        "mAP": result.mAP,
        "cmc": result.cmc.tolist(),
        "num_queries": result.num_queries,
        "num_gallery": result.num_gallery,
        "excluded_queries": result.excluded_queries,
    }
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def _cmd_check_grad(args):
    # tiny end-to-end model in float64; float32 is too noisy for
    # entrywise finite differences
    rng = np.random.default_rng(args.seed)
    parts, num_ids, p, k = 4, 3, 2, 2
    cfg = BackboneConfig(
        stage_channels=(4, 4, 6),
        specific_channels=6,
        input_hw=(32, 16),
        parts=parts,
        num_identities=num_ids,
        seed=args.seed,
        dtype=np.float64,
    )
    model = DualStreamNet(cfg)
    loss_cfg = LossConfig(num_parts=parts)
    half = p * k
    labels = np.repeat(np.arange(p), k)
    labels = np.concatenate([labels, labels])
    mods = np.array(["seg"] * half + ["ir"] * half)

    def run(_p):
        from . import numerics as nm

        seg_x = Tensor(seg_pix)
        ir_x = Tensor(ir_pix)
        feat_seg, feat_ir = model.shared_forward(seg_x, ir_x)
        chunks = nm.concat([model.chunk_embed(feat_seg), model.chunk_embed(feat_ir)])
        specific = nm.concat(
            [model.specific_forward(feat_seg, "seg"), model.specific_forward(feat_ir, "ir")]
        )
        logits_specific = model.classify(specific, "specific")
        logits_chunks = [
            model.classify(nm.take_part(chunks, i), f"chunk{i}") for i in range(parts)
        ]
        batch = EmbeddingBatch(chunks, specific, labels, mods)
        total, _ = total_loss(batch, logits_specific, logits_chunks, labels, loss_cfg)
        return total

    print(f"backend: {kernels.get_backend()}")
    worst = 0.0
    for point in range(args.points):
        seg_pix = rng.uniform(0.0, 1.0, (half, 3, 32, 16))
        ir_pix = rng.uniform(0.0, 1.0, (half, 3, 32, 16))
        for param in model.parameters():
            err = finite_diff_check(run, param, eps=1e-5)
            worst = max(worst, err)
            print(f"point {point}: {param.name:28s} max rel err {err:.3e}")
    print(f"worst: {worst:.3e} ({'OK' if worst < 1e-2 else 'FAIL'} at 1e-2)")
    return 0 if worst < 1e-2 else 1


def _cmd_report(args):
    path = emit_report(args.run_dir, embeddings=args.embeddings)
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sepgnet",
        description="Spectrally enhanced grey images and pseudo-anchor "
        "aggregation for cross-modality person retrieval",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic two-modality dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num-ids", type=int, default=24)
    p.add_argument("--images-per-id", type=int, default=10)
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--width", type=int, default=48)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--difficulty", type=float, default=0.6)
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("seg", help="export SEG images for a folder of PNGs")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--weight", type=float, default=1.0)
    p.set_defaults(fn=_cmd_seg)

    p = sub.add_parser("train", help="train one run")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--protocol", choices=("V2I", "I2V"), default="V2I")
    p.add_argument("--data", help="override the dataset root")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("check-grad", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=int, default=1)
    p.set_defaults(fn=_cmd_check_grad)

    p = sub.add_parser("report", help="write report.md for a finished run")
    p.add_argument("run_dir")
    p.add_argument("--embeddings", action="store_true", help="also dump test embeddings")
    p.set_defaults(fn=_cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
