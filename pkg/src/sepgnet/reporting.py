"""Human-readable run reports and raw embedding export."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .data import DatasetIndex
from .evaluation import embed_gallery, prepare_inputs
from .model import DualStreamNet
from .training import PRESETS, TrainConfig, _load_dataset

REPORT_NAME = "report.md"
EMBEDDINGS_NAME = "embeddings.csv"


def load_run(run_dir) -> tuple[TrainConfig, dict]:
    run_dir = Path(run_dir)
    summary_path = run_dir / "run_summary.json"
    if not summary_path.is_file():
        raise FileNotFoundError(f"{run_dir} has no run_summary.json; is the run complete?")
    summary = json.loads(summary_path.read_text())
    raw = dict(summary["config"])
    raw["decay_epochs"] = tuple(raw["decay_epochs"])
    raw["stage_channels"] = tuple(raw["stage_channels"])
    return TrainConfig(**raw), summary


def rebuild_model(cfg: TrainConfig, summary: dict, run_dir) -> DualStreamNet:
    model = DualStreamNet(cfg.backbone_config(summary["num_train_identities"], seed=0))
    model.load(Path(run_dir) / "best.ckpt")
    return model


def rebuild_test_split(cfg: TrainConfig) -> DatasetIndex:
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    index = _load_dataset(cfg, seeds[0])
    _train, test = index.split(cfg.train_identities)
    return test


def export_embeddings(run_dir, out_path=None) -> Path:
    """Dump test-split descriptors with identity and modality columns."""
    run_dir = Path(run_dir)
    cfg, summary = load_run(run_dir)
    model = rebuild_model(cfg, summary, run_dir)
    test_index = rebuild_test_split(cfg)
    use_seg, _ = PRESETS[cfg.preset]
    rows = []
    for modality in ("visible", "infrared"):
        imgs, ids = prepare_inputs(
            test_index, modality, use_seg and modality == "visible", cfg.seg_weight
        )
        if len(imgs) == 0:
            continue
        descs = embed_gallery(model, imgs, cfg.eval_batch)
        for identity, vec in zip(ids, descs):
            rows.append(
                f"{identity},{modality}," + ",".join(f"{v:.6f}" for v in vec)
            )
    dim = len(rows[0].split(",")) - 2 if rows else 0
    header = "identity,modality," + ",".join(f"e{i}" for i in range(dim))
    out_path = Path(out_path) if out_path else run_dir / EMBEDDINGS_NAME
    out_path.write_text("\n".join([header, *rows]) + "\n")
    return out_path


def _metrics_table(run_dir) -> list[str]:
    lines = (Path(run_dir) / "metrics.csv").read_text().strip().splitlines()
    header = lines[0].split(",")
    table = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for line in lines[1:]:
        table.append("| " + " | ".join(line.split(",")) + " |")
    return table


def emit_report(run_dir, embeddings: bool = False) -> Path:
    """Write report.md summarizing config and metrics of a finished run."""
    run_dir = Path(run_dir)
    cfg, summary = load_run(run_dir)
    final = summary["final"]
    lines = [
        "# Run report",
        "",
        f"Preset: `{cfg.preset}` (available: " + ", ".join(f"`{p}`" for p in PRESETS) + ")",
        f"Backend: {summary['backend']}",
        "",
        "## Configuration",
        "",
        "| key | value |",
        "|---|---|",
    ]
    for key, value in sorted(summary["config"].items()):
        lines.append(f"| {key} | {value} |")
    lines += [
        "",
        "## Per-epoch metrics",
        "",
        *_metrics_table(run_dir),
        "",
        "## Final evaluation",
        "",
        f"Best epoch: {summary['best_epoch']}",
        f"Protocol: {final['protocol']}",
        f"Rank-1: {final['rank1']:.4f}",
        f"mAP: {final['mAP']:.4f}",
        f"Queries: {final['num_queries']} (excluded {final['excluded_queries']}), "
        f"gallery: {final['num_gallery']}",
        "",
        "| k | CMC |",
        "|---|---|",
    ]
    for k, v in enumerate(final["cmc"], start=1):
        lines.append(f"| {k} | {v:.4f} |")
    lines.append("")
    if embeddings:
        path = export_embeddings(run_dir)
        lines.append(f"Embeddings exported to `{path.name}`.")
        lines.append("")
    out = run_dir / REPORT_NAME
    out.write_text("\n".join(lines))
    return out
