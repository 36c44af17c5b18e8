"""Training loop, run configuration and the ablation presets.

Presets mirror the ablation axes: "baseline" feeds raw RGB through the
visible stream with identity losses only, "+SE" switches the visible stream
to SEG images, "+SE+CC" adds the cross-centre loss and "+SE+PABA" the
pseudo-anchor aggregation loss (both weighted by lambda2).

The optimizer is SGD with momentum 0.9 and weight decay 5e-4; the learning
rate starts at lr0 and is multiplied by decay_factor at each decay epoch.
Every source of randomness is derived from the run seed, so identical
configurations produce byte-identical metrics files and checkpoints.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from . import numerics as nm
from .data import (
    DatasetIndex,
    PKSampler,
    SamplerConfig,
    generate_synthetic,
    load_folder,
    record_pixels,
)
from .evaluation import evaluate_descriptors, embed_gallery, prepare_inputs
from .losses import LossConfig, total_loss
from .model import BackboneConfig, DualStreamNet, EmbeddingBatch
from .numerics import GradTape, Tensor, backward

# preset -> (visible stream uses SEG images, aggregation loss)
PRESETS: dict[str, tuple[bool, str | None]] = {
    "baseline": (False, None),
    "+SE": (True, None),
    "+SE+CC": (True, "cc"),
    "+SE+PABA": (True, "paba"),
}

METRICS_HEADER = "epoch,lr,L_ID_specific,L_PABA,L_ID_chunks,total,rank1,mAP"
TRAIN_LOG_HEADER = "iteration,L_ID_specific,L_PABA,L_ID_chunks,total"


@dataclass
class TrainConfig:
    profile: str = "desk"
    preset: str = "+SE+PABA"
    seed: int = 0
    epochs: int = 30
    lr0: float = 0.03
    decay_epochs: tuple[int, ...] = (10, 20)
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    margin: float = 0.5
    lambda1: float = 1.0
    lambda2: float = 2.5
    lambda3: float = 1.0
    parts: int = 12
    stage_channels: tuple[int, ...] = (16, 32, 64)
    specific_channels: int = 128
    shared_classifiers: bool = True
    p_identities: int = 4
    k_images: int = 2
    flip: bool = True
    seg_weight: float = 1.0
    seg_fft_source: str = "rgb"
    data_root: str = ""
    num_identities: int = 24
    train_identities: int = 16
    images_per_id: int = 10
    image_height: int = 96
    image_width: int = 48
    difficulty: float = 0.6
    clip_norm: float = 0.2
    paba_normalize: bool = True
    eval_batch: int = 64

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {list(PRESETS)}")
        decays = tuple(self.decay_epochs)
        if any(b <= a for a, b in zip(decays, decays[1:])) or any(
            d >= self.epochs or d < 0 for d in decays
        ):
            raise ValueError(
                f"decay epochs {decays} must be strictly increasing and < epochs={self.epochs}"
            )
        self.decay_epochs = decays
        self.stage_channels = tuple(self.stage_channels)
        if not self.data_root and self.train_identities >= self.num_identities:
            raise ValueError("train_identities must leave identities for the test split")

    def loss_config(self) -> LossConfig:
        return LossConfig(
            margin=self.margin,
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            lambda3=self.lambda3,
            num_parts=self.parts,
            normalize=self.paba_normalize,
        )

    def backbone_config(self, num_identities: int, seed) -> BackboneConfig:
        return BackboneConfig(
            stage_channels=self.stage_channels,
            specific_channels=self.specific_channels,
            input_hw=(self.image_height, self.image_width),
            parts=self.parts,
            num_identities=num_identities,
            seed=seed,
            shared_classifiers=self.shared_classifiers,
        )


# paper-scale schedule and batch shape; dataset fields still point at a folder
PAPER_PROFILE = {
    "profile": "paper",
    "epochs": 120,
    "decay_epochs": (30, 70),
    "p_identities": 8,
    "k_images": 7,
}


def config_for_profile(profile: str, **overrides) -> TrainConfig:
    if profile == "desk":
        return TrainConfig(**overrides)
    if profile == "paper":
        merged = dict(PAPER_PROFILE)
        merged.update(overrides)
        return TrainConfig(**merged)
    raise ValueError(f"unknown profile {profile!r}; choose desk or paper")


_TUPLE_FIELDS = {"decay_epochs", "stage_channels"}
_BOOL_FIELDS = {"shared_classifiers", "flip"}


def _coerce(name: str, text: str):
    text = text.strip()
    if name in _TUPLE_FIELDS:
        return tuple(int(v) for v in text.split(",") if v.strip())
    if name in _BOOL_FIELDS:
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"config key {name}: expected a boolean, got {text!r}")
    field_types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    ftype = field_types[name]
    if ftype == "int":
        return int(text)
    if ftype == "float":
        return float(text)
    return text


def parse_config_file(path) -> dict:
    """Flat key-value config: one `key = value` per line, # for comments."""
    raw: dict[str, str] = {}
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in stripped.split("=", 1))
        if key not in known:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        raw[key] = value
    return {k: _coerce(k, v) for k, v in raw.items()}


def config_from_file(path, **overrides) -> TrainConfig:
    values = parse_config_file(path)
    values.update(overrides)
    profile = values.pop("profile", "desk")
    return config_for_profile(profile, **values)


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate at an epoch: lr0 times decay_factor per passed decay."""
    passed = sum(1 for d in cfg.decay_epochs if epoch >= d)
    return cfg.lr0 * cfg.decay_factor**passed


class SGD:
    """SGD with momentum and L2 weight decay folded into the gradient.

    clip_norm bounds each parameter's gradient norm; without batch norm the
    full-rate steps through the conv stages would otherwise kill the ReLU
    trunk (a global bound would instead starve the small classifier heads,
    whose gradients are orders of magnitude below the conv ones).
    """

    def __init__(
        self,
        params,
        momentum: float = 0.9,
        weight_decay: float = 5e-4,
        clip_norm: float | None = None,
    ):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self._velocity = {p.name: np.zeros_like(p.value.data) for p in self.params}

    def step(self, lr: float):
        for p in self.params:
            g = p.grad.data
            if self.clip_norm is not None:
                norm = float(np.sqrt((g * g).sum()))
                if norm > self.clip_norm:
                    g = g * (self.clip_norm / norm)
            g = g + self.weight_decay * p.value.data
            v = self._velocity[p.name]
            v *= self.momentum
            v += g
            p.value.data -= lr * v


class TrainingDiverged(RuntimeError):
    pass


def _load_dataset(cfg: TrainConfig, data_seed) -> DatasetIndex:
    if cfg.data_root:
        index, _report = load_folder(cfg.data_root)
        return index
    return generate_synthetic(
        cfg.num_identities,
        cfg.images_per_id,
        (cfg.image_height, cfg.image_width),
        seed=data_seed,
        difficulty=cfg.difficulty,
    )


def _input_cache(index: DatasetIndex, use_seg: bool, cfg: TrainConfig) -> dict[int, np.ndarray]:
    """Per-record network input [3,H,W] float32 in [0,1], SEG-transformed
    for visible records when the preset asks for it."""
    from .spectral import Image, Modality, compose_seg

    cache = {}
    for rec in index.records:
        arr = record_pixels(rec).astype(np.float64)
        if rec.modality == "visible" and use_seg:
            arr = compose_seg(
                Image(arr, Modality.VISIBLE),
                weight=cfg.seg_weight,
                fft_source=cfg.seg_fft_source,
            ).pixels
        cache[id(rec)] = (arr.transpose(2, 0, 1) / 255.0).astype(np.float32)
    return cache


def _fmt_row(values) -> str:
    out = []
    for v in values:
        out.append(str(v) if isinstance(v, (int, np.integer)) else f"{float(v):.6f}")
    return ",".join(out)


def train(cfg: TrainConfig, out_dir) -> dict:
    """Train one run; writes checkpoint, CSV logs and a run summary JSON."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    use_seg, aggregation = PRESETS[cfg.preset]
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    s_data, s_model, s_sampler, s_flip = seeds

    index = _load_dataset(cfg, s_data)
    train_index, test_index = index.split(cfg.train_identities)
    num_train_ids = len(train_index.eligible_identities())
    model = DualStreamNet(cfg.backbone_config(num_train_ids, s_model))
    sampler = PKSampler(
        train_index, SamplerConfig(cfg.p_identities, cfg.k_images, seed=s_sampler)
    )
    optimizer = SGD(
        model.parameters(), cfg.momentum, cfg.weight_decay, clip_norm=cfg.clip_norm or None
    )
    flip_rng = np.random.default_rng(s_flip)
    loss_cfg = cfg.loss_config()

    train_inputs = _input_cache(train_index, use_seg, cfg)
    test_q, test_q_ids = prepare_inputs(test_index, "visible", use_seg, cfg.seg_weight)
    test_g, test_g_ids = prepare_inputs(test_index, "infrared", False)

    iters_per_epoch = sampler.batches_per_epoch
    train_rows, metric_rows = [], []
    best = {"rank1": -1.0, "epoch": -1, "result": None}
    ckpt_path = out_dir / "best.ckpt"
    iteration = 0

    for epoch in range(cfg.epochs):
        lr = lr_at(cfg, epoch)
        sums = np.zeros(4)
        for _ in range(iters_per_epoch):
            records = sampler.next_batch()
            half = len(records) // 2
            labels = np.array([r.identity for r in records], dtype=np.int64)
            mods = np.array(["seg"] * half + ["ir"] * half)
            arrays = [train_inputs[id(r)] for r in records]
            if cfg.flip:
                flips = flip_rng.random(len(arrays)) < 0.5
                arrays = [
                    np.ascontiguousarray(a[:, :, ::-1]) if f else a
                    for a, f in zip(arrays, flips)
                ]
            seg_x = Tensor(np.stack(arrays[:half]))
            ir_x = Tensor(np.stack(arrays[half:]))
            with GradTape():
                feat_seg, feat_ir = model.shared_forward(seg_x, ir_x)
                chunks = nm.concat(
                    [model.chunk_embed(feat_seg), model.chunk_embed(feat_ir)]
                )
                spec_seg = model.specific_forward(feat_seg, "seg")
                spec_ir = model.specific_forward(feat_ir, "ir")
                if cfg.shared_classifiers:
                    specific = nm.concat([spec_seg, spec_ir])
                    logits_specific = model.classify(specific, "specific")
                    logits_chunks = [
                        model.classify(nm.take_part(chunks, i), f"chunk{i}")
                        for i in range(cfg.parts)
                    ]
                else:
                    specific = nm.concat([spec_seg, spec_ir])
                    logits_specific = nm.concat(
                        [
                            model.classify(spec_seg, "specific", "seg"),
                            model.classify(spec_ir, "specific", "ir"),
                        ]
                    )
                    logits_chunks = []
                    for i in range(cfg.parts):
                        part = nm.take_part(chunks, i)
                        logits_chunks.append(
                            nm.concat(
                                [
                                    model.classify(
                                        nm.take_rows(part, np.arange(half)), f"chunk{i}", "seg"
                                    ),
                                    model.classify(
                                        nm.take_rows(part, np.arange(half, 2 * half)),
                                        f"chunk{i}",
                                        "ir",
                                    ),
                                ]
                            )
                        )
                batch = EmbeddingBatch(
                    chunks=chunks,
                    specific=specific,
                    identity_labels=labels,
                    modality_labels=mods,
                )
                total, parts_of = total_loss(
                    batch, logits_specific, logits_chunks, labels, loss_cfg, aggregation
                )
            total_val = total.item()
            if not np.isfinite(total_val):
                dump = out_dir / "diverged_batch.npz"
                np.savez(dump, seg=seg_x.data, ir=ir_x.data, labels=labels)
                raise TrainingDiverged(
                    f"non-finite loss {total_val} at iteration {iteration}; "
                    f"offending batch dumped to {dump}"
                )
            backward(total)
            optimizer.step(lr)
            model.zero_grads()
            row = (
                parts_of["id_specific"],
                parts_of["aggregation"],
                parts_of["id_chunks"],
                total_val,
            )
            sums += np.array(row)
            train_rows.append(_fmt_row((iteration, *row)))
            iteration += 1

        result = evaluate_descriptors(
            embed_gallery(model, test_q, cfg.eval_batch),
            test_q_ids,
            embed_gallery(model, test_g, cfg.eval_batch),
            test_g_ids,
            protocol="V2I",
        )
        means = sums / iters_per_epoch
        metric_rows.append(_fmt_row((epoch, lr, *means, result.rank1, result.mAP)))
        if result.rank1 > best["rank1"]:
            best = {"rank1": result.rank1, "epoch": epoch, "result": result}
            model.save(ckpt_path)

    (out_dir / "train_log.csv").write_text(
        "\n".join([TRAIN_LOG_HEADER, *train_rows]) + "\n"
    )
    (out_dir / "metrics.csv").write_text(
        "\n".join([METRICS_HEADER, *metric_rows]) + "\n"
    )
    final = best["result"]
    summary = {
        "config": dataclasses.asdict(cfg),
        "backend": kernels.get_backend(),
        "num_train_identities": num_train_ids,
        "iterations": iteration,
        "best_epoch": best["epoch"],
        "final": {
            "protocol": final.protocol,
            "rank1": final.rank1,
            "mAP": final.mAP,
            "cmc": final.cmc.tolist(),
            "num_queries": final.num_queries,
            "num_gallery": final.num_gallery,
            "excluded_queries": final.excluded_queries,
        },
    }
    with open(out_dir / "run_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary
