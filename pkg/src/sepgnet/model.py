"""Weight-shareable dual-stream embedding network.

Both streams (SEG-style and infrared) pass through three shared conv+relu
stages, each with stride 2; a training step concatenates the two batches
along the batch axis, runs the shared trunk once and splits the result
back.  There are no batch-coupled operations, so this is bitwise equal to
running each batch alone.  A duplicated, modality-specific fourth stage
extracts per-stream cues, and the shared feature map is pooled into N
horizontal chunk embeddings, each with its own identity classifier.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import ConfigError, Parameter, ShapeError, Tensor

MODALITY_STREAMS = ("seg", "ir")

TRUNK_STRIDE = 8  # three shared stages, stride 2 each


@dataclass
class BackboneConfig:
    stage_channels: tuple[int, ...] = (16, 32, 64)
    specific_channels: int = 128
    input_hw: tuple[int, int] = (96, 48)
    parts: int = 12
    num_identities: int = 16
    seed: int = 0
    shared_classifiers: bool = True
    dtype: type = np.float32

    @property
    def chunk_dim(self) -> int:
        return self.stage_channels[-1]

    def __post_init__(self):
        if len(self.stage_channels) != 3:
            raise ConfigError("the shared trunk has exactly 3 stages")
        h = self.input_hw[0]
        if h % TRUNK_STRIDE != 0 or (h // TRUNK_STRIDE) % self.parts != 0:
            raise ConfigError(
                f"input height {h} / trunk stride {TRUNK_STRIDE} must be divisible "
                f"into {self.parts} parts"
            )
        if self.num_identities < 1:
            raise ConfigError("num_identities must be positive")


@dataclass
class EmbeddingBatch:
    """Chunk and specific embeddings with identity/modality labels."""

    chunks: Tensor  # [B, N, chunk_dim]
    specific: Tensor | None  # [B, specific_channels]
    identity_labels: np.ndarray
    modality_labels: np.ndarray  # "seg" / "ir" per sample

    def __post_init__(self):
        self.identity_labels = np.asarray(self.identity_labels, dtype=np.int64)
        self.modality_labels = np.asarray(self.modality_labels)
        b = self.chunks.shape[0]
        if len(self.identity_labels) != b or len(self.modality_labels) != b:
            raise ShapeError(
                f"batch of {b} embeddings with {len(self.identity_labels)} identity "
                f"and {len(self.modality_labels)} modality labels"
            )
        unknown = set(np.unique(self.modality_labels)) - set(MODALITY_STREAMS)
        if unknown:
            raise ValueError(f"unknown modality labels: {sorted(unknown)}")

    @property
    def size(self) -> int:
        return self.chunks.shape[0]

    def rows_of(self, modality: str) -> np.ndarray:
        return np.flatnonzero(self.modality_labels == modality)

    def identities(self) -> np.ndarray:
        return np.unique(self.identity_labels)


def _kaiming(rng: np.random.Generator, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class DualStreamNet:
    """Shared 3-stage trunk + duplicated modality stage + classifier heads."""

    def __init__(self, cfg: BackboneConfig):
        self.cfg = cfg
        self._params: dict[str, Parameter] = {}
        rng = np.random.default_rng(cfg.seed)
        dt = cfg.dtype
        in_ch = 3
        for s, ch in enumerate(cfg.stage_channels, start=1):
            self._add(f"trunk{s}.weight", _kaiming(rng, (ch, in_ch, 3, 3), in_ch * 9, dt))
            self._add(f"trunk{s}.bias", np.zeros(ch, dtype=dt))
            in_ch = ch
        for mod in MODALITY_STREAMS:
            self._add(
                f"specific_{mod}.weight",
                _kaiming(rng, (cfg.specific_channels, in_ch, 3, 3), in_ch * 9, dt),
            )
            self._add(f"specific_{mod}.bias", np.zeros(cfg.specific_channels, dtype=dt))
        suffixes = ("",) if cfg.shared_classifiers else tuple(f"_{m}" for m in MODALITY_STREAMS)
        for suffix in suffixes:
            for i in range(cfg.parts):
                self._add(
                    f"cls_chunk{i}{suffix}.weight",
                    _kaiming(rng, (cfg.chunk_dim, cfg.num_identities), cfg.chunk_dim, dt),
                )
                self._add(f"cls_chunk{i}{suffix}.bias", np.zeros(cfg.num_identities, dtype=dt))
            self._add(
                f"cls_specific{suffix}.weight",
                _kaiming(
                    rng, (cfg.specific_channels, cfg.num_identities), cfg.specific_channels, dt
                ),
            )
            self._add(f"cls_specific{suffix}.bias", np.zeros(cfg.num_identities, dtype=dt))

    def _add(self, name, value):
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._params[name] = Parameter(name, Tensor(value))

    def param(self, name) -> Parameter:
        return self._params[name]

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def zero_grads(self):
        nm.zero_grads(self._params.values())

    # ---- forward pieces ----

    def trunk(self, x: Tensor) -> Tensor:
        """Shared 3-stage conv trunk over a [B,3,H,W] batch in [0,1]."""
        for s in range(1, 4):
            x = nm.conv2d(x, self._params[f"trunk{s}.weight"], stride=2, padding=1)
            x = nm.add_channel_bias(x, self._params[f"trunk{s}.bias"])
            x = nm.relu(x)
        return x

    def shared_forward(self, seg_x: Tensor, ir_x: Tensor) -> tuple[Tensor, Tensor]:
        """Run both batches through the shared trunk as one concatenation."""
        if seg_x.shape[1:] != ir_x.shape[1:]:
            raise ShapeError(
                f"stream shapes disagree: {seg_x.shape} vs {ir_x.shape}"
            )
        joint = self.trunk(nm.concat([seg_x, ir_x]))
        n_seg = seg_x.shape[0]
        feat_seg = nm.take_rows(joint, np.arange(n_seg))
        feat_ir = nm.take_rows(joint, np.arange(n_seg, joint.shape[0]))
        return feat_seg, feat_ir

    def chunk_embed(self, shared_feat: Tensor, parts: int | None = None) -> Tensor:
        return nm.strip_pool(shared_feat, parts if parts is not None else self.cfg.parts)

    def specific_forward(self, shared_feat: Tensor, modality: str) -> Tensor:
        if modality not in MODALITY_STREAMS:
            raise ValueError(f"unknown modality {modality!r}; expected one of {MODALITY_STREAMS}")
        x = nm.conv2d(shared_feat, self._params[f"specific_{modality}.weight"], stride=2, padding=1)
        x = nm.add_channel_bias(x, self._params[f"specific_{modality}.bias"])
        x = nm.relu(x)
        return nm.global_avg_pool(x)

    def classify(self, embeddings: Tensor, head: str, modality: str | None = None) -> Tensor:
        """Logits of a chunk head ("chunk<i>") or the "specific" head."""
        suffix = ""
        if not self.cfg.shared_classifiers:
            if modality not in MODALITY_STREAMS:
                raise ValueError("per-modality classifiers need a modality argument")
            suffix = f"_{modality}"
        key = f"cls_{head}{suffix}"
        if f"{key}.weight" not in self._params:
            raise ValueError(f"unknown classifier head {head!r}")
        return nm.linear(embeddings, self._params[f"{key}.weight"], self._params[f"{key}.bias"])

    # ---- persistence ----

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.value.data.copy() for name, p in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, p in self._params.items():
            arr = np.asarray(state[name], dtype=p.value.dtype)
            if arr.shape != p.value.shape:
                raise ShapeError(
                    f"parameter {name}: checkpoint shape {arr.shape} vs model {p.value.shape}"
                )
            p.value.data[...] = arr

    def save(self, path):
        nm.save_checkpoint(self._params.values(), path)

    def load(self, path):
        self.load_state(nm.load_checkpoint(path))
