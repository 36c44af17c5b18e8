"""Retrieval evaluation: descriptors, Rank-k / CMC and mean average precision.

The retrieval descriptor of an image is the concatenation of its N chunk
embeddings, each L2-normalized independently.  Ranking uses Euclidean
distance with ties broken by gallery index, which keeps evaluation
deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DatasetIndex, record_pixels
from .model import DualStreamNet
from .numerics import Tensor
from .spectral import GrayscaleCoefficients, Image, Modality, compose_seg

PROTOCOLS = ("V2I", "I2V")


@dataclass
class EvalResult:
    cmc: np.ndarray  # Rank-k accuracy, k = 1..len(cmc)
    mAP: float
    per_query_ap: np.ndarray
    protocol: str
    num_queries: int
    num_gallery: int
    excluded_queries: int = 0

    @property
    def rank1(self) -> float:
        return float(self.cmc[0])


def embed_gallery(model: DualStreamNet, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Descriptors [M, N*chunk_dim] of images [M, 3, H, W] scaled to [0, 1]."""
    descs = []
    for start in range(0, images.shape[0], batch_size):
        x = Tensor(images[start : start + batch_size])
        chunks = model.chunk_embed(model.trunk(x)).data  # [b, N, C]
        norms = np.linalg.norm(chunks, axis=2, keepdims=True)
        chunks = chunks / np.maximum(norms, 1e-12)
        descs.append(chunks.reshape(chunks.shape[0], -1))
    return np.concatenate(descs, axis=0)


def rank_and_ap(
    query_desc: np.ndarray,
    query_id: int,
    gallery_descs: np.ndarray,
    gallery_ids: np.ndarray,
    exclude: int | None = None,
) -> tuple[int, float]:
    """First-hit rank (1-based) and average precision of one query.

    ``exclude`` drops one gallery index (self-match in self-retrieval).
    """
    gallery_ids = np.asarray(gallery_ids)
    dist = np.linalg.norm(gallery_descs - query_desc[None, :], axis=1)
    keep = np.arange(len(gallery_ids))
    if exclude is not None:
        keep = keep[keep != exclude]
    order = keep[np.argsort(dist[keep], kind="stable")]
    matches = gallery_ids[order] == query_id
    positions = np.flatnonzero(matches)
    if len(positions) == 0:
        raise ValueError(f"gallery contains no item with identity {query_id}")
    rank = int(positions[0]) + 1
    precisions = (np.arange(len(positions)) + 1) / (positions + 1)
    return rank, float(precisions.mean())


def evaluate_descriptors(
    query_descs: np.ndarray,
    query_ids: np.ndarray,
    gallery_descs: np.ndarray,
    gallery_ids: np.ndarray,
    protocol: str = "V2I",
    max_rank: int = 20,
) -> EvalResult:
    """Aggregate rank_and_ap over a query set.

    Queries without any same-identity gallery item are excluded and counted.
    """
    if len(query_descs) == 0 or len(gallery_descs) == 0:
        raise ValueError("empty query or gallery set")
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    max_rank = min(max_rank, len(gallery_ids))
    hits = np.zeros(max_rank, dtype=np.int64)
    aps = []
    excluded = 0
    for q in range(len(query_descs)):
        if not np.any(gallery_ids == query_ids[q]):
            excluded += 1
            continue
        rank, ap = rank_and_ap(query_descs[q], query_ids[q], gallery_descs, gallery_ids)
        if rank <= max_rank:
            hits[rank - 1] += 1
        aps.append(ap)
    if not aps:
        raise ValueError("no valid queries (no query identity appears in the gallery)")
    cmc = hits.cumsum() / len(aps)
    aps = np.asarray(aps)
    return EvalResult(
        cmc=cmc,
        mAP=float(aps.mean()),
        per_query_ap=aps,
        protocol=protocol,
        num_queries=len(aps),
        num_gallery=len(gallery_ids),
        excluded_queries=excluded,
    )


def prepare_inputs(
    index: DatasetIndex,
    modality: str,
    use_seg: bool,
    seg_weight: float = 1.0,
    coeffs: GrayscaleCoefficients | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Stack one modality of an index into [M, 3, H, W] floats in [0, 1].

    Visible records are SEG-transformed when use_seg is set; infrared
    records pass through unchanged.
    """
    arrays, ids = [], []
    for rec in index.records:
        if rec.modality != modality:
            continue
        arr = record_pixels(rec).astype(np.float64)
        if modality == "visible" and use_seg:
            arr = compose_seg(Image(arr, Modality.VISIBLE), coeffs=coeffs, weight=seg_weight).pixels
        arrays.append((arr.transpose(2, 0, 1) / 255.0).astype(np.float32))
        ids.append(rec.identity)
    if not arrays:
        return np.zeros((0, 3, 1, 1), np.float32), np.zeros(0, np.int64)
    return np.stack(arrays), np.asarray(ids, dtype=np.int64)


def evaluate(
    model: DualStreamNet,
    test_index: DatasetIndex,
    protocol: str = "V2I",
    use_seg: bool = True,
    seg_weight: float = 1.0,
    max_rank: int = 20,
    embed_fn=None,
) -> EvalResult:
    """Cross-modality retrieval on a test split.

    V2I queries with (SEG-transformed) visible images against the infrared
    gallery; I2V reverses the roles.  ``embed_fn`` overrides the model
    descriptor (used by pixel-space baselines in tests).
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")
    vis, vis_ids = prepare_inputs(test_index, "visible", use_seg, seg_weight)
    ir, ir_ids = prepare_inputs(test_index, "infrared", False)
    if protocol == "V2I":
        q, q_ids, g, g_ids = vis, vis_ids, ir, ir_ids
    else:
        q, q_ids, g, g_ids = ir, ir_ids, vis, vis_ids
    if len(q) == 0 or len(g) == 0:
        raise ValueError(f"empty query or gallery set for protocol {protocol}")
    embed = embed_fn if embed_fn is not None else lambda x: embed_gallery(model, x)
    return evaluate_descriptors(embed(q), q_ids, embed(g), g_ids, protocol, max_rank)
