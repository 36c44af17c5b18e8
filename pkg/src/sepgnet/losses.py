"""Training objectives: pseudo-anchor bidirectional aggregation, identity
cross-entropy, the weighted total objective, and the cross-centre baseline.

The aggregation loss works per horizontal chunk.  For every identity and
modality the batch mean of its chunk features forms a pseudo-anchor; each
anchor attracts the hardest (farthest) same-identity feature of the other
modality and repels the hardest (nearest) other-identity feature through a
hinge with a margin, and the two directions are summed over all chunks.

Distances are unnormalized Euclidean and features are not L2-normalized
before the loss.  Ties in the hardest-positive/negative mining pick the
first index in batch order, so the gradient flows to exactly one element.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .model import MODALITY_STREAMS, EmbeddingBatch
from .numerics import Tensor, accumulate, record


@dataclass
class LossConfig:
    margin: float = 0.5
    lambda1: float = 1.0
    lambda2: float = 2.5
    lambda3: float = 1.0
    num_parts: int = 12
    distance: str = "euclidean"
    # L2-normalize chunk features inside the aggregation losses.  Off by
    # default (raw Euclidean distances); the trainer turns it on because an
    # unnormalized hinge lets a from-scratch trunk collapse its feature
    # scale instead of separating identities.
    normalize: bool = False

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError(f"margin must be positive, got {self.margin}")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.distance != "euclidean":
            raise ValueError(f"unsupported distance {self.distance!r}")


@dataclass
class PseudoAnchorSet:
    """Per-(identity, modality) chunk-feature centroids of one batch."""

    identities: np.ndarray  # sorted distinct identities, length K
    anchors: dict[str, Tensor]  # modality -> [K, N, chunk_dim]

    @property
    def num_identities(self) -> int:
        return len(self.identities)

    def vector(self, identity, modality, chunk) -> np.ndarray:
        k = int(np.flatnonzero(self.identities == identity)[0])
        return self.anchors[modality].data[k, chunk]


def _modality_groups(batch: EmbeddingBatch, modality: str, identities: np.ndarray):
    groups = []
    for p in identities:
        idx = np.flatnonzero(
            (batch.identity_labels == p) & (batch.modality_labels == modality)
        )
        if len(idx) == 0:
            raise ValueError(
                f"identity {p} has no {modality!r} samples; every identity in a "
                "batch must appear in both modalities"
            )
        groups.append(idx)
    return groups


def compute_pseudo_anchors(batch: EmbeddingBatch) -> PseudoAnchorSet:
    """Arithmetic centres of same-(identity, modality) chunk features.

    Gradients flow through each mean back to its contributing samples.
    """
    identities = batch.identities()
    anchors = {
        m: nm.group_mean(batch.chunks, _modality_groups(batch, m, identities))
        for m in MODALITY_STREAMS
    }
    return PseudoAnchorSet(identities=identities, anchors=anchors)


def paba_directional(
    anchors: Tensor,
    anchor_ids: np.ndarray,
    feats: Tensor,
    feat_ids: np.ndarray,
    margin: float,
) -> Tensor:
    """Hinge loss of anchors [K,C] against opposite-modality features [M,C].

    Per anchor: hardest same-identity distance minus hardest other-identity
    distance plus margin, clamped at zero, averaged over the K identities.
    """
    anchor_ids = np.asarray(anchor_ids)
    feat_ids = np.asarray(feat_ids)
    k = anchors.shape[0]
    if k < 2:
        raise ValueError(f"directional aggregation needs >= 2 identities, got {k}")
    a, f = anchors.data, feats.data
    diff = a[:, None, :] - f[None, :, :]  # [K, M, C]
    dist = np.sqrt((diff * diff).sum(axis=2))
    same = anchor_ids[:, None] == feat_ids[None, :]
    if not same.any(axis=1).all():
        missing = anchor_ids[~same.any(axis=1)]
        raise ValueError(f"anchors {missing.tolist()} have no same-identity features")
    pos_idx = np.where(same, dist, -np.inf).argmax(axis=1)
    neg_idx = np.where(same, np.inf, dist).argmin(axis=1)
    rows = np.arange(k)
    terms = np.maximum(dist[rows, pos_idx] - dist[rows, neg_idx] + margin, 0.0)
    out = Tensor(np.array([terms.mean()], dtype=a.dtype))

    def bw(g, adj):
        da = np.zeros_like(a)
        df = np.zeros_like(f)
        scale = g[0] / k
        for p in rows:
            if terms[p] <= 0.0:
                continue
            for m, sign in ((pos_idx[p], 1.0), (neg_idx[p], -1.0)):
                d = dist[p, m]
                if d == 0.0:
                    continue  # subgradient 0 at coincident points
                grad = (sign * scale / d) * diff[p, m]
                da[p] += grad
                df[m] -= grad
        accumulate(adj, anchors, da)
        accumulate(adj, feats, df)

    return record(out, (anchors, feats), bw)


def paba_loss(batch: EmbeddingBatch, cfg: LossConfig) -> Tensor:
    """Bidirectional aggregation summed over all chunks (no 1/(2N) factor)."""
    present = set(np.unique(batch.modality_labels))
    if present != set(MODALITY_STREAMS):
        raise ValueError(f"aggregation needs both modalities in the batch, got {sorted(present)}")
    if cfg.normalize:
        batch = dataclasses.replace(batch, chunks=nm.l2_normalize_rows(batch.chunks))
    anchor_set = compute_pseudo_anchors(batch)
    rows = {m: batch.rows_of(m) for m in MODALITY_STREAMS}
    feats = {m: nm.take_rows(batch.chunks, rows[m]) for m in MODALITY_STREAMS}
    ids = {m: batch.identity_labels[rows[m]] for m in MODALITY_STREAMS}
    n_parts = batch.chunks.shape[1]
    terms = []
    for i in range(n_parts):
        for ma, mb in (("seg", "ir"), ("ir", "seg")):
            terms.append(
                paba_directional(
                    nm.take_part(anchor_set.anchors[ma], i),
                    anchor_set.identities,
                    nm.take_part(feats[mb], i),
                    ids[mb],
                    cfg.margin,
                )
            )
    return nm.weighted_sum([(1.0, t) for t in terms])


def id_loss(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of logits [B,C] against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)) + zmax
    logp = z - logsumexp
    out = Tensor(np.array([-logp[np.arange(b), labels].mean()], dtype=z.dtype))

    def bw(g, adj):
        grad = np.exp(logp)
        grad[np.arange(b), labels] -= 1.0
        accumulate(adj, logits, grad * (g[0] / b))

    return record(out, (logits,), bw)


def _mean_sq_rowdist(a: Tensor, b: Tensor) -> Tensor:
    """(1/K) * sum_p ||a_p - b_p||^2 for row-aligned [K,C] tensors."""
    diff = a.data - b.data
    k = a.shape[0]
    out = Tensor(np.array([(diff * diff).sum() / k], dtype=a.dtype))

    def bw(g, adj):
        grad = (2.0 * g[0] / k) * diff
        accumulate(adj, a, grad)
        accumulate(adj, b, -grad)

    return record(out, (a, b), bw)


def cross_centre_loss(batch: EmbeddingBatch, normalize: bool = False) -> Tensor:
    """Mean squared distance between the per-identity modality centroids.

    Chunk features are first averaged over the N parts, i.e. this baseline
    aggregates globally where the directional loss works per chunk.
    """
    present = set(np.unique(batch.modality_labels))
    if present != set(MODALITY_STREAMS):
        raise ValueError(f"cross-centre loss needs both modalities, got {sorted(present)}")
    if normalize:
        batch = dataclasses.replace(batch, chunks=nm.l2_normalize_rows(batch.chunks))
    pooled = nm.mean_parts(batch.chunks)
    identities = batch.identities()
    centroids = {
        m: nm.group_mean(pooled, _modality_groups(batch, m, identities))
        for m in MODALITY_STREAMS
    }
    return _mean_sq_rowdist(centroids["seg"], centroids["ir"])


def total_loss(
    batch: EmbeddingBatch,
    logits_specific: Tensor,
    logits_chunks: list[Tensor],
    labels,
    cfg: LossConfig,
    aggregation: str | None = "paba",
) -> tuple[Tensor, dict[str, float]]:
    """Weighted objective lambda1*ID_specific + lambda2*agg + lambda3*sum ID_chunks.

    aggregation picks the middle term: "paba", "cc" (cross-centre) or None.
    Returns the scalar and the per-term breakdown.
    """
    id_specific = id_loss(logits_specific, labels)
    chunk_terms = [id_loss(lg, labels) for lg in logits_chunks]
    id_chunks = nm.weighted_sum([(1.0, t) for t in chunk_terms])
    terms = [(cfg.lambda1, id_specific)]
    if aggregation == "paba":
        agg = paba_loss(batch, cfg)
    elif aggregation == "cc":
        agg = cross_centre_loss(batch, normalize=cfg.normalize)
    elif aggregation is None:
        agg = None
    else:
        raise ValueError(f"unknown aggregation {aggregation!r}")
    if agg is not None:
        terms.append((cfg.lambda2, agg))
    terms.append((cfg.lambda3, id_chunks))
    total = nm.weighted_sum(terms)
    breakdown = {
        "id_specific": id_specific.item(),
        "aggregation": agg.item() if agg is not None else 0.0,
        "id_chunks": id_chunks.item(),
    }
    return total, breakdown
