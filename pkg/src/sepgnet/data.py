"""Two-modality identity datasets: a deterministic synthetic generator, a
folder loader for real paired data, and the identity-balanced PK sampler.

Synthetic identities are procedural silhouettes (head, striped torso, arms,
legs as stacked rectangles) with identity-specific geometry and clothing
colors.  Visible images render in color over background clutter; infrared
images render the same geometry through the intensity map
0.6*max(R,G,B) + 0.4*mean(R,G,B), then Gaussian blur (sigma 1) and additive
noise (sigma 8*difficulty).  All nuisance factors (position jitter,
brightness, background shift, clutter, blur, noise) scale with the
difficulty knob and vanish at difficulty 0, where every infrared image
equals the exact intensity map of its visible counterpart.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .spectral import Modality, load_png, quantize, save_png

VISIBLE_DIR = "visible"
INFRARED_DIR = "infrared"

MIN_IDENTITIES = 4
MIN_HW = (24, 12)
# minimum fraction of pixels on which two identity silhouettes must differ
SILHOUETTE_DIFF_MIN = 0.05


@dataclass
class ImageRecord:
    identity: int
    modality: str  # "visible" | "infrared"
    pixels: np.ndarray | None = None  # uint8 [H, W, 3]
    path: Path | None = None
    camera: int | None = None


@dataclass
class DatasetIndex:
    records: list[ImageRecord]
    num_identities: int

    def __len__(self):
        return len(self.records)

    def by_identity_modality(self) -> dict[tuple[int, str], list[int]]:
        table: dict[tuple[int, str], list[int]] = {}
        for i, rec in enumerate(self.records):
            table.setdefault((rec.identity, rec.modality), []).append(i)
        return table

    def eligible_identities(self) -> list[int]:
        """Identities that have at least one image in each modality."""
        table = self.by_identity_modality()
        ids = sorted({rec.identity for rec in self.records})
        return [p for p in ids if (p, "visible") in table and (p, "infrared") in table]

    def split(self, train_identities: int) -> tuple["DatasetIndex", "DatasetIndex"]:
        """Identity-disjoint split: ids < train_identities train, rest test."""
        train = [r for r in self.records if r.identity < train_identities]
        test = [r for r in self.records if r.identity >= train_identities]
        return (
            DatasetIndex(train, train_identities),
            DatasetIndex(test, self.num_identities - train_identities),
        )


def record_pixels(rec: ImageRecord) -> np.ndarray:
    """uint8 [H, W, 3] pixels of a record, loading from disk if needed."""
    if rec.pixels is not None:
        return rec.pixels
    modality = Modality.VISIBLE if rec.modality == "visible" else Modality.INFRARED
    img = load_png(rec.path, modality)
    arr = img.pixels.astype(np.uint8)
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    return arr


def infrared_map(rgb: np.ndarray) -> np.ndarray:
    """Channel-collapsing intensity map used for the synthetic infrared."""
    arr = np.asarray(rgb, dtype=np.float64)
    return 0.6 * arr.max(axis=2) + 0.4 * arr.mean(axis=2)


# ---------------------------------------------------------------------------
# Synthetic generation


def _hsv_color(rng, sat_lo=0.45, sat_hi=0.95, val_lo=110, val_hi=235):
    h = rng.uniform(0.0, 6.0)
    s = rng.uniform(sat_lo, sat_hi)
    v = rng.uniform(val_lo, val_hi)
    c = v * s
    x = c * (1 - abs(h % 2 - 1))
    sector = [(c, x, 0), (x, c, 0), (0, c, x), (0, x, c), (x, 0, c), (c, 0, x)]
    r, g, b = sector[int(h) % 6]
    m = v - c
    return np.array([r + m, g + m, b + m])


def _draw_geometry(rng, h, w):
    head_w = rng.uniform(0.14, 0.30)
    head_h = rng.uniform(0.08, 0.14)
    head_top = rng.uniform(0.02, 0.06)
    torso_w = rng.uniform(0.30, 0.62)
    torso_h = rng.uniform(0.26, 0.40)
    arm_w = rng.uniform(0.04, 0.10) if rng.random() < 0.7 else 0.0
    arm_len = rng.uniform(0.5, 1.0)
    split_legs = rng.random() < 0.65
    leg_w = rng.uniform(0.10, 0.22)
    leg_gap = rng.uniform(0.02, 0.14) if split_legs else 0.0
    leg_bottom = rng.uniform(0.85, 0.95)
    centre = 0.5 + rng.uniform(-0.06, 0.06)
    stripe_period = int(rng.integers(3, 10))
    stripe_phase = int(rng.integers(0, stripe_period))
    return {
        "head": (head_top, head_h, head_w),
        "torso": (torso_h, torso_w),
        "arms": (arm_w, arm_len),
        "legs": (split_legs, leg_w, leg_gap, leg_bottom),
        "centre": centre,
        "stripes": (stripe_period, stripe_phase),
        "color_top1": _hsv_color(rng),
        "color_top2": _hsv_color(rng),
        "color_bottom": _hsv_color(rng),
        "color_head": np.array([205.0, 172.0, 150.0]) + rng.uniform(-25, 25, 3),
    }


def _silhouette_boxes(geom, h, w, dx=0, dy=0):
    """Pixel rectangles (r0, r1, c0, c1, role) of one rendered identity."""
    head_top, head_h, head_w = geom["head"]
    torso_h, torso_w = geom["torso"]
    arm_w, arm_len = geom["arms"]
    split_legs, leg_w, leg_gap, leg_bottom = geom["legs"]
    cx = geom["centre"] * w + dx

    def rows(a, b):
        return int(round(a * h)) + dy, int(round(b * h)) + dy

    def cols(width):
        half = width * w / 2
        return int(round(cx - half)), int(round(cx + half))

    boxes = []
    hr0, hr1 = rows(head_top, head_top + head_h)
    hc0, hc1 = cols(head_w)
    boxes.append((hr0, hr1, hc0, hc1, "head"))
    tr0 = hr1 + 1
    tr1 = tr0 + int(round(torso_h * h))
    tc0, tc1 = cols(torso_w)
    boxes.append((tr0, tr1, tc0, tc1, "torso"))
    if arm_w > 0:
        ar1 = tr0 + int(round(arm_len * (tr1 - tr0)))
        aw = int(round(arm_w * w))
        boxes.append((tr0, ar1, tc0 - aw, tc0, "torso"))
        boxes.append((tr0, ar1, tc1, tc1 + aw, "torso"))
    lr0 = tr1
    lr1 = int(round(leg_bottom * h)) + dy
    if split_legs:
        gap = int(round(leg_gap * w / 2))
        lw = int(round(leg_w * w))
        boxes.append((lr0, lr1, int(round(cx)) - gap - lw, int(round(cx)) - gap, "legs"))
        boxes.append((lr0, lr1, int(round(cx)) + gap, int(round(cx)) + gap + lw, "legs"))
    else:
        lc0, lc1 = cols(2 * leg_w + leg_gap)
        boxes.append((lr0, lr1, lc0, lc1, "legs"))
    return boxes


def _silhouette_mask(geom, h, w):
    mask = np.zeros((h, w), dtype=bool)
    for r0, r1, c0, c1, _ in _silhouette_boxes(geom, h, w):
        mask[max(r0, 0) : max(r1, 0), max(c0, 0) : max(c1, 0)] = True
    return mask


def _render(geom, h, w, rng, difficulty):
    """One float RGB render with difficulty-scaled nuisance factors."""
    bg = 185.0 + rng.uniform(-1, 1) * 45.0 * difficulty
    canvas = np.full((h, w, 3), bg)
    n_clutter = int(round(9 * difficulty))
    for _ in range(n_clutter):
        r0 = int(rng.integers(0, h))
        c0 = int(rng.integers(0, w))
        rh = int(rng.integers(h // 12, h // 3))
        cw = int(rng.integers(w // 8, w // 2))
        canvas[r0 : r0 + rh, c0 : c0 + cw] = _hsv_color(rng, 0.2, 0.9, 60, 250)
    dx = int(round(rng.uniform(-1, 1) * 0.05 * w * difficulty))
    dy = int(round(rng.uniform(-1, 1) * 0.03 * h * difficulty))
    period, phase = geom["stripes"]
    for r0, r1, c0, c1, role in _silhouette_boxes(geom, h, w, dx, dy):
        r0, r1 = max(r0, 0), min(max(r1, 0), h)
        c0, c1 = max(c0, 0), min(max(c1, 0), w)
        if role == "head":
            canvas[r0:r1, c0:c1] = geom["color_head"]
        elif role == "legs":
            canvas[r0:r1, c0:c1] = geom["color_bottom"]
        else:
            for r in range(r0, r1):
                striped = ((r + phase) // period) % 2 == 0
                canvas[r, c0:c1] = geom["color_top1"] if striped else geom["color_top2"]
    # per-image illumination: a global brightness factor plus independent
    # channel gains (color temperature); channel structure does not survive
    # the infrared intensity map, so this is visible-side nuisance
    brightness = 1.0 + rng.uniform(-1, 1) * 0.25 * difficulty
    gains = 1.0 + rng.uniform(-1, 1, size=3) * 0.30 * difficulty
    return np.clip(canvas * (brightness * gains), 0.0, 255.0)


def generate_synthetic(
    num_identities: int,
    imgs_per_id_per_modality: int,
    hw: tuple[int, int] = (96, 48),
    seed: int = 0,
    difficulty: float = 0.5,
) -> DatasetIndex:
    """Procedural two-modality dataset, a pure function of its arguments."""
    if num_identities < MIN_IDENTITIES:
        raise ValueError(f"need at least {MIN_IDENTITIES} identities, got {num_identities}")
    if imgs_per_id_per_modality < 1:
        raise ValueError("need at least one image per identity and modality")
    h, w = hw
    if h < MIN_HW[0] or w < MIN_HW[1]:
        raise ValueError(f"image size {hw} below minimum {MIN_HW}")
    if not 0.0 <= difficulty <= 1.0:
        raise ValueError(f"difficulty must lie in [0, 1], got {difficulty}")
    rng = np.random.default_rng(seed)
    geoms, masks = [], []
    for p in range(num_identities):
        for attempt in range(200):
            geom = _draw_geometry(rng, h, w)
            mask = _silhouette_mask(geom, h, w)
            if all((mask ^ m).mean() >= SILHOUETTE_DIFF_MIN for m in masks):
                break
        else:
            raise RuntimeError(f"could not draw a distinct silhouette for identity {p}")
        geoms.append(geom)
        masks.append(mask)
    records = []
    for p, geom in enumerate(geoms):
        visible = []
        for _ in range(imgs_per_id_per_modality):
            visible.append(quantize(_render(geom, h, w, rng, difficulty)))
        infrared = []
        for _ in range(imgs_per_id_per_modality):
            base = infrared_map(quantize(_render(geom, h, w, rng, difficulty)))
            if difficulty > 0:
                base = gaussian_filter(base, sigma=1.0)
                base = base + rng.normal(0.0, 8.0 * difficulty, size=base.shape)
            ir = quantize(base)[:, :, None]
            infrared.append(np.repeat(ir, 3, axis=2))
        for arr in visible:
            records.append(ImageRecord(identity=p, modality="visible", pixels=arr))
        for arr in infrared:
            records.append(ImageRecord(identity=p, modality="infrared", pixels=arr))
    return DatasetIndex(records=records, num_identities=num_identities)


def write_dataset(index: DatasetIndex, root, manifest: dict | None = None):
    """Write root/{visible|infrared}/<id>/<j>.png plus a manifest JSON."""
    root = Path(root)
    counters: dict[tuple[int, str], int] = {}
    id_map: dict[int, str] = {}
    for rec in index.records:
        j = counters.get((rec.identity, rec.modality), 0)
        counters[(rec.identity, rec.modality)] = j + 1
        folder = f"{rec.identity:04d}"
        id_map[rec.identity] = folder
        sub = VISIBLE_DIR if rec.modality == "visible" else INFRARED_DIR
        path = root / sub / folder / f"{j:03d}.png"
        arr = record_pixels(rec)
        from .spectral import Image  # local import to avoid cycle at module load

        if rec.modality == "infrared":
            save_png(Image(arr[:, :, :1].astype(np.float64), Modality.INFRARED), path)
        else:
            save_png(Image(arr.astype(np.float64), Modality.VISIBLE), path)
    payload = dict(manifest or {})
    payload["identity_folders"] = {str(k): v for k, v in sorted(id_map.items())}
    with open(root / "manifest.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def _folder_sort_key(name: str):
    try:
        return (0, int(name), name)
    except ValueError:
        return (1, 0, name)


def load_folder(root) -> tuple[DatasetIndex, dict]:
    """Index a root/{visible|infrared}/<identity>/*.png tree.

    Identity folders are re-mapped to dense ids; identities present in only
    one modality are excluded and listed in the report.
    """
    root = Path(root)
    names: dict[str, set[str]] = {}
    for sub, modality in ((VISIBLE_DIR, "visible"), (INFRARED_DIR, "infrared")):
        base = root / sub
        if not base.is_dir():
            continue
        for folder in base.iterdir():
            if folder.is_dir():
                names.setdefault(folder.name, set()).add(modality)
    paired = sorted((n for n, mods in names.items() if len(mods) == 2), key=_folder_sort_key)
    excluded = sorted((n for n, mods in names.items() if len(mods) < 2), key=_folder_sort_key)
    mapping = {name: i for i, name in enumerate(paired)}
    records = []
    for name in paired:
        for sub, modality in ((VISIBLE_DIR, "visible"), (INFRARED_DIR, "infrared")):
            for path in sorted((root / sub / name).glob("*.png")):
                records.append(
                    ImageRecord(identity=mapping[name], modality=modality, path=path)
                )
    report = {
        "identity_mapping": mapping,
        "excluded_single_modality": excluded,
        "num_images": len(records),
    }
    if not records:
        warnings.warn(f"no paired identities found under {root}", stacklevel=2)
    return DatasetIndex(records=records, num_identities=len(paired)), report


# ---------------------------------------------------------------------------
# PK sampling


@dataclass
class SamplerConfig:
    p_identities: int = 8
    k_images: int = 7
    seed: int = 0

    def __post_init__(self):
        if self.p_identities < 2:
            raise ValueError("P must be >= 2 (negatives are needed)")
        if self.k_images < 2:
            raise ValueError("K must be >= 2 (hard positive mining needs pairs)")


def _sample_identity(index, table, identity, k, rng):
    out = []
    for modality in ("visible", "infrared"):
        pool = table[(identity, modality)]
        if len(pool) >= k:
            chosen = rng.choice(len(pool), size=k, replace=False)
        else:
            chosen = rng.choice(len(pool), size=k, replace=True)
        out.append([index.records[pool[int(c)]] for c in chosen])
    return out  # ([visible records], [infrared records])


def pk_sample(index: DatasetIndex, cfg: SamplerConfig, rng) -> list[ImageRecord]:
    """One batch of 2*P*K records: P identities, K per modality each.

    Record order: all visible blocks (grouped by identity), then all
    infrared blocks in the same identity order.
    """
    ids = index.eligible_identities()
    if len(ids) < cfg.p_identities:
        raise ValueError(
            f"need {cfg.p_identities} identities with both modalities, have {len(ids)}"
        )
    table = index.by_identity_modality()
    picked = [ids[int(i)] for i in rng.permutation(len(ids))[: cfg.p_identities]]
    vis_blocks, ir_blocks = [], []
    for p in picked:
        vis, ir = _sample_identity(index, table, p, cfg.k_images, rng)
        vis_blocks.extend(vis)
        ir_blocks.extend(ir)
    return vis_blocks + ir_blocks


class PKSampler:
    """Streaming PK batches; leftover identities roll into the next shuffle."""

    def __init__(self, index: DatasetIndex, cfg: SamplerConfig):
        self.index = index
        self.cfg = cfg
        self._ids = index.eligible_identities()
        if len(self._ids) < cfg.p_identities:
            raise ValueError(
                f"need {cfg.p_identities} identities with both modalities, "
                f"have {len(self._ids)}"
            )
        self._table = index.by_identity_modality()
        self._rng = np.random.default_rng(cfg.seed)
        self._pool: list[int] = []

    @property
    def batches_per_epoch(self) -> int:
        return len(self._ids) // self.cfg.p_identities

    def next_batch(self) -> list[ImageRecord]:
        while len(self._pool) < self.cfg.p_identities:
            order = self._rng.permutation(len(self._ids))
            self._pool.extend(self._ids[int(i)] for i in order)
        picked, self._pool = (
            self._pool[: self.cfg.p_identities],
            self._pool[self.cfg.p_identities :],
        )
        vis_blocks, ir_blocks = [], []
        for p in picked:
            vis, ir = _sample_identity(self.index, self._table, p, self.cfg.k_images, self._rng)
            vis_blocks.extend(vis)
            ir_blocks.extend(ir)
        return vis_blocks + ir_blocks
