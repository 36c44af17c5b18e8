"""SEG image generation: grayscale collapse plus phase-only spectral detail.

A visible RGB image is reduced to its grayscale version (replicated to three
channels) and enhanced with the inverse transform of its unit-amplitude
phase spectrum, which carries silhouette/structure information.  The
phase-only reconstruction has a tiny dynamic range, so it is min-max
normalized per channel to [0, 255] before being added with a configurable
weight; the sum is clamped back to [0, 255].
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

# bins with amplitude at or below this fraction of the channel's peak are
# treated as spectral zeros: their phase is defined as 0 (arg of an exact
# zero), which keeps the phase map stable against FFT rounding noise
ZERO_BIN_RELTOL = 1e-9


class Modality(str, Enum):
    VISIBLE = "visible"
    INFRARED = "infrared"
    SEG = "seg"
    GREY = "grey"


@dataclass(frozen=True)
class GrayscaleCoefficients:
    """Channel weights of the RGB -> grey transform; must sum to 1."""

    alpha: float = 0.299
    beta: float = 0.587
    gamma: float = 0.114

    def __post_init__(self):
        total = self.alpha + self.beta + self.gamma
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"grayscale coefficients sum to {total!r}, expected 1")


@dataclass
class Image:
    """H x W x C pixel grid in [0, 255] with a modality tag."""

    pixels: np.ndarray
    modality: Modality

    def __post_init__(self):
        arr = np.asarray(self.pixels, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ValueError(f"image must be HxWx1 or HxWx3, got shape {arr.shape}")
        self.pixels = arr

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def channels(self):
        return self.pixels.shape[2]


@dataclass
class SpectralDecomposition:
    """Per-channel phase (radians in (-pi, pi]) and non-negative amplitude."""

    phase: np.ndarray  # [C, H, W]
    amplitude: np.ndarray  # [C, H, W]


def rgb_to_grey(img: Image, coeffs: GrayscaleCoefficients | None = None) -> Image:
    """Collapse a 3-channel visible image to a single grey channel.

    Values stay floating point; quantization happens only at PNG export.
    """
    if img.channels != 3:
        raise ValueError(f"rgb_to_grey needs a 3-channel image, got {img.channels}")
    c = coeffs or GrayscaleCoefficients()
    grey = (
        c.alpha * img.pixels[:, :, 0]
        + c.beta * img.pixels[:, :, 1]
        + c.gamma * img.pixels[:, :, 2]
    )
    return Image(grey, Modality.GREY)


def replicate_channels(img: Image) -> Image:
    """Copy a single grey channel to three identical channels."""
    if img.channels != 1:
        raise ValueError(f"replicate_channels needs a 1-channel image, got {img.channels}")
    return Image(np.repeat(img.pixels, 3, axis=2), Modality.GREY)


def fft2(channel: np.ndarray) -> np.ndarray:
    """Unnormalized forward 2D DFT of a real H x W grid."""
    return np.fft.fft2(np.asarray(channel, dtype=np.float64))


def ifft2(spectrum: np.ndarray) -> np.ndarray:
    """Inverse 2D DFT with the 1/(H*W) factor."""
    return np.fft.ifft2(spectrum)


def decompose(img: Image) -> SpectralDecomposition:
    """Split each channel's spectrum into phase and amplitude."""
    chans = img.pixels.transpose(2, 0, 1)
    spec = np.stack([fft2(ch) for ch in chans])
    amplitude = np.abs(spec)
    phase = np.angle(spec)
    for c in range(phase.shape[0]):
        peak = amplitude[c].max()
        phase[c][amplitude[c] <= ZERO_BIN_RELTOL * peak] = 0.0
    return SpectralDecomposition(phase=phase, amplitude=amplitude)


def recombine(dec: SpectralDecomposition) -> np.ndarray:
    """Inverse-transform amplitude * exp(i*phase) back to [C, H, W] reals."""
    spec = dec.amplitude * np.exp(1j * dec.phase)
    return np.stack([ifft2(s).real for s in spec])


def phase_reconstruct(dec: SpectralDecomposition) -> np.ndarray:
    """Inverse transform of the unit-amplitude spectrum exp(i*phase).

    Returns the real part as [C, H, W]; the imaginary residue of a phase map
    taken from a real image must vanish and is checked against 1e-4.
    """
    out = []
    for ph in dec.phase:
        rec = ifft2(np.exp(1j * ph))
        resid = np.abs(rec.imag).max()
        if resid >= 1e-4:
            raise ValueError(
                f"phase-only reconstruction has imaginary residue {resid:.3e}; "
                "the phase map does not come from a real image"
            )
        out.append(rec.real)
    return np.stack(out)


def _normalize_per_channel(recon: np.ndarray) -> np.ndarray:
    """Scale each channel symmetrically to [-255, 255]; flat channels
    become zeros.

    The reconstruction is zero-centered, so the scaling keeps its zero
    level at zero: pixels where the phase spectrum contributes nothing are
    left unchanged by the enhancement (a one-sided min-max mapping would
    instead shift every pixel by the zero level's image, ~half of full
    scale, and saturate bright regions once added to the grey image).
    """
    out = np.zeros_like(recon)
    for c, ch in enumerate(recon):
        peak = np.abs(ch).max()
        if peak < 1e-12:
            warnings.warn(
                f"phase reconstruction of channel {c} is flat; treating it as zero",
                stacklevel=3,
            )
            continue
        out[c] = ch / peak * 255.0
    return out


def compose_seg(
    vis: Image,
    coeffs: GrayscaleCoefficients | None = None,
    weight: float = 1.0,
    fft_source: str = "rgb",
) -> Image:
    """Build the spectrally enhanced grey image from a visible image.

    fft_source selects whether the phase spectrum is taken per RGB channel
    ("rgb", default) or from the replicated grayscale image ("grey").
    """
    if vis.channels != 3:
        raise ValueError(f"compose_seg needs a 3-channel visible image, got {vis.channels}")
    if weight < 0:
        raise ValueError(f"weight must be >= 0, got {weight}")
    if fft_source not in ("rgb", "grey"):
        raise ValueError(f"fft_source must be 'rgb' or 'grey', got {fft_source!r}")
    grey3 = replicate_channels(rgb_to_grey(vis, coeffs))
    if weight == 0:
        return Image(grey3.pixels.copy(), Modality.SEG)
    source = vis if fft_source == "rgb" else grey3
    recon = phase_reconstruct(decompose(source))
    enhanced = grey3.pixels + weight * _normalize_per_channel(recon).transpose(1, 2, 0)
    return Image(np.clip(enhanced, 0.0, 255.0), Modality.SEG)


# ---------------------------------------------------------------------------
# PNG I/O (8-bit; quantization rounds half up)


def quantize(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(pixels, dtype=np.float64) + 0.5), 0, 255).astype(np.uint8)


def save_png(img: Image, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = quantize(img.pixels)
    if arr.shape[2] == 1:
        PILImage.fromarray(arr[:, :, 0], mode="L").save(path)
    else:
        PILImage.fromarray(arr, mode="RGB").save(path)


def load_png(path, modality: Modality) -> Image:
    with PILImage.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64)
    return Image(arr, modality)


def export_seg(input_dir, output_dir, weight: float = 1.0,
               coeffs: GrayscaleCoefficients | None = None) -> dict:
    """Convert every PNG under input_dir to a SEG PNG under output_dir.

    Relative paths are preserved.  Returns a report dict with the converted
    and skipped (unreadable or non-RGB) files.
    """
    input_dir, output_dir = Path(input_dir), Path(output_dir)
    report = {"converted": [], "skipped": []}
    for src in sorted(input_dir.rglob("*.png")):
        rel = src.relative_to(input_dir)
        try:
            img = load_png(src, Modality.VISIBLE)
            if img.channels != 3:
                raise ValueError("not a 3-channel image")
            seg = compose_seg(img, coeffs=coeffs, weight=weight)
        except Exception as exc:  # noqa: BLE001 - any unreadable file is skipped
            report["skipped"].append((str(rel), str(exc)))
            continue
        save_png(seg, output_dir / rel)
        report["converted"].append(str(rel))
    return report
