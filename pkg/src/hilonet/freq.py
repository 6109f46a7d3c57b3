"""2-d DFT analysis and ideal band filtering for image patches.

The forward transform is the plain unnormalized sum
X[u, v] = sum_{y, x} p[y, x] * exp(-2*pi*i*(u*y/H + v*x/W)), evaluated
by DFT-matrix products; the inverse divides by H*W. Band membership is
decided by radial distance in normalized frequency (each axis scaled by
its own Nyquist), so non-square patches behave isotropically.
"""

from __future__ import annotations

import enum
import functools
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

DEFAULT_CUTOFF = 0.25
DEFAULT_THRESHOLD = 0.5


class Band(enum.Enum):
    LOW = "low"
    HIGH = "high"


@dataclass(frozen=True)
class FreqClass:
    """Band decision for one patch plus the ratio it was made from."""

    band: Band
    ratio: float


@dataclass(frozen=True)
class FrequencySpectrum:
    """Complex DFT coefficients of one patch.

    dc_centered says whether the zero-frequency bin sits at
    (H // 2, W // 2) instead of (0, 0).
    """

    coeffs: np.ndarray
    dc_centered: bool

    @property
    def height(self) -> int:
        return self.coeffs.shape[0]

    @property
    def width(self) -> int:
        return self.coeffs.shape[1]

    def centered(self) -> "FrequencySpectrum":
        if self.dc_centered:
            return self
        return FrequencySpectrum(np.fft.fftshift(self.coeffs), True)

    def uncentered(self) -> "FrequencySpectrum":
        if not self.dc_centered:
            return self
        return FrequencySpectrum(np.fft.ifftshift(self.coeffs), False)


@functools.lru_cache(maxsize=None)
def _dft_matrix(n: int) -> np.ndarray:
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n)


def dft2(patch: np.ndarray) -> FrequencySpectrum:
    """Unnormalized forward transform of a real or complex 2-d patch."""
    p = np.asarray(patch)
    if p.ndim != 2:
        raise ShapeError(f"dft2: rank {p.ndim}, expected 2")
    h, w = p.shape
    coeffs = _dft_matrix(h) @ p.astype(np.complex128) @ _dft_matrix(w)
    return FrequencySpectrum(coeffs, dc_centered=False)


def idft2(spectrum: FrequencySpectrum) -> np.ndarray:
    """Inverse transform; divides by H*W."""
    s = spectrum.uncentered()
    h, w = s.coeffs.shape
    return (np.conj(_dft_matrix(h)) @ s.coeffs @ np.conj(_dft_matrix(w))) / (h * w)


def _radial_grid(h: int, w: int) -> np.ndarray:
    """Distance of every centered bin from DC, with each axis normalized
    by its own Nyquist so the cutoff is shape-independent."""
    fy = (np.arange(h) - h // 2) / (h / 2.0)
    fx = (np.arange(w) - w // 2) / (w / 2.0)
    return np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)


def radial_energy_ratio(spectrum: FrequencySpectrum, cutoff: float = DEFAULT_CUTOFF) -> float:
    """Fraction of total spectral energy at radius > cutoff.

    The DC bin always counts as low band. An all-zero spectrum has no
    energy anywhere and returns 0.
    """
    if not spectrum.dc_centered:
        raise ShapeError("radial_energy_ratio expects a dc-centered spectrum")
    if not 0.0 < cutoff < 1.0:
        raise ShapeError(f"cutoff {cutoff} outside (0, 1)")
    energy = np.abs(spectrum.coeffs) ** 2
    total = energy.sum()
    if total == 0.0:
        return 0.0
    high = energy[_radial_grid(*energy.shape) > cutoff].sum()
    return float(high / total)


def classify_patch(patch: np.ndarray, cutoff: float = DEFAULT_CUTOFF,
                   threshold: float = DEFAULT_THRESHOLD) -> FreqClass:
    """High band iff the high-frequency energy ratio exceeds threshold."""
    ratio = radial_energy_ratio(dft2(patch).centered(), cutoff)
    band = Band.HIGH if ratio > threshold else Band.LOW
    return FreqClass(band, ratio)


def ideal_filter(patch: np.ndarray, cutoff: float, band: Band) -> np.ndarray:
    """Zero out the complementary band and invert.

    The low mask keeps radius <= cutoff (always including DC), the high
    mask keeps the strict complement, so low_pass(x) + high_pass(x)
    reproduces x up to rounding. The imaginary residue of the inverse is
    checked to stay below 1e-6 and discarded.
    """
    spec = dft2(patch).centered()
    keep_low = _radial_grid(spec.height, spec.width) <= cutoff
    mask = keep_low if band is Band.LOW else ~keep_low
    filtered = FrequencySpectrum(spec.coeffs * mask, True)
    out = idft2(filtered)
    residue = float(np.abs(out.imag).max()) if out.size else 0.0
    if residue >= 1e-6:
        raise ShapeError(f"ideal_filter: imaginary residue {residue:.3g} exceeds 1e-6")
    return np.ascontiguousarray(out.real)


def low_pass(patch: np.ndarray, cutoff: float = DEFAULT_CUTOFF) -> np.ndarray:
    return ideal_filter(patch, cutoff, Band.LOW)


def high_pass(patch: np.ndarray, cutoff: float = DEFAULT_CUTOFF) -> np.ndarray:
    return ideal_filter(patch, cutoff, Band.HIGH)


def log_magnitude(spectrum: FrequencySpectrum) -> np.ndarray:
    """log(1 + |X|) of the centered spectrum, for visualization."""
    return np.log1p(np.abs(spectrum.centered().coeffs))
