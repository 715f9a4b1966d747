"""Band decomposition through masked DFTs, and Welch PSD estimation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import ConfigError, NumericFault

__all__ = [
    "Band",
    "BandSpec",
    "PsdEstimate",
    "DEFAULT_BANDS",
    "dft",
    "idft",
    "naive_dft",
    "fft",
    "ifft",
    "build_masks",
    "band_decompose",
    "psd",
]

IMAG_TOL = 1e-9


@dataclass(frozen=True)
class Band:
    name: str
    lo_hz: float
    hi_hz: float


# beta starts at 12 Hz (not 13) so that the masks tile the spectrum
DEFAULT_BANDS: Tuple[Band, ...] = (
    Band("delta", 0.0, 4.0),
    Band("theta", 4.0, 8.0),
    Band("alpha", 8.0, 12.0),
    Band("beta", 12.0, 30.0),
    Band("gamma", 30.0, 80.0),
    Band("epsilon", 80.0, 128.0),
)


@dataclass(frozen=True)
class BandSpec:
    """K contiguous frequency bands over (0, fs/2] for length-T segments."""

    sample_rate_hz: float = 256.0
    bands: Tuple[Band, ...] = DEFAULT_BANDS
    segment_length: int = 512

    def __post_init__(self):
        object.__setattr__(self, "bands", tuple(
            b if isinstance(b, Band) else Band(*b) if not isinstance(b, dict) else Band(**b)
            for b in self.bands
        ))
        self.validate()

    @property
    def K(self) -> int:
        return len(self.bands)

    @property
    def names(self) -> List[str]:
        return [b.name for b in self.bands]

    def validate(self) -> None:
        if self.sample_rate_hz <= 0:
            raise ConfigError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if self.segment_length < 2:
            raise ConfigError(f"segment length must be >= 2, got {self.segment_length}")
        if not self.bands:
            raise ConfigError("at least one band is required")
        nyq = self.sample_rate_hz / 2
        prev_hi = 0.0
        for b in self.bands:
            if not b.lo_hz < b.hi_hz:
                raise ConfigError(f"band {b.name!r}: lo {b.lo_hz} must be < hi {b.hi_hz}")
            if not np.isclose(b.lo_hz, prev_hi):
                raise ConfigError(
                    f"bands must tile (0, {nyq}] without gaps or overlaps: "
                    f"band {b.name!r} starts at {b.lo_hz} Hz, previous band ends at {prev_hi} Hz"
                )
            prev_hi = b.hi_hz
        if prev_hi < nyq - 1e-12:
            raise ConfigError(f"bands end at {prev_hi} Hz, short of Nyquist {nyq} Hz")

    def to_dict(self) -> dict:
        return {
            "sample_rate_hz": self.sample_rate_hz,
            "segment_length": self.segment_length,
            "bands": [{"name": b.name, "lo_hz": b.lo_hz, "hi_hz": b.hi_hz} for b in self.bands],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BandSpec":
        return cls(
            sample_rate_hz=float(d.get("sample_rate_hz", 256.0)),
            bands=tuple(Band(b["name"], float(b["lo_hz"]), float(b["hi_hz"])) for b in d["bands"])
            if "bands" in d
            else DEFAULT_BANDS,
            segment_length=int(d.get("segment_length", 512)),
        )

    @classmethod
    def even(cls, edges_hz: Sequence[float], names=None, sample_rate_hz=256.0, segment_length=512):
        """Bands from a sorted list of edges, e.g. ``[0, 8, 30, 128]``."""
        names = names or [f"band{i}" for i in range(len(edges_hz) - 1)]
        bands = tuple(Band(n, float(lo), float(hi)) for n, lo, hi in zip(names, edges_hz, edges_hz[1:]))
        return cls(sample_rate_hz, bands, segment_length)


# ---------------------------------------------------------------------------
# Fourier transforms
# ---------------------------------------------------------------------------


def naive_dft(x: np.ndarray) -> np.ndarray:
    """O(T^2) direct summation; reference implementation for tests."""
    x = np.asarray(x)
    T = x.shape[-1]
    t = np.arange(T)
    W = np.exp(-2j * np.pi * np.outer(t, t) / T)
    return x @ W.T


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Iterative radix-2 Cooley-Tukey FFT along the last axis.

    Non power-of-two lengths fall back to direct summation.
    """
    a = np.asarray(x, dtype=np.complex128)
    T = a.shape[-1]
    sign = 1.0 if inverse else -1.0
    if T & (T - 1):
        t = np.arange(T)
        W = np.exp(sign * 2j * np.pi * np.outer(t, t) / T)
        return a @ W.T
    a = a[..., _bit_reverse(T)].copy()
    size = 2
    while size <= T:
        half = size // 2
        tw = np.exp(sign * 2j * np.pi * np.arange(half) / size)
        blocks = a.reshape(a.shape[:-1] + (T // size, size))
        even = blocks[..., :half].copy()
        odd = blocks[..., half:] * tw
        blocks[..., :half] = even + odd
        blocks[..., half:] = even - odd
        size *= 2
    return a


def ifft(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X)
    return fft(X, inverse=True) / X.shape[-1]


def dft(x: np.ndarray) -> np.ndarray:
    """Spectrum sum_t x[t] exp(-j 2 pi f t / T), f = 0..T-1 (last axis)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 2:
        raise ConfigError(f"dft needs at least 2 samples, got {x.shape[-1]}")
    if not np.isfinite(x).all():
        raise NumericFault("dft input contains non-finite values")
    return fft(x)


def idft(X: np.ndarray) -> np.ndarray:
    return ifft(X)


# ---------------------------------------------------------------------------
# band masks
# ---------------------------------------------------------------------------


def build_masks(spec: BandSpec, T: Optional[int] = None) -> np.ndarray:
    """K x T boolean masks; mirrored bins share their positive-frequency band.

    Bin f (f <= T/2) sits at f * fs / T Hz and joins the band whose [lo, hi)
    interval contains it. DC goes to the first band, Nyquist (and anything at
    or above the last edge) to the last. Bin T - f copies bin f.
    """
    T = spec.segment_length if T is None else T
    fs = spec.sample_rate_hz
    half = T // 2
    freqs = np.arange(half + 1) * fs / T
    edges = np.array([b.lo_hz for b in spec.bands] + [spec.bands[-1].hi_hz])
    band_of = np.searchsorted(edges, freqs, side="right") - 1
    band_of = np.clip(band_of, 0, spec.K - 1)
    band_of[0] = 0
    if T % 2 == 0:
        band_of[half] = spec.K - 1
    full = np.empty(T, dtype=np.int64)
    full[: half + 1] = band_of
    full[half + 1 :] = band_of[1 : T - half][::-1]
    masks = full[None, :] == np.arange(spec.K)[:, None]
    if not (masks.sum(axis=0) == 1).all():
        raise ConfigError("band masks do not partition the spectrum")
    return masks


def band_decompose(x: np.ndarray, spec: BandSpec, masks: Optional[np.ndarray] = None) -> np.ndarray:
    """Split real signals (..., T) into band signals (..., K, T)."""
    x = np.asarray(x, dtype=np.float64)
    T = x.shape[-1]
    if masks is None:
        masks = build_masks(spec, T)
    X = dft(x)
    bands = ifft(X[..., None, :] * masks)
    resid = np.abs(bands.imag).max() if bands.size else 0.0
    if resid > IMAG_TOL * max(1.0, float(np.abs(x).max(initial=0.0))):
        raise NumericFault(f"band signals carry imaginary residue {resid:.3e}; masks not symmetric")
    return bands.real


# ---------------------------------------------------------------------------
# power spectral density
# ---------------------------------------------------------------------------


@dataclass
class PsdEstimate:
    freqs: np.ndarray
    density: np.ndarray
    settings: dict = field(default_factory=dict)


def psd(
    x: np.ndarray,
    fs: float = 256.0,
    nperseg: int = 256,
    noverlap: Optional[int] = None,
) -> PsdEstimate:
    """One-sided Welch estimate: Hann window, mean of segment periodograms.

    No detrending. Works on the last axis, so (..., T) inputs give (..., F)
    densities.
    """
    x = np.asarray(x, dtype=np.float64)
    T = x.shape[-1]
    if T < nperseg:
        raise ConfigError(f"signal length {T} shorter than one Welch segment ({nperseg})")
    if noverlap is None:
        noverlap = nperseg // 2
    step = nperseg - noverlap
    if step <= 0:
        raise ConfigError(f"overlap {noverlap} must be smaller than segment length {nperseg}")
    n = np.arange(nperseg)
    win = 0.5 - 0.5 * np.cos(2 * np.pi * n / nperseg)  # periodic Hann
    starts = range(0, T - nperseg + 1, step)
    segs = np.stack([x[..., s : s + nperseg] for s in starts], axis=-2)
    spec = fft(segs * win)[..., : nperseg // 2 + 1]
    power = (spec.real**2 + spec.imag**2) / (fs * (win**2).sum())
    power[..., 1 : (nperseg + 1) // 2] *= 2.0
    density = power.mean(axis=-2)
    freqs = np.arange(nperseg // 2 + 1) * fs / nperseg
    settings = {"window": "hann", "nperseg": nperseg, "noverlap": noverlap, "fs": fs}
    return PsdEstimate(freqs, density, settings)
