"""Semi-synthetic contamination, surrogate signals, splits and dataset files."""
from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ._io import atomic_write
from .exceptions import DataError
from .metrics import rms

__all__ = [
    "ArtifactKind",
    "SignalPair",
    "DatasetSplit",
    "SurrogateConfig",
    "DEFAULT_SNR_GRID",
    "solve_lambda",
    "contaminate",
    "standardize",
    "augment_snr_grid",
    "synth_surrogate",
    "split",
    "pairs_to_arrays",
    "write_dataset",
    "read_dataset",
    "read_f32_matrix",
    "snr_rms_db",
]

DEFAULT_SNR_GRID: Tuple[float, ...] = tuple(float(v) for v in range(-7, 3))

DATASET_MAGIC = b"EDS1"
DATASET_VERSION = 1


class ArtifactKind(enum.IntEnum):
    EOG = 0
    EMG = 1
    MIXED = 2

    @classmethod
    def parse(cls, value) -> "ArtifactKind":
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise DataError(f"unknown artifact kind {value!r}; expected eog, emg or mixed") from None
        return cls(int(value))


@dataclass
class SignalPair:
    clean: np.ndarray
    noisy: np.ndarray
    snr_db: float
    artifact_kind: ArtifactKind = ArtifactKind.EOG

    def __post_init__(self):
        self.clean = np.asarray(self.clean, dtype=np.float64)
        self.noisy = np.asarray(self.noisy, dtype=np.float64)
        if self.clean.shape != self.noisy.shape or self.clean.ndim != 1:
            raise DataError(f"clean {self.clean.shape} and noisy {self.noisy.shape} must be equal-length 1-D")


def snr_rms_db(x, n) -> float:
    """Dataset-construction SNR: 10 log10(RMS(x) / RMS(n)), amplitude ratio under 10 log."""
    return 10.0 * math.log10(rms(x) / rms(n))


def solve_lambda(x, n, snr_db: float) -> float:
    """Scale for ``n`` such that 10 log10(RMS(x) / RMS(lambda n)) == snr_db."""
    rn = rms(n)
    if rn == 0:
        raise DataError("artifact has zero RMS; cannot reach a finite SNR")
    if math.isinf(snr_db) and snr_db > 0:
        return 0.0
    return rms(x) / (rn * 10.0 ** (snr_db / 10.0))


def contaminate(x, n_eog=None, n_emg=None, snr_db: float = 0.0) -> SignalPair:
    """y = x + lambda N. With both artifacts, each gets its own lambda for
    ``snr_db`` before they are summed."""
    x = np.asarray(x, dtype=np.float64)
    parts = [(n, kind) for n, kind in ((n_eog, ArtifactKind.EOG), (n_emg, ArtifactKind.EMG)) if n is not None]
    if not parts:
        raise DataError("contaminate needs at least one artifact signal")
    y = x.copy()
    for n, _ in parts:
        n = np.asarray(n, dtype=np.float64)
        if n.shape != x.shape:
            raise DataError(f"artifact length {n.shape} != clean length {x.shape}")
        y = y + solve_lambda(x, n, snr_db) * n
    kind = parts[0][1] if len(parts) == 1 else ArtifactKind.MIXED
    return SignalPair(x, y, float(snr_db), kind)


def standardize(pair: SignalPair) -> SignalPair:
    """Divide clean and noisy by the population std of the noisy segment."""
    sigma = float(np.std(pair.noisy))
    if sigma == 0:
        raise DataError("noisy segment is constant; cannot standardize")
    return SignalPair(pair.clean / sigma, pair.noisy / sigma, pair.snr_db, pair.artifact_kind)


def _resample_to(n: int, pool: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """First n rows of pool, topped up by sampling with replacement."""
    if len(pool) >= n:
        return pool[:n]
    extra = rng.integers(0, len(pool), size=n - len(pool))
    return np.concatenate([pool, pool[extra]], axis=0)


def augment_snr_grid(
    clean: np.ndarray,
    eog: Optional[np.ndarray] = None,
    emg: Optional[np.ndarray] = None,
    grid: Sequence[float] = DEFAULT_SNR_GRID,
    kind="eog",
    seed: int = 0,
) -> List[SignalPair]:
    """Instantiate every clean/artifact pairing once per SNR level.

    EOG pairs clean segments 1:1 with artifacts; EMG reuses clean segments
    (with replacement) to match the artifact count; MIXED aligns clean, EOG and
    EMG to the larger artifact count.
    """
    kind = ArtifactKind.parse(kind)
    clean = np.atleast_2d(np.asarray(clean, dtype=np.float64))
    if clean.size == 0 or len(grid) == 0:
        raise DataError("augment_snr_grid needs non-empty clean set and SNR grid")
    rng = np.random.default_rng(seed)
    if kind is ArtifactKind.EOG:
        arts = _require(eog, "EOG")
        n = len(arts)
        pairs_x, pairs_eog, pairs_emg = _resample_to(n, clean, rng), arts, None
    elif kind is ArtifactKind.EMG:
        arts = _require(emg, "EMG")
        n = len(arts)
        pairs_x, pairs_eog, pairs_emg = _resample_to(n, clean, rng), None, arts
    else:
        a, b = _require(eog, "EOG"), _require(emg, "EMG")
        n = max(len(a), len(b))
        pairs_x = _resample_to(n, clean, rng)
        pairs_eog, pairs_emg = _resample_to(n, a, rng), _resample_to(n, b, rng)

    out = []
    for i in range(n):
        for level in grid:
            out.append(
                contaminate(
                    pairs_x[i],
                    None if pairs_eog is None else pairs_eog[i],
                    None if pairs_emg is None else pairs_emg[i],
                    snr_db=float(level),
                )
            )
    return out


def _require(arr, name) -> np.ndarray:
    if arr is None or len(arr) == 0:
        raise DataError(f"{name} artifact set is empty")
    return np.atleast_2d(np.asarray(arr, dtype=np.float64))


# ---------------------------------------------------------------------------
# surrogate generators
# ---------------------------------------------------------------------------


@dataclass
class SurrogateConfig:
    """Desk-scale stand-ins for EEG / EOG / EMG segments (unit RMS each)."""

    seed: int = 0
    n_clean: int = 200
    n_eog: int = 200
    n_emg: int = 200
    segment_length: int = 512
    sample_rate_hz: float = 256.0
    # clean EEG: 1/f^exponent power spectrum on [lo, hi] Hz plus an alpha bump
    eeg_band_hz: Tuple[float, float] = (0.5, 80.0)
    eeg_exponent: float = 1.0
    alpha_peak_hz: Tuple[float, float] = (8.0, 12.0)
    alpha_gain: Tuple[float, float] = (1.0, 4.0)
    alpha_width_hz: float = 1.0
    # EOG: blink-like bumps plus drift, low-passed
    eog_cutoff_hz: float = 5.0
    eog_blinks: Tuple[int, int] = (1, 4)
    eog_blink_width_s: Tuple[float, float] = (0.1, 0.4)
    # EMG: band-passed noise with a smooth burst envelope
    emg_band_hz: Tuple[float, float] = (20.0, 128.0)
    emg_bursts: Tuple[int, int] = (1, 3)

    def freqs(self) -> np.ndarray:
        return np.fft.rfftfreq(self.segment_length, d=1.0 / self.sample_rate_hz)


def _unit_rms(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True))


def _band_limit(x: np.ndarray, f: np.ndarray, lo: float, hi: float) -> np.ndarray:
    X = np.fft.rfft(x, axis=-1)
    X[..., (f < lo) | (f > hi)] = 0
    return np.fft.irfft(X, n=x.shape[-1], axis=-1)


def _surrogate_clean(cfg: SurrogateConfig, rng) -> np.ndarray:
    f = cfg.freqs()
    n, T = cfg.n_clean, cfg.segment_length
    lo, hi = cfg.eeg_band_hz
    amp = np.zeros_like(f)
    inband = (f >= lo) & (f <= hi)
    amp[inband] = f[inband] ** (-cfg.eeg_exponent / 2.0)  # power ~ 1/f^exponent
    peak = rng.uniform(*cfg.alpha_peak_hz, size=(n, 1))
    gain = rng.uniform(*cfg.alpha_gain, size=(n, 1))
    bump = gain * np.exp(-0.5 * ((f[None, :] - peak) / cfg.alpha_width_hz) ** 2)
    spectrum = (amp[None, :] * (1.0 + bump)) * (
        rng.normal(size=(n, f.size)) + 1j * rng.normal(size=(n, f.size))
    )
    return _unit_rms(np.fft.irfft(spectrum, n=T, axis=-1))


def _surrogate_eog(cfg: SurrogateConfig, rng) -> np.ndarray:
    n, T, fs = cfg.n_eog, cfg.segment_length, cfg.sample_rate_hz
    t = np.arange(T) / fs
    out = np.empty((n, T))
    for i in range(n):
        sig = np.zeros(T)
        for _ in range(rng.integers(cfg.eog_blinks[0], cfg.eog_blinks[1] + 1)):
            center = rng.uniform(0, t[-1])
            width = rng.uniform(*cfg.eog_blink_width_s)
            sig += rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.5) * np.exp(-0.5 * ((t - center) / width) ** 2)
        drift_f = rng.uniform(0.1, 1.0)
        sig += 0.3 * np.sin(2 * np.pi * drift_f * t + rng.uniform(0, 2 * np.pi))
        out[i] = sig
    out = _band_limit(out, cfg.freqs(), 0.0, cfg.eog_cutoff_hz)
    return _unit_rms(out)


def _surrogate_emg(cfg: SurrogateConfig, rng) -> np.ndarray:
    n, T, fs = cfg.n_emg, cfg.segment_length, cfg.sample_rate_hz
    t = np.arange(T) / fs
    f = cfg.freqs()
    noise = _band_limit(rng.normal(size=(n, T)), f, *cfg.emg_band_hz)
    env = np.full((n, T), 0.2)
    for i in range(n):
        for _ in range(rng.integers(cfg.emg_bursts[0], cfg.emg_bursts[1] + 1)):
            center = rng.uniform(0, t[-1])
            width = rng.uniform(0.1, 0.5)
            env[i] += np.exp(-0.5 * ((t - center) / width) ** 2)
    out = _band_limit(noise * env, f, *cfg.emg_band_hz)
    return _unit_rms(out)


def synth_surrogate(cfg: SurrogateConfig) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(clean, eog, emg) arrays of shape (count, T), each row unit RMS."""
    root = np.random.SeedSequence(cfg.seed)
    s_clean, s_eog, s_emg = root.spawn(3)
    return (
        _surrogate_clean(cfg, np.random.default_rng(s_clean)),
        _surrogate_eog(cfg, np.random.default_rng(s_eog)),
        _surrogate_emg(cfg, np.random.default_rng(s_emg)),
    )


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


@dataclass
class DatasetSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def sizes(self) -> Tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)

    def indices(self, name: str) -> np.ndarray:
        if name == "all":
            return np.sort(np.concatenate([self.train, self.val, self.test]))
        return getattr(self, name)


def split(n_or_pairs, ratio=(8, 1, 1), seed: int = 0) -> DatasetSplit:
    """Seeded shuffle then partition; val/test get round(n * r / sum), train the rest."""
    n = n_or_pairs if isinstance(n_or_pairs, (int, np.integer)) else len(n_or_pairs)
    if n < 10:
        raise DataError(f"need at least 10 samples to split, got {n}")
    total = float(sum(ratio))
    n_val = int(round(n * ratio[1] / total))
    n_test = int(round(n * ratio[2] / total))
    perm = np.random.default_rng(seed).permutation(n)
    n_train = n - n_val - n_test
    return DatasetSplit(
        train=perm[:n_train], val=perm[n_train : n_train + n_val], test=perm[n_train + n_val :]
    )


def pairs_to_arrays(pairs: Sequence[SignalPair]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(noisy, clean, snr_db) stacked as (n, T), (n, T), (n,)."""
    if not pairs:
        raise DataError("empty dataset")
    noisy = np.stack([p.noisy for p in pairs])
    clean = np.stack([p.clean for p in pairs])
    snr = np.array([p.snr_db for p in pairs], dtype=np.float64)
    return noisy, clean, snr


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIIIB")


def write_dataset(pairs: Sequence[SignalPair], path) -> None:
    """EDS1 file: header then (snr_db, clean[T], noisy[T]) float32 records."""
    pairs = list(pairs)
    if not pairs:
        raise DataError("refusing to write an empty dataset")
    T = pairs[0].clean.size
    kinds = {p.artifact_kind for p in pairs}
    if len(kinds) != 1:
        raise DataError(f"a dataset file holds one artifact kind, got {sorted(k.name for k in kinds)}")
    kind = kinds.pop()
    rec = np.empty((len(pairs), 1 + 2 * T), dtype="<f4")
    for i, p in enumerate(pairs):
        if p.clean.size != T:
            raise DataError(f"pair {i} has length {p.clean.size}, expected {T}")
        rec[i, 0] = p.snr_db
        rec[i, 1 : 1 + T] = p.clean
        rec[i, 1 + T :] = p.noisy
    header = _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(pairs), T, int(kind))
    with atomic_write(path, "wb") as fh:
        fh.write(header)
        fh.write(rec.tobytes())


def read_dataset(path) -> List[SignalPair]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, n, T, kind = _HEADER.unpack_from(blob)
    if magic != DATASET_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}, expected {DATASET_MAGIC!r}")
    if version != DATASET_VERSION:
        raise DataError(f"{path}: unsupported dataset version {version}")
    try:
        kind = ArtifactKind(kind)
    except ValueError:
        raise DataError(f"{path}: unknown artifact kind code {kind}") from None
    body = blob[_HEADER.size :]
    rec_bytes = 4 * (1 + 2 * T)
    if T < 2 or len(body) != n * rec_bytes:
        raise DataError(
            f"{path}: body holds {len(body)} bytes, header promises {n} records of length T={T}"
        )
    rec = np.frombuffer(body, dtype="<f4").reshape(n, 1 + 2 * T)
    return [
        SignalPair(r[1 : 1 + T].astype(np.float64), r[1 + T :].astype(np.float64), float(r[0]), kind)
        for r in rec
    ]


def read_f32_matrix(path, T: int) -> np.ndarray:
    """Flat little-endian float32 file reshaped to (rows, T), e.g. benchmark arrays."""
    raw = np.fromfile(path, dtype="<f4")
    if raw.size == 0 or raw.size % T:
        raise DataError(f"{path}: {raw.size} values do not form rows of length {T}")
    return raw.reshape(-1, T).astype(np.float64)
