"""Denoising quality metrics and their per-SNR aggregation."""
from __future__ import annotations

import csv
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .exceptions import DataError, InfiniteSNRError
from .spectral import psd

__all__ = [
    "rms",
    "mean_power",
    "rrmse_t",
    "rrmse_s",
    "cc",
    "snr_imp",
    "SampleMetrics",
    "MetricReport",
    "aggregate",
    "score_sample",
    "CSV_COLUMNS",
]

METRIC_NAMES = ("rrmse_t", "rrmse_s", "cc", "snr_imp")
CSV_COLUMNS = ("sample_id", "snr_db", "rrmse_t", "rrmse_s", "cc", "snr_imp")


def _vec(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64).ravel()


def rms(g) -> float:
    g = _vec(g)
    if g.size == 0:
        raise DataError("RMS of an empty signal")
    return float(np.sqrt(np.mean(g * g)))


def mean_power(g) -> float:
    g = _vec(g)
    return float(np.mean(g * g))


def _check_pair(yhat, y):
    yhat, y = _vec(yhat), _vec(y)
    if yhat.shape != y.shape:
        raise DataError(f"length mismatch: {yhat.size} vs {y.size}")
    return yhat, y


def rrmse_t(yhat, y) -> float:
    """RMS(yhat - y) / RMS(y)."""
    yhat, y = _check_pair(yhat, y)
    ref = rms(y)
    if ref == 0:
        raise DataError("RRMSE_t undefined: reference signal has zero RMS")
    return rms(yhat - y) / ref


def rrmse_s(yhat, y, fs: float = 256.0, nperseg: Optional[int] = None) -> float:
    """RMS(PSD(yhat) - PSD(y)) / RMS(PSD(y)) with Welch PSDs.

    ``nperseg`` defaults to min(256, len(y)).
    """
    yhat, y = _check_pair(yhat, y)
    nperseg = min(256, y.size) if nperseg is None else nperseg
    s_hat = psd(yhat, fs=fs, nperseg=nperseg).density
    s_ref = psd(y, fs=fs, nperseg=nperseg).density
    ref = rms(s_ref)
    if ref == 0:
        raise DataError("RRMSE_s undefined: reference PSD is identically zero")
    return rms(s_hat - s_ref) / ref


def cc(yhat, y) -> float:
    """Pearson correlation coefficient."""
    yhat, y = _check_pair(yhat, y)
    a = y - y.mean()
    b = yhat - yhat.mean()
    den = math.sqrt(float(a @ a)) * math.sqrt(float(b @ b))
    if den == 0:
        raise DataError("CC undefined for a constant signal")
    return float(np.clip((a @ b) / den, -1.0, 1.0))


def snr_imp(x, y, yhat) -> float:
    """Output SNR minus input SNR (dB), both from mean residual power.

    ``x`` clean reference, ``y`` noisy input, ``yhat`` denoised output.
    """
    x, y, yhat = _vec(x), _vec(y), _vec(yhat)
    if not (x.size == y.size == yhat.size):
        raise DataError("snr_imp: signals differ in length")
    p_in = mean_power(y - x)
    p_out = mean_power(yhat - x)
    if p_in == 0:
        raise InfiniteSNRError("input residual has zero power (noisy == clean)")
    if p_out == 0:
        raise InfiniteSNRError("output residual has zero power (denoised == clean)")
    return 10.0 * math.log10(p_in / p_out)


@dataclass
class SampleMetrics:
    sample_id: int
    snr_db: float
    rrmse_t: float
    rrmse_s: float
    cc: float
    snr_imp: float
    flagged: bool = False


def score_sample(sample_id, snr_db, clean, noisy, denoised, fs: float = 256.0) -> SampleMetrics:
    """All four metrics for one segment; an infinite SNR gain is flagged, not raised."""
    flagged = False
    try:
        gain = snr_imp(clean, noisy, denoised)
    except InfiniteSNRError:
        gain, flagged = math.inf, True
    return SampleMetrics(
        sample_id=int(sample_id),
        snr_db=float(snr_db),
        rrmse_t=rrmse_t(denoised, clean),
        rrmse_s=rrmse_s(denoised, clean, fs=fs),
        cc=cc(denoised, clean),
        snr_imp=gain,
        flagged=flagged,
    )


def _means(samples: Sequence[SampleMetrics]) -> Dict[str, float]:
    out = {}
    for name in METRIC_NAMES:
        vals = [getattr(s, name) for s in samples if not (s.flagged and name == "snr_imp")]
        out[name] = float(np.mean(vals)) if vals else math.nan
    return out


@dataclass
class MetricReport:
    samples: List[SampleMetrics]
    per_level: "OrderedDict[float, Dict[str, float]]" = field(default_factory=OrderedDict)
    overall: Dict[str, float] = field(default_factory=dict)
    n_flagged: int = 0

    def rows(self) -> List[dict]:
        rows = [
            {c: getattr(s, c) for c in CSV_COLUMNS} for s in self.samples
        ]
        for level, means in self.per_level.items():
            rows.append({"sample_id": "level_mean", "snr_db": level, **means})
        rows.append({"sample_id": "overall_mean", "snr_db": "", **self.overall})
        return rows

    def write_csv(self, fh) -> None:
        writer = csv.DictWriter(fh, fieldnames=list(CSV_COLUMNS), lineterminator="\n")
        writer.writeheader()
        for row in self.rows():
            writer.writerow(row)


def aggregate(samples: Sequence[SampleMetrics]) -> MetricReport:
    """Per-SNR-level means (levels sorted ascending) and overall means."""
    samples = list(samples)
    if not samples:
        raise DataError("cannot aggregate an empty set of samples")
    levels: "OrderedDict[float, List[SampleMetrics]]" = OrderedDict()
    for s in sorted(samples, key=lambda s: s.snr_db):
        levels.setdefault(s.snr_db, []).append(s)
    per_level = OrderedDict((lv, _means(group)) for lv, group in levels.items())
    return MetricReport(
        samples=samples,
        per_level=per_level,
        overall=_means(samples),
        n_flagged=sum(s.flagged for s in samples),
    )
