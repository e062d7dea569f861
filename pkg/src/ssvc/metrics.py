"""Objective conversion metrics and the discriminator-loss stability statistic."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

MCD_CONST = 10.0 / np.log(10.0)
MSD_EPS = 1e-8


@dataclass(frozen=True)
class MetricReport:
    mcd_db: float
    msd_db: float
    n_frames_compared: int


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ValueError(f"expected (n_mcep, n_frames) arrays, got {a.ndim}-D")
    return a, b


def mcd(a, b) -> float:
    """Mel-cepstral distortion in dB, averaged over frames, all coefficients included."""
    a, b = _pair(a, b)
    diff = a - b
    return float(np.mean(MCD_CONST * np.sqrt(2.0 * np.sum(diff * diff, axis=0))))


def mcd_batch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-utterance MCD for stacked (n, n_mcep, n_frames) arrays (``b`` may broadcast)."""
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return np.mean(MCD_CONST * np.sqrt(2.0 * np.sum(diff * diff, axis=-2)), axis=-1)


def modulation_spectrum(x) -> np.ndarray:
    """Magnitude spectrum of each mean-removed cepstral trajectory, DC bin dropped."""
    x = np.asarray(x, dtype=np.float64)
    centred = x - x.mean(axis=-1, keepdims=True)
    return np.abs(np.fft.rfft(centred, axis=-1))[..., 1:]


def msd(a, b) -> float:
    """Modulation spectra distance in dB (mean absolute log-magnitude difference)."""
    a, b = _pair(a, b)
    if a.shape[1] < 4:
        raise ValueError("modulation spectra distance needs at least 4 frames")
    ma, mb = modulation_spectrum(a), modulation_spectrum(b)
    return float(np.mean(np.abs(20.0 * np.log10((ma + MSD_EPS) / (mb + MSD_EPS)))))


def evaluate(a, b) -> MetricReport:
    a, b = _pair(a, b)
    return MetricReport(mcd(a, b), msd(a, b), a.shape[1])


def loss_stability(trace: Sequence[float], window: int) -> float:
    """Population standard deviation of the trailing ``window`` entries."""
    trace = np.asarray(trace, dtype=np.float64)
    if window < 1 or window > len(trace):
        raise ValueError(f"window {window} must lie in 1..{len(trace)}")
    return float(np.std(trace[-window:]))


REPORT_HEADER = ("pair_id", "source", "target", "mcd_db", "msd_db")


def report_csv(rows: Iterable[tuple[int, int, int, float, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for pair_id, src, trg, m, s in rows:
        w.writerow([pair_id, src, trg, repr(float(m)), repr(float(s))])
    return buf.getvalue()
