"""Morlet wavelet band energies (channels x bands) and band tokenization."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .signals import Trial

LOG_EPS = 1e-10
F_MIN, F_MAX = 0.5, 50.0


class WindowTooShortError(ValueError):
    pass


@dataclass(frozen=True)
class SpectralFeature:
    bands: np.ndarray  # N x D log band energies
    band_edges: np.ndarray  # D + 1, Hz

    def __post_init__(self):
        edges = np.asarray(self.band_edges, dtype=float)
        if edges.ndim != 1 or len(edges) != self.bands.shape[1] + 1:
            raise ValueError("need D + 1 band edges")
        if np.any(np.diff(edges) <= 0):
            raise ValueError("band edges must be strictly increasing")
        if not np.all(np.isfinite(self.bands)):
            raise ValueError("band energies must be finite")

    @property
    def n_channels(self) -> int:
        return self.bands.shape[0]

    @property
    def n_bands(self) -> int:
        return self.bands.shape[1]

    def band_of(self, freq: float) -> int:
        """Index of the band containing ``freq`` (bands are half-open except the last)."""
        if not self.band_edges[0] <= freq <= self.band_edges[-1]:
            raise ValueError(f"{freq} Hz outside the analysis range")
        return int(min(np.searchsorted(self.band_edges, freq, side="right") - 1, self.n_bands - 1))


@dataclass(frozen=True)
class BandTokenSequence:
    tokens: np.ndarray  # D x N, token b is band b's channel vector
    band_index: np.ndarray

    def __len__(self) -> int:
        return self.tokens.shape[0]


def band_edges(n_bands: int, f_min: float = F_MIN, f_max: float = F_MAX) -> np.ndarray:
    return np.geomspace(f_min, f_max, n_bands + 1)


def analysis_frequencies(edges: np.ndarray, per_band: int = 3) -> np.ndarray:
    """``per_band`` log-spaced wavelet centres strictly inside each band, shape D x per_band."""
    lo, hi = np.log(edges[:-1]), np.log(edges[1:])
    frac = (np.arange(per_band) + 0.5) / per_band
    return np.exp(lo[:, None] + (hi - lo)[:, None] * frac[None, :])


def wavelet_cycles(freqs: np.ndarray, n_samples: int, sample_rate: float, cycles: float) -> np.ndarray:
    """Cycles per wavelet, reduced where ``cycles`` would not fit the window.

    The wavelet support is taken as +-3 temporal standard deviations,
    sigma_t = n_cycles / (2 pi f); the support must fit the window.
    """
    duration = n_samples / sample_rate
    fit = np.pi * freqs * duration / 3.0
    return np.minimum(cycles, fit)


def required_samples(f_lowest: float, sample_rate: float, min_cycles: float = 1.0) -> int:
    return int(np.ceil(3.0 * min_cycles / (np.pi * f_lowest) * sample_rate))


def morlet_power(
    x: np.ndarray,
    sample_rate: float,
    freqs: np.ndarray,
    n_cycles: np.ndarray,
) -> np.ndarray:
    """Time-resolved |CWT|^2, shape (channels, n_freqs, T).

    Analytic Morlet wavelets built in the frequency domain; each is normalised
    to unit energy so white noise gives the same expected power at every
    frequency.  Input is mirror-padded by its own length on both sides.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    padded = np.concatenate([x[:, ::-1], x, x[:, ::-1]], axis=1) if n > 1 else np.repeat(x, 3, axis=1)
    m = padded.shape[1]
    nu = np.fft.fftfreq(m, d=1.0 / sample_rate)
    sigma_f = freqs / n_cycles
    psi = np.exp(-0.5 * ((nu[None, :] - freqs[:, None]) / sigma_f[:, None]) ** 2)
    psi[:, nu < 0] = 0.0
    psi /= np.sqrt(np.sum(psi**2, axis=1, keepdims=True) / m)
    spec = np.fft.fft(padded, axis=1)
    coef = np.fft.ifft(spec[:, None, :] * psi[None, :, :], axis=2)[:, :, n : 2 * n]
    return np.abs(coef) ** 2


def wavelet_spectrogram_array(
    x: np.ndarray,
    sample_rate: float,
    n_bands: int = 16,
    cycles: float = 7.0,
    per_band: int = 3,
    min_cycles: float = 1.0,
) -> SpectralFeature:
    edges = band_edges(n_bands)
    freqs = analysis_frequencies(edges, per_band)
    n = np.asarray(x).shape[-1]
    need = required_samples(float(freqs.min()), sample_rate, min_cycles)
    if n < need:
        raise WindowTooShortError(
            f"window of {n} samples is too short for the lowest band; need at least {need} samples "
            f"({need / sample_rate:.3f} s at {sample_rate} Hz)"
        )
    flat = freqs.ravel()
    power = morlet_power(x, sample_rate, flat, wavelet_cycles(flat, n, sample_rate, cycles))
    per_freq = power.mean(axis=2).reshape(power.shape[0], n_bands, per_band)
    return SpectralFeature(np.log(per_freq.mean(axis=2) + LOG_EPS), edges)


def wavelet_spectrogram(
    trial: Trial,
    sample_rate: float,
    n_bands: int = 16,
    cycles: float = 7.0,
    **kw,
) -> SpectralFeature:
    return wavelet_spectrogram_array(trial.window, sample_rate, n_bands, cycles, **kw)


def tokenize(feature: SpectralFeature) -> BandTokenSequence:
    return BandTokenSequence(feature.bands.T.copy(), np.arange(feature.n_bands))


def write_feature_csv(feature: SpectralFeature, path) -> None:
    """One row per channel; the header carries the band edges."""
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["channel"] + [f"{lo:.4f}-{hi:.4f}" for lo, hi in zip(feature.band_edges[:-1], feature.band_edges[1:])])
        for i, row in enumerate(feature.bands):
            w.writerow([i] + [repr(float(v)) for v in row])


def extract_features(trials, sample_rate: float, n_bands: int = 16, cycles: float = 7.0) -> np.ndarray:
    """Stack band energies of many trials, shape (n_trials, N, D)."""
    return np.stack([wavelet_spectrogram(t, sample_rate, n_bands, cycles).bands for t in trials])
