"""Cleaning chain: band-pass, line-noise removal, average reference, ICA artifact rejection.

Each stage takes and returns a ``Recording``; the ``*_array`` variants work on
plain channels x time matrices.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import signal as sps

from .signals import Recording

log = logging.getLogger(__name__)


class FilterConfigError(ValueError):
    pass


class RankDeficientError(ValueError):
    pass


@dataclass(frozen=True)
class FilterSpec:
    low_cut: float = 0.5
    high_cut: float = 50.0
    order: int = 4
    design: str = "butterworth"

    def validate(self, sample_rate: float) -> None:
        nyq = sample_rate / 2.0
        if self.design != "butterworth":
            raise FilterConfigError(f"unsupported filter design {self.design!r}")
        if not 0 < self.low_cut < self.high_cut:
            raise FilterConfigError(f"need 0 < low_cut < high_cut, got {self.low_cut}, {self.high_cut}")
        if self.high_cut >= nyq:
            raise FilterConfigError(f"high_cut {self.high_cut} Hz is at or above Nyquist ({nyq} Hz)")
        if self.order < 1:
            raise FilterConfigError("order must be >= 1")


def bandpass_sos(spec: FilterSpec, sample_rate: float) -> np.ndarray:
    spec.validate(sample_rate)
    return sps.butter(spec.order, [spec.low_cut, spec.high_cut], btype="bandpass", fs=sample_rate, output="sos")


def bandpass_array(x: np.ndarray, sample_rate: float, spec: FilterSpec = FilterSpec()) -> np.ndarray:
    """Zero-phase Butterworth band-pass (forward-backward) with reflect padding."""
    sos = bandpass_sos(spec, sample_rate)
    x = np.asarray(x, dtype=np.float64)
    padlen = min(x.shape[-1] - 1, 3 * int(sample_rate / spec.low_cut))
    return sps.sosfiltfilt(sos, x, axis=-1, padtype="even", padlen=max(padlen, 0))


def bandpass(recording: Recording, spec: FilterSpec = FilterSpec()) -> Recording:
    return recording.with_samples(bandpass_array(recording.samples, recording.meta.sample_rate, spec))


def remove_line_noise_array(
    x: np.ndarray,
    sample_rate: float,
    line_freq: float = 50.0,
    window_sec: float = 4.0,
) -> np.ndarray:
    """Subtract a least-squares sinusoid at ``line_freq`` fitted in sliding windows.

    Windows overlap by half; per-window fits are blended with Hann weights so
    slow drifts in line amplitude/phase are followed.
    """
    if not 0 < line_freq < sample_rate / 2:
        raise FilterConfigError(f"line_freq {line_freq} must lie in (0, Nyquist)")
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    t = np.arange(n) / sample_rate
    basis = np.stack([np.cos(2 * np.pi * line_freq * t), np.sin(2 * np.pi * line_freq * t)])
    win = min(n, max(int(round(window_sec * sample_rate)), 4))
    hop = max(win // 2, 1)
    starts = list(range(0, max(n - win, 0) + 1, hop))
    if starts[-1] + win < n:
        starts.append(n - win)
    taper = np.hanning(win + 2)[1:-1]
    fit = np.zeros_like(x)
    weight = np.zeros(n)
    for s in starts:
        b = basis[:, s : s + win]
        seg = x[..., s : s + win]
        coef = np.linalg.solve(b @ b.T, b @ seg.T)  # 2 x channels
        fit[..., s : s + win] += taper * (coef.T @ b)
        weight[s : s + win] += taper
    return x - fit / weight


def remove_line_noise(recording: Recording, line_freq: float = 50.0) -> Recording:
    return recording.with_samples(remove_line_noise_array(recording.samples, recording.meta.sample_rate, line_freq))


def average_rereference_array(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("average re-reference needs at least two channels")
    return x - x.mean(axis=0, keepdims=True)


def average_rereference(recording: Recording) -> Recording:
    return recording.with_samples(average_rereference_array(recording.samples))


# ---------------------------------------------------------------------------
# ICA
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class IcaModel:
    unmixing: np.ndarray  # components x channels, applied to centred data
    mixing: np.ndarray  # channels x components
    mean: np.ndarray  # per-channel mean removed before unmixing
    component_scores: np.ndarray = field(default=None)
    n_iter: int = 0
    converged: bool = True

    @property
    def n_components(self) -> int:
        return self.unmixing.shape[0]

    def sources(self, x: np.ndarray) -> np.ndarray:
        return self.unmixing @ (x - self.mean[:, None])

    def with_scores(self, scores) -> IcaModel:
        scores = np.asarray(scores, dtype=float)
        if scores.shape != (self.n_components,) or not np.all((scores >= 0) & (scores <= 1)):
            raise ValueError("scores must be one probability per component")
        return replace(self, component_scores=scores)


def _sym_decorrelate(w: np.ndarray) -> np.ndarray:
    s, u = np.linalg.eigh(w @ w.T)
    s = np.clip(s, np.finfo(float).tiny, None)
    return (u * (1.0 / np.sqrt(s))) @ u.T @ w


def fit_ica_array(
    x: np.ndarray,
    n_components: int,
    seed: int = 0,
    max_iter: int = 500,
    tol: float = 1e-6,
    rank_tol: float = 1e-9,
    max_samples: int | None = None,
) -> IcaModel:
    """FastICA (tanh contrast, symmetric decorrelation) on PCA-whitened data.

    ``max_samples`` fits on an evenly strided subset of time points.
    """
    x = np.asarray(x, dtype=np.float64)
    if max_samples and x.shape[1] > max_samples:
        x = x[:, :: int(np.ceil(x.shape[1] / max_samples))]
    n_ch, n = x.shape
    if not 1 <= n_components <= n_ch:
        raise ValueError(f"n_components must be in [1, {n_ch}]")
    mean = x.mean(axis=1)
    xc = x - mean[:, None]
    cov = xc @ xc.T / n
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    floor = rank_tol * max(evals[0], np.finfo(float).tiny)
    rank = int(np.sum(evals > floor))
    if rank < n_components:
        raise RankDeficientError(
            f"covariance has rank {rank} < n_components {n_components}; "
            f"dimension {rank} (0-based, eigenvalue {evals[rank]:.3e}) is deficient"
        )
    evals, evecs = evals[:n_components], evecs[:, :n_components]
    whitening = (evecs / np.sqrt(evals)).T  # k x channels
    z = whitening @ xc

    rng = np.random.default_rng(seed)
    w = _sym_decorrelate(rng.standard_normal((n_components, n_components)))
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        y = w @ z
        g = np.tanh(y)
        g_prime = 1.0 - g * g
        w_new = _sym_decorrelate(g @ z.T / n - g_prime.mean(axis=1)[:, None] * w)
        change = np.max(np.abs(np.abs(np.einsum("ij,ij->i", w_new, w)) - 1.0))
        w = w_new
        if change < tol:
            converged = True
            break
    if not converged:
        log.info("FastICA stopped at max_iter=%d without converging", max_iter)
    unmixing = w @ whitening
    mixing = np.linalg.pinv(unmixing)
    return IcaModel(unmixing, mixing, mean, np.zeros(n_components), it, converged)


def fit_ica(recording: Recording, n_components: int, seed: int = 0, **kw) -> IcaModel:
    return fit_ica_array(recording.samples, n_components, seed, **kw)


def _excess_kurtosis(s: np.ndarray) -> np.ndarray:
    sc = s - s.mean(axis=1, keepdims=True)
    var = np.mean(sc**2, axis=1)
    return np.mean(sc**4, axis=1) / np.maximum(var**2, 1e-300) - 3.0


def artifact_scores(
    model: IcaModel,
    x: np.ndarray,
    sample_rate: float,
    eog_channels: tuple[int, ...] = (0, 1),
    low_freq: float = 3.0,
) -> np.ndarray:
    """Probability-like artifact score per component, in [0, 1].

    Composite of excess kurtosis, fraction of power below ``low_freq`` and the
    absolute correlation with a low-passed frontal (EOG proxy) channel mean,
    squashed by a logistic.
    """
    s = model.sources(np.asarray(x, dtype=np.float64))
    kurt = _excess_kurtosis(s)
    f, p = sps.periodogram(s, fs=sample_rate, axis=1)
    band = f > 0
    low = np.sum(p[:, band & (f < low_freq)], axis=1) / np.maximum(np.sum(p[:, band], axis=1), 1e-300)
    proxy = np.asarray(x, dtype=np.float64)[list(eog_channels)].mean(axis=0)
    b, a = sps.butter(2, low_freq, btype="lowpass", fs=sample_rate)
    proxy = sps.filtfilt(b, a, proxy)
    sc = s - s.mean(axis=1, keepdims=True)
    pc = proxy - proxy.mean()
    denom = np.sqrt(np.sum(sc**2, axis=1) * np.sum(pc**2)) + 1e-300
    corr = np.abs(sc @ pc) / denom
    logit = 4.0 * (low - 0.5) + 0.5 * np.clip(kurt, -3.0, 10.0) + 4.0 * (corr - 0.5)
    return 1.0 / (1.0 + np.exp(-logit))


def reject_artifacts_array(x: np.ndarray, model: IcaModel, threshold: float = 0.9) -> np.ndarray:
    """Remove the contribution of components scoring above ``threshold``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != model.mixing.shape[0]:
        raise ValueError(f"model fitted on {model.mixing.shape[0]} channels, data has {x.shape[0]}")
    reject = np.asarray(model.component_scores) > threshold
    if not reject.any():
        return x.copy()
    # uncentred projection so the channel mean is shared out among components too
    return x - model.mixing[:, reject] @ (model.unmixing[reject] @ x)


def reject_artifacts(recording: Recording, model: IcaModel, threshold: float = 0.9) -> Recording:
    return recording.with_samples(reject_artifacts_array(recording.samples, model, threshold))


@dataclass(frozen=True)
class PreprocessConfig:
    filter: FilterSpec = FilterSpec()
    line_freq: float = 50.0
    ica: bool = True
    ica_components: int | None = None  # default n_channels - 1 (average reference removes one rank)
    artifact_threshold: float = 0.9
    eog_channels: tuple[int, ...] = (0, 1)
    ica_max_iter: int = 200
    ica_max_samples: int = 10000
    seed: int = 0


def run_chain(recording: Recording, cfg: PreprocessConfig = PreprocessConfig(), stages: dict | None = None):
    """Full cleaning chain; returns (recording, ica_model or None).

    When ``stages`` is a dict it receives each intermediate recording by name.
    """
    fs = recording.meta.sample_rate
    out = bandpass(recording, cfg.filter)
    if stages is not None:
        stages["bandpass"] = out
    out = remove_line_noise(out, cfg.line_freq)
    if stages is not None:
        stages["line_noise"] = out
    out = average_rereference(out)
    if stages is not None:
        stages["rereference"] = out
    model = None
    if cfg.ica:
        k = cfg.ica_components or recording.meta.n_channels - 1
        model = fit_ica(out, k, seed=cfg.seed, max_iter=cfg.ica_max_iter, max_samples=cfg.ica_max_samples)
        model = model.with_scores(artifact_scores(model, out.samples, fs, cfg.eog_channels))
        out = reject_artifacts(out, model, cfg.artifact_threshold)
        if stages is not None:
            stages["ica"] = out
    return out, model
