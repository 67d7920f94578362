"""Recordings, trials, synthetic session generation and the binary recording format."""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

BASELINE = "baseline"
CUE = "cue"
REST = "rest"
PROTOCOL_LABELS = (BASELINE, CUE, REST)

# Five motion words are named for the 6-class common set; the sixth is a placeholder.
COMMON_SIX = ("running", "jumping", "dancing", "battle", "cowboy", "idle")
FULL_24 = COMMON_SIX + (
    "walking", "waving", "kicking", "punching", "squatting", "turning",
    "sitting", "standing", "boxing", "swimming", "clapping", "bowing",
    "stretching", "skipping", "crawling", "climbing", "throwing", "lifting",
)


class SizingError(ValueError):
    """Requested trials do not fit the recording or the epoch window."""


class RecordingFormatError(ValueError):
    """Base class for recording file problems."""


class MalformedHeaderError(RecordingFormatError):
    pass


class ChannelCountError(RecordingFormatError):
    pass


class TruncatedPayloadError(RecordingFormatError):
    pass


@dataclass(frozen=True)
class RecordingMeta:
    subject_id: str = "S01"
    n_channels: int = 16
    sample_rate: float = 250.0
    vocabulary: tuple[str, ...] = COMMON_SIX
    block_id: int = 0
    session_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "vocabulary", tuple(self.vocabulary))
        if self.n_channels < 2:
            raise ValueError("n_channels must be >= 2")
        # analysis range tops out at 50 Hz; keep Nyquist strictly above 2x that
        if self.sample_rate <= 100.0:
            raise ValueError(f"sample_rate {self.sample_rate} Hz must exceed 100 Hz")
        if not self.vocabulary:
            raise ValueError("vocabulary must be non-empty")
        if len(set(self.vocabulary)) != len(self.vocabulary):
            raise ValueError("vocabulary entries must be unique")

    @classmethod
    def desk(cls, **kw) -> RecordingMeta:
        return cls(**{"n_channels": 16, "sample_rate": 250.0, **kw})

    @classmethod
    def paper_scale(cls, **kw) -> RecordingMeta:
        return cls(**{"n_channels": 128, "sample_rate": 1000.0, "vocabulary": FULL_24, **kw})


@dataclass(eq=False)
class Recording:
    meta: RecordingMeta
    samples: np.ndarray  # channels x time, microvolts
    markers: list[tuple[int, str]] = field(default_factory=list)

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 2 or self.samples.shape[0] != self.meta.n_channels:
            raise ValueError(
                f"samples shape {self.samples.shape} does not match {self.meta.n_channels} channels"
            )
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples must be finite")
        self.markers = [(int(i), str(lab)) for i, lab in self.markers]
        idx = [i for i, _ in self.markers]
        if idx != sorted(idx):
            raise ValueError("markers must be sorted by sample index")
        allowed = set(self.meta.vocabulary) | set(PROTOCOL_LABELS)
        bad = [lab for _, lab in self.markers if lab not in allowed]
        if bad:
            raise ValueError(f"unknown marker labels: {sorted(set(bad))}")

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    def action_markers(self) -> list[tuple[int, str]]:
        vocab = set(self.meta.vocabulary)
        return [(i, lab) for i, lab in self.markers if lab in vocab]

    def with_samples(self, samples: np.ndarray) -> Recording:
        return Recording(self.meta, samples, list(self.markers))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Recording):
            return NotImplemented
        return (
            self.meta == other.meta
            and self.samples.dtype == other.samples.dtype
            and np.array_equal(self.samples, other.samples)
            and self.markers == other.markers
        )


@dataclass(eq=False)
class Trial:
    label: int
    window: np.ndarray  # channels x T
    cue_offset: float = 0.0
    session_id: int = 0
    subject_id: str = "S01"


@dataclass(frozen=True)
class SignatureComponent:
    center_freq: float
    weights: tuple[float, ...]
    amplitude: float = 1.0


@dataclass(frozen=True)
class SignatureSpec:
    """Narrowband spatial signatures per keyword, superposed on background noise."""

    signatures: dict[str, tuple[SignatureComponent, ...]]
    noise_floor: float = 1.0
    snr: float = 3.0
    white_ratio: float = 0.5
    line_amplitude: float = 2.0

    def __post_init__(self):
        for kw, comps in self.signatures.items():
            for c in comps:
                if not 0.5 < c.center_freq < 50.0:
                    raise ValueError(f"{kw}: center frequency {c.center_freq} outside (0.5, 50) Hz")
                if abs(np.linalg.norm(c.weights) - 1.0) > 1e-6:
                    raise ValueError(f"{kw}: channel weights must be unit norm")

    def with_snr(self, snr: float) -> SignatureSpec:
        return dataclasses.replace(self, snr=float(snr))

    @classmethod
    def default(
        cls,
        vocabulary: Sequence[str],
        n_channels: int,
        seed: int = 0,
        snr: float = 3.0,
        f_lo: float = 4.0,
        f_hi: float = 40.0,
    ) -> SignatureSpec:
        """Two components per keyword: a primary at log-spaced frequencies, a weaker random secondary."""
        rng = np.random.default_rng(seed)
        n = len(vocabulary)
        primaries = np.geomspace(f_lo, f_hi, n) if n > 1 else np.array([np.sqrt(f_lo * f_hi)])
        sigs = {}
        for kw, f0 in zip(vocabulary, rng.permutation(primaries)):
            comps = []
            for freq, amp in ((f0, 1.0), (rng.uniform(f_lo, f_hi), 0.5)):
                w = rng.standard_normal(n_channels)
                w[rng.permutation(n_channels)[: n_channels // 2]] *= 0.25
                w /= np.linalg.norm(w)
                comps.append(SignatureComponent(round(float(freq), 4), tuple(float(x) for x in w), amp))
            sigs[kw] = tuple(comps)
        return cls(sigs, snr=snr)


@dataclass(frozen=True)
class SessionTiming:
    baseline_sec: float = 10.0
    fixation_sec: float = 1.5
    action_sec: float = 2.0
    rest_sec: float = 0.5

    @property
    def trial_sec(self) -> float:
        return self.fixation_sec + self.action_sec + self.rest_sec


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------
def pink_noise(rng: np.random.Generator, n_channels: int, n_samples: int) -> np.ndarray:
    """Unit-variance 1/f noise, shaped in the frequency domain."""
    white = rng.standard_normal((n_channels, n_samples))
    spec = np.fft.rfft(white, axis=1)
    f = np.arange(spec.shape[1], dtype=float)
    scale = np.zeros_like(f)
    scale[1:] = 1.0 / np.sqrt(f[1:])
    x = np.fft.irfft(spec * scale, n=n_samples, axis=1)
    std = x.std(axis=1, keepdims=True)
    return x / np.where(std > 0, std, 1.0)


def _session_labels(n_trials: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.resize(np.arange(n_classes), n_trials))


def generate_session(
    meta: RecordingMeta,
    sig: SignatureSpec,
    n_trials: int,
    seed: int,
    timing: SessionTiming = SessionTiming(),
    labels: Sequence[int] | None = None,
    max_duration_sec: float | None = None,
) -> Recording:
    """Baseline followed by ``n_trials`` fixation/action/rest segments.

    Each action segment carries its keyword's signature scaled by ``sig.snr``
    on top of pink + white noise and a line-frequency sinusoid.
    """
    if n_trials <= 0:
        raise ValueError("n_trials must be positive")
    missing = [kw for kw in meta.vocabulary if kw not in sig.signatures]
    if missing:
        raise ValueError(f"no signature for keywords {missing}")
    fs = meta.sample_rate
    total_sec = timing.baseline_sec + n_trials * timing.trial_sec
    if max_duration_sec is not None and total_sec > max_duration_sec:
        raise SizingError(
            f"{n_trials} trials need {total_sec:.2f} s but the recording is limited to {max_duration_sec:.2f} s"
        )
    rng = np.random.default_rng(np.random.SeedSequence(seed & (2**64 - 1)))
    if labels is None:
        labels = _session_labels(n_trials, len(meta.vocabulary), rng)
    labels = np.asarray(labels, dtype=int)
    if len(labels) != n_trials or labels.min() < 0 or labels.max() >= len(meta.vocabulary):
        raise ValueError("labels must be n_trials keyword indices")

    n_base = int(round(timing.baseline_sec * fs))
    n_fix = int(round(timing.fixation_sec * fs))
    n_act = int(round(timing.action_sec * fs))
    n_rest = int(round(timing.rest_sec * fs))
    n_trial = n_fix + n_act + n_rest
    n_total = n_base + n_trials * n_trial
    nch = meta.n_channels
    t = np.arange(n_total) / fs

    x = sig.noise_floor * pink_noise(rng, nch, n_total)
    x += sig.noise_floor * sig.white_ratio * rng.standard_normal((nch, n_total))
    line_amp = sig.line_amplitude * rng.uniform(0.5, 1.5, size=(nch, 1))
    line_phase = rng.uniform(0, 2 * np.pi, size=(nch, 1))
    x += line_amp * np.sin(2 * np.pi * 50.0 * t + line_phase)

    taper = np.ones(n_act)
    ramp = min(n_act // 10, int(0.1 * fs))
    if ramp > 0:
        taper[:ramp] = np.sin(np.linspace(0, np.pi / 2, ramp)) ** 2
        taper[-ramp:] = taper[:ramp][::-1]
    ta = np.arange(n_act) / fs

    markers: list[tuple[int, str]] = []
    if n_base > 0:
        markers.append((0, BASELINE))
    for i, lab in enumerate(labels):
        start = n_base + i * n_trial
        onset = start + n_fix
        kw = meta.vocabulary[lab]
        markers.append((start, CUE))
        markers.append((onset, kw))
        markers.append((onset + n_act, REST))
        gain = sig.snr * sig.noise_floor * rng.lognormal(0.0, 0.1)
        for comp in sig.signatures[kw]:
            w = np.asarray(comp.weights, dtype=float)
            if len(w) != nch:
                raise ValueError(f"{kw}: signature has {len(w)} weights for {nch} channels")
            phase = rng.uniform(0, 2 * np.pi)
            wave = np.sin(2 * np.pi * comp.center_freq * ta + phase) * taper
            x[:, onset : onset + n_act] += gain * comp.amplitude * np.sqrt(2.0) * w[:, None] * wave

    return Recording(meta, x.astype(np.float32), markers)


def generate_trial(
    meta: RecordingMeta,
    sig: SignatureSpec,
    label: int,
    seed: int,
    timing: SessionTiming = SessionTiming(baseline_sec=2.0),
) -> Recording:
    """A single-trial recording with a short lead-in, used for online attempts."""
    return generate_session(meta, sig, 1, seed, timing=timing, labels=[label])


def epoch(recording: Recording, window_sec: float) -> list[Trial]:
    """Cut one fixed-length window per action marker."""
    fs = recording.meta.sample_rate
    n = int(round(window_sec * fs))
    if n <= 0:
        raise ValueError("window_sec must be positive")
    actions = [(k, i, lab) for k, (i, lab) in enumerate(recording.markers) if lab in set(recording.meta.vocabulary)]
    for (k0, i0, _), (k1, i1, _) in zip(actions, actions[1:]):
        if i0 + n > i1:
            raise SizingError(f"epoch windows overlap: markers {k0} and {k1}")
    if actions and actions[-1][1] + n > recording.n_samples:
        raise SizingError(f"epoch window for marker {actions[-1][0]} runs past the end of the recording")
    vocab = {kw: j for j, kw in enumerate(recording.meta.vocabulary)}
    trials = []
    last_cue = None
    cue_at = {}
    for k, (i, lab) in enumerate(recording.markers):
        if lab == CUE:
            last_cue = i
        elif lab in vocab:
            cue_at[k] = last_cue
    for k, i, lab in actions:
        cue = cue_at[k]
        trials.append(
            Trial(
                label=vocab[lab],
                window=recording.samples[:, i : i + n].astype(np.float64),
                cue_offset=0.0 if cue is None else (i - cue) / fs,
                session_id=recording.meta.session_id,
                subject_id=recording.meta.subject_id,
            )
        )
    return trials


# ---------------------------------------------------------------------------
# binary recording format
# ---------------------------------------------------------------------------
MAGIC = b"NDRC"
VERSION = 1


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str, err=MalformedHeaderError) -> bytes:
        if self.pos + n > len(self.buf):
            raise err(f"file ends while reading {what}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str, err=MalformedHeaderError):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what, err))

    def string(self, what: str, err=MalformedHeaderError) -> str:
        (n,) = self.unpack("<H", what, err)
        try:
            return self.take(n, what, err).decode("utf-8")
        except UnicodeDecodeError as e:
            raise err(f"invalid utf-8 in {what}") from e


def save_recording(recording: Recording, path) -> None:
    """Little-endian header + float32 rows + marker table. Samples are stored as float32."""
    m = recording.meta
    out = bytearray(MAGIC)
    out += struct.pack("<H", VERSION)
    out += _pack_str(m.subject_id)
    out += struct.pack("<IdII", m.n_channels, m.sample_rate, m.block_id, m.session_id)
    out += struct.pack("<I", len(m.vocabulary))
    for kw in m.vocabulary:
        out += _pack_str(kw)
    data = np.ascontiguousarray(recording.samples, dtype="<f4")
    out += struct.pack("<IQ", data.shape[0], data.shape[1])
    out += data.tobytes()
    out += struct.pack("<I", len(recording.markers))
    for idx, lab in recording.markers:
        out += struct.pack("<Q", idx) + _pack_str(lab)
    Path(path).write_bytes(bytes(out))


def load_recording(path) -> Recording:
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != MAGIC:
        raise MalformedHeaderError("bad magic; not a recording file")
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise MalformedHeaderError(f"unsupported version {version}")
    subject = r.string("subject id")
    n_ch, fs, block, session = r.unpack("<IdII", "meta")
    (n_vocab,) = r.unpack("<I", "vocabulary size")
    vocab = tuple(r.string("vocabulary") for _ in range(n_vocab))
    try:
        meta = RecordingMeta(subject, n_ch, fs, vocab, block, session)
    except ValueError as e:
        raise MalformedHeaderError(f"invalid meta: {e}") from e
    rows, n_samples = r.unpack("<IQ", "payload header")
    if rows != n_ch:
        raise ChannelCountError(f"header declares {n_ch} channels but payload has {rows} rows")
    raw = r.take(rows * n_samples * 4, "samples", TruncatedPayloadError)
    samples = np.frombuffer(raw, dtype="<f4").reshape(rows, n_samples).astype(np.float32)
    (n_markers,) = r.unpack("<I", "marker count", TruncatedPayloadError)
    markers = []
    for _ in range(n_markers):
        (idx,) = r.unpack("<Q", "marker", TruncatedPayloadError)
        markers.append((idx, r.string("marker label", TruncatedPayloadError)))
    return Recording(meta, samples, markers)


# ---------------------------------------------------------------------------
# signature config (TOML key-value)
# ---------------------------------------------------------------------------
def dump_signature_config(sig: SignatureSpec, vocabulary: Sequence[str], path) -> None:
    def arr(xs):
        return "[" + ", ".join(repr(float(x)) for x in xs) + "]"

    lines = [
        "vocabulary = [" + ", ".join(f'"{kw}"' for kw in vocabulary) + "]",
        f"noise_floor = {sig.noise_floor!r}",
        f"snr = {sig.snr!r}",
        f"white_ratio = {sig.white_ratio!r}",
        f"line_amplitude = {sig.line_amplitude!r}",
    ]
    for kw in vocabulary:
        comps = sig.signatures[kw]
        lines += [
            "",
            f'[signatures."{kw}"]',
            "center_freqs = " + arr(c.center_freq for c in comps),
            "amplitudes = " + arr(c.amplitude for c in comps),
            "weights = [" + ", ".join(arr(c.weights) for c in comps) + "]",
        ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_signature_config(path) -> tuple[tuple[str, ...], SignatureSpec]:
    with open(path, "rb") as fh:
        cfg = tomllib.load(fh)
    vocab = tuple(cfg["vocabulary"])
    sigs = {}
    for kw in vocab:
        s = cfg["signatures"][kw]
        sigs[kw] = tuple(
            SignatureComponent(float(f), tuple(float(x) for x in w), float(a))
            for f, a, w in zip(s["center_freqs"], s["amplitudes"], s["weights"])
        )
    extra = {k: float(cfg[k]) for k in ("noise_floor", "snr", "white_ratio", "line_amplitude") if k in cfg}
    return vocab, SignatureSpec(sigs, **extra)
