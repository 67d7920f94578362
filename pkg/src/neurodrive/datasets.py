"""Session-level assembly: synthetic sessions -> cleaned recordings -> feature datasets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .decoder import FeatureDataset
from .features import extract_features
from .preprocess import PreprocessConfig, run_chain
from .signals import Recording, RecordingMeta, SessionTiming, SignatureSpec, epoch, generate_session


@dataclass(frozen=True)
class ProtocolConfig:
    """Blocks x sessions per subject; each session presents every keyword ``reps_per_session`` times."""

    n_subjects: int = 1
    n_blocks: int = 4
    sessions_per_block: int = 4
    reps_per_session: int = 8
    timing: SessionTiming = SessionTiming()
    window_sec: float = 2.0
    n_bands: int = 16
    cycles: float = 7.0

    @property
    def n_sessions(self) -> int:
        return self.n_blocks * self.sessions_per_block


def subject_ids(n: int) -> list[str]:
    return [f"S{i + 1:02d}" for i in range(n)]


def session_seed(seed: int, subject: int, session: int) -> int:
    return int(np.random.SeedSequence([seed, subject, session]).generate_state(1, dtype=np.uint64)[0])


@dataclass
class SessionPlan:
    meta: RecordingMeta
    n_trials: int
    seed: int


def plan_sessions(base: RecordingMeta, proto: ProtocolConfig, seed: int) -> list[SessionPlan]:
    plans = []
    n_trials = proto.reps_per_session * len(base.vocabulary)
    for si, sid in enumerate(subject_ids(proto.n_subjects)):
        for b in range(proto.n_blocks):
            for s in range(proto.sessions_per_block):
                session = b * proto.sessions_per_block + s
                meta = RecordingMeta(sid, base.n_channels, base.sample_rate, base.vocabulary, b, session)
                plans.append(SessionPlan(meta, n_trials, session_seed(seed, si, session)))
    return plans


def recording_features(rec: Recording, proto: ProtocolConfig) -> tuple[np.ndarray, np.ndarray]:
    trials = epoch(rec, proto.window_sec)
    feats = extract_features(trials, rec.meta.sample_rate, proto.n_bands, proto.cycles)
    return feats, np.array([t.label for t in trials], dtype=int)


def build_dataset(
    base: RecordingMeta,
    sig: SignatureSpec,
    proto: ProtocolConfig,
    seed: int,
    prep: PreprocessConfig | None = PreprocessConfig(),
) -> FeatureDataset:
    """Generate, clean and featurise every planned session in memory."""
    feats, labels, sessions, subjects = [], [], [], []
    for plan in plan_sessions(base, proto, seed):
        rec = generate_session(plan.meta, sig, plan.n_trials, plan.seed, timing=proto.timing)
        if prep is not None:
            rec, _ = run_chain(rec, prep)
        f, y = recording_features(rec, proto)
        feats.append(f)
        labels.append(y)
        sessions += [plan.meta.session_id] * len(y)
        subjects += [plan.meta.subject_id] * len(y)
    return FeatureDataset(
        np.concatenate(feats),
        np.concatenate(labels),
        np.asarray(sessions),
        np.asarray(subjects),
        tuple(base.vocabulary),
    )
