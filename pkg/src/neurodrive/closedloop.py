"""Neural-feedback retry loop and the end-to-end inference wiring.

A simulated subject keeps attempting a keyword until a decode matches it or
the attempt budget runs out; each failure scales the signal-to-noise ratio.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy import stats

from .controller import TrackingEnv, rollout
from .decoder import DecoderModel, predict_logits
from .features import extract_features
from .motion import MotionClip, keyword_to_clip, retarget
from .preprocess import PreprocessConfig, run_chain
from .robot import RobotSpec
from .signals import RecordingMeta, SessionTiming, SignatureSpec, epoch, generate_trial


@dataclass(frozen=True)
class SubjectModel:
    base_snr: float = 1.0
    feedback_gain: float = 1.0  # snr multiplier after a failed attempt
    fatigue_decay: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.base_snr > 0:
            raise ValueError("base_snr must be positive")
        if self.feedback_gain < 1:
            raise ValueError("feedback_gain must be >= 1")
        if not 0 < self.fatigue_decay <= 1:
            raise ValueError("fatigue_decay must lie in (0, 1]")


@dataclass
class Attempt:
    decoded: str
    correct: bool
    snr: float


@dataclass
class AttemptLog:
    intent: str
    budget: float
    attempts: list[Attempt] = field(default_factory=list)

    @property
    def attempts_used(self) -> int:
        return len(self.attempts)

    @property
    def success(self) -> bool:
        return any(a.correct for a in self.attempts)

    def to_json(self) -> str:
        return json.dumps(
            {
                "intent": self.intent,
                "budget": self.budget,
                "attempts_used": self.attempts_used,
                "success": self.success,
                "attempts": [asdict(a) for a in self.attempts],
            }
        )

    @classmethod
    def from_json(cls, line: str) -> AttemptLog:
        d = json.loads(line)
        return cls(d["intent"], d["budget"], [Attempt(**a) for a in d["attempts"]])


class Pipeline(Protocol):
    vocabulary: Sequence[str]

    def decode(self, intent: str, snr: float, rng: np.random.Generator) -> str: ...


@dataclass
class FixedPipeline:
    """Always decodes ``output``; for the degenerate always/never cases."""

    vocabulary: Sequence[str]
    output: str

    def decode(self, intent, snr, rng) -> str:
        return self.output


def _wrong_choice(vocabulary: Sequence[str], intent: str, rng) -> str:
    others = [w for w in vocabulary if w != intent]
    return others[int(rng.integers(len(others)))] if others else intent


@dataclass
class BernoulliPipeline:
    """Correct with fixed probability ``p`` regardless of snr."""

    vocabulary: Sequence[str]
    p: float

    def decode(self, intent, snr, rng) -> str:
        u = rng.random()
        wrong = _wrong_choice(self.vocabulary, intent, rng)
        return intent if u < self.p else wrong


@dataclass
class PsychometricPipeline:
    """Accuracy rises from chance with log-snr along a logistic curve."""

    vocabulary: Sequence[str]
    snr_mid: float = 1.0
    slope: float = 2.0
    ceiling: float = 0.99

    def accuracy(self, snr: float) -> float:
        chance = 1.0 / len(self.vocabulary)
        s = 1.0 / (1.0 + math.exp(-self.slope * math.log(snr / self.snr_mid)))
        return chance + (self.ceiling - chance) * s

    def decode(self, intent, snr, rng) -> str:
        u = rng.random()
        wrong = _wrong_choice(self.vocabulary, intent, rng)
        return intent if u < self.accuracy(snr) else wrong


@dataclass
class DecoderPipeline:
    """Fresh synthetic trial at the current snr -> cleaning (no ICA) -> features -> decoder argmax."""

    model: DecoderModel
    meta: RecordingMeta
    signatures: SignatureSpec
    window_sec: float = 2.0
    n_bands: int = 16
    cycles: float = 7.0
    prep: PreprocessConfig = PreprocessConfig(ica=False)
    timing: SessionTiming = SessionTiming(baseline_sec=2.0)

    @property
    def vocabulary(self) -> Sequence[str]:
        return self.meta.vocabulary

    def trial(self, intent: str, snr: float, seed: int):
        label = list(self.vocabulary).index(intent)
        rec = generate_trial(self.meta, self.signatures.with_snr(snr), label, seed, self.timing)
        rec, _ = run_chain(rec, self.prep)
        return epoch(rec, self.window_sec)[0]

    def decode_trial(self, trial) -> str:
        feats = extract_features([trial], self.meta.sample_rate, self.n_bands, self.cycles)
        return self.vocabulary[int(np.argmax(predict_logits(self.model, feats)[0]))]

    def decode(self, intent, snr, rng) -> str:
        return self.decode_trial(self.trial(intent, snr, int(rng.integers(2**63))))


def attempt_count(budget_k: float, rng: np.random.Generator) -> int:
    """floor(k) attempts plus one more with probability frac(k)."""
    whole = math.floor(budget_k)
    u = rng.random()
    return whole + (1 if u < budget_k - whole else 0)


def run_attempt_loop(subject: SubjectModel, pipeline: Pipeline, intent: str, budget_k: float, seed: int) -> AttemptLog:
    if budget_k < 1:
        raise ValueError("budget_k must be >= 1")
    if intent not in pipeline.vocabulary:
        raise ValueError(f"intent {intent!r} not in vocabulary {list(pipeline.vocabulary)}")
    rng = np.random.default_rng([subject.seed, seed])
    n = attempt_count(budget_k, rng)
    log = AttemptLog(intent, budget_k)
    snr = subject.base_snr
    for _ in range(n):
        decoded = pipeline.decode(intent, snr, rng)
        ok = decoded == intent
        log.attempts.append(Attempt(decoded, ok, snr))
        if ok:
            break
        snr *= subject.feedback_gain * subject.fatigue_decay
    return log


@dataclass
class SuccessReport:
    rate: float
    n_episodes: int
    mean_attempts_success: float
    ci99: tuple[float, float]
    per_intent: dict[str, tuple[float, float, int]]  # rate, mean attempts among successes, episodes


def success_rate(logs: Sequence[AttemptLog]) -> float:
    if not logs:
        raise ValueError("success_rate needs at least one log")
    return sum(l.success for l in logs) / len(logs)


def _mean_attempts(logs) -> float:
    ok = [l.attempts_used for l in logs if l.success]
    return float(np.mean(ok)) if ok else float("nan")


def success_report(logs: Sequence[AttemptLog]) -> SuccessReport:
    rate = success_rate(logs)
    wins = sum(l.success for l in logs)
    ci = stats.binomtest(wins, len(logs)).proportion_ci(confidence_level=0.99)
    per = {}
    for intent in sorted({l.intent for l in logs}):
        sub = [l for l in logs if l.intent == intent]
        per[intent] = (success_rate(sub), _mean_attempts(sub), len(sub))
    return SuccessReport(rate, len(logs), _mean_attempts(logs), (ci.low, ci.high), per)


def expected_success(p: float, k: float) -> float:
    """Closed form for independent attempts under the fractional budget."""
    whole = math.floor(k)
    frac = k - whole
    miss = (1 - p) ** whole
    return 1 - miss * (1 - frac * p)


def solve_budget(p: float, rate: float) -> float:
    """k with 1 - (1 - p)^k = rate."""
    return math.log1p(-rate) / math.log1p(-p)


def attempt_budget(minutes: float, attempt_sec: float) -> float:
    """Attempts that fit into a wall-clock window."""
    if attempt_sec <= 0:
        raise ValueError("attempt_sec must be positive")
    return max(1.0, minutes * 60.0 / attempt_sec)


def write_attempt_logs(logs: Sequence[AttemptLog], path) -> None:
    with open(path, "w") as fh:
        for l in logs:
            fh.write(l.to_json() + "\n")


def read_attempt_logs(path) -> list[AttemptLog]:
    with open(path) as fh:
        return [AttemptLog.from_json(line) for line in fh if line.strip()]


def write_summary_csv(report: SuccessReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["intent", "success_rate", "mean_attempts", "episodes"])
        for intent, (rate, mean_att, n) in report.per_intent.items():
            w.writerow([intent, f"{rate:.4f}", f"{mean_att:.3f}", n])
        w.writerow(["all", f"{report.rate:.4f}", f"{report.mean_attempts_success:.3f}", report.n_episodes])


# ---------------------------------------------------------------------------
# end-to-end wiring
# ---------------------------------------------------------------------------
class PipelineStageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.__cause__ = cause


@dataclass
class E2EResult:
    keyword: str
    clip: MotionClip
    metrics: dict
    timings: dict[str, float]
    total_sec: float


@dataclass
class E2EPipeline:
    decode: Callable  # trial -> keyword
    motion: Callable  # keyword -> MotionClip
    robot: RobotSpec
    policy: object
    env: TrackingEnv
    disc: object = None
    horizon: int = 100

    def run(self, trial) -> E2EResult:
        timings = {}
        t_start = time.perf_counter()

        def stage(name, fn, *args):
            t = time.perf_counter()
            try:
                return fn(*args)
            except Exception as exc:
                raise PipelineStageError(name, exc) from exc
            finally:
                timings[name] = time.perf_counter() - t

        keyword = stage("decoder", self.decode, trial)
        clip = stage("intent2motion", self.motion, keyword)
        ref = stage("retarget", retarget, clip, self.robot)
        _, metrics = stage("controller", rollout, self.policy, self.env, ref, min(self.horizon, len(ref)), self.disc)
        return E2EResult(keyword, clip, metrics, timings, time.perf_counter() - t_start)


def wire_pipeline(decoder: DecoderPipeline, motion: Callable | None, controller: tuple, robot: RobotSpec, horizon: int = 100) -> E2EPipeline:
    """``controller`` is (policy, discriminator or None, TrackingEnv); ``motion`` defaults to the clip library."""
    policy, disc, env = controller
    return E2EPipeline(decoder.decode_trial, motion or keyword_to_clip, robot, policy, env, disc, horizon)
