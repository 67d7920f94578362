"""Keyword -> reference motion.

A procedural clip library stands in for pretrained text-to-motion inference.
A small VQ-VAE motion tokenizer and a causal token language model exercise
the tokenizer and likelihood objectives at trainable scale; ``retarget``
maps human-skeleton clips onto a robot's joints.
"""

from __future__ import annotations

import csv
import io
import math
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import LayerNorm, Linear, Module, Tensor, parameter
from .decoder import FeedForward, SelfAttention
from .robot import HUMAN_JOINTS, HUMAN_LIMITS, ReferenceTrajectory, RobotSpec
from .tensorio import load_tensors, save_tensors

EFFECTORS = ("l_foot", "r_foot", "l_hand", "r_hand")
LEG_LENGTH = 0.9
UPPER_ARM, FOREARM = 0.3, 0.25
SHOULDER_HEIGHT = 1.4


class UnknownKeywordError(KeyError):
    pass


@dataclass(eq=False)
class MotionClip:
    frames: np.ndarray  # T x J joint angles, radians
    frame_rate: float
    end_effector: np.ndarray  # T x E x 3
    contacts: np.ndarray  # T x F bool (left foot, right foot)
    label: str = ""
    joint_names: tuple[str, ...] = HUMAN_JOINTS
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=float)
        self.contacts = np.asarray(self.contacts, dtype=bool)
        if self.frames.ndim != 2 or self.frames.shape[0] < 2:
            raise ValueError("a clip needs at least two frames")
        if self.frame_rate <= 0:
            raise ValueError("frame_rate must be positive")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


# ---------------------------------------------------------------------------
# procedural library
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class GaitParams:
    cycle_hz: float = 1.0
    duty: float = 0.6  # stance fraction per leg
    leg_offset: float = 0.5  # phase offset of the right leg
    hip_amp: float = 0.4
    hip_bias: float = 0.0
    knee_amp: float = 0.6
    knee_bias: float = 0.1
    swing_height: float = 0.12
    arm_amp: float = 0.4
    arm_bias: float = 0.0
    arm_rate: float = 1.0
    elbow_amp: float = 0.3
    elbow_bias: float = 0.3
    arm_mirror: bool = True  # arms swing opposite to each other


LIBRARY: dict[str, GaitParams] = {
    "walking": GaitParams(1.0, 0.6, 0.5, 0.4, 0.0, 0.6, 0.1, 0.10, 0.4),
    "running": GaitParams(1.6, 0.35, 0.5, 0.7, 0.1, 1.2, 0.2, 0.20, 0.7, 0.0, 1.0, 0.4, 1.2),
    "jumping": GaitParams(1.2, 0.45, 0.0, 0.5, 0.2, 1.0, 0.3, 0.30, 1.2, 0.6, 1.0, 0.2, 0.2, False),
    "dancing": GaitParams(1.0, 0.7, 0.5, 0.3, 0.0, 0.5, 0.2, 0.10, 1.5, 0.8, 2.0, 0.8, 0.8, False),
    "battle": GaitParams(0.8, 0.8, 0.5, 0.2, 0.15, 0.4, 0.4, 0.06, 1.0, 1.0, 2.0, 1.0, 1.0),
    "cowboy": GaitParams(0.9, 0.75, 0.5, 0.3, 0.05, 0.5, 0.3, 0.08, 0.8, 1.6, 1.5, 0.5, 0.9, False),
    "idle": GaitParams(0.3, 1.0, 0.5, 0.05, 0.0, 0.05, 0.05, 0.0, 0.05, 0.0, 1.0, 0.05, 0.2),
    "skipping": GaitParams(1.4, 0.45, 0.5, 0.5, 0.1, 0.9, 0.2, 0.18, 0.8, 0.0, 1.0, 0.4, 0.6),
}


def _procedural_params(keyword: str) -> GaitParams:
    rng = np.random.default_rng(zlib.crc32(keyword.encode("utf-8")))
    return GaitParams(
        cycle_hz=float(rng.uniform(0.6, 1.4)),
        duty=float(rng.uniform(0.55, 0.9)),
        leg_offset=0.5,
        hip_amp=float(rng.uniform(0.1, 0.5)),
        hip_bias=float(rng.uniform(-0.1, 0.3)),
        knee_amp=float(rng.uniform(0.2, 0.8)),
        knee_bias=float(rng.uniform(0.05, 0.4)),
        swing_height=float(rng.uniform(0.03, 0.15)),
        arm_amp=float(rng.uniform(0.2, 1.2)),
        arm_bias=float(rng.uniform(-0.3, 1.0)),
        arm_rate=float(rng.choice([1.0, 2.0])),
        elbow_amp=float(rng.uniform(0.1, 0.8)),
        elbow_bias=float(rng.uniform(0.2, 1.0)),
        arm_mirror=bool(rng.integers(2)),
    )


def known_keywords() -> list[str]:
    from .signals import FULL_24

    return sorted(set(LIBRARY) | set(FULL_24))


def gait_params(keyword: str) -> GaitParams:
    if keyword in LIBRARY:
        return LIBRARY[keyword]
    if keyword in known_keywords():
        return _procedural_params(keyword)
    raise UnknownKeywordError(f"unknown keyword {keyword!r}; known keywords: {', '.join(known_keywords())}")


def arm_fk(shoulder: np.ndarray, elbow: np.ndarray, side: float) -> np.ndarray:
    x = UPPER_ARM * np.sin(shoulder) + FOREARM * np.sin(shoulder + elbow)
    z = SHOULDER_HEIGHT - UPPER_ARM * np.cos(shoulder) - FOREARM * np.cos(shoulder + elbow)
    return np.stack([x, np.full_like(x, 0.2 * side), z], axis=-1)


def keyword_to_clip(keyword: str, duration: float = 2.0, frame_rate: float = 30.0) -> MotionClip:
    """Deterministic parametric clip: phase-driven legs with stance/swing and swinging arms."""
    p = gait_params(keyword)
    n = int(round(duration * frame_rate))
    t = np.arange(n) / frame_rate
    frames = np.zeros((n, len(HUMAN_JOINTS)))
    ee = np.zeros((n, len(EFFECTORS), 3))
    contacts = np.zeros((n, 2), dtype=bool)
    for leg, offset in enumerate((0.0, p.leg_offset)):
        phase = np.mod(p.cycle_hz * t + offset, 1.0)
        stance = phase < p.duty
        s = np.where(stance, 0.0, (phase - p.duty) / max(1.0 - p.duty, 1e-9))
        lift = np.sin(np.pi * s)
        hip = p.hip_bias + p.hip_amp * np.cos(2 * np.pi * phase)
        knee = p.knee_bias + p.knee_amp * lift
        frames[:, 2 * leg] = hip
        frames[:, 2 * leg + 1] = knee
        contacts[:, leg] = stance
        ee[:, leg] = np.stack(
            [LEG_LENGTH * np.sin(hip), np.full(n, 0.1 * (1 - 2 * leg)), p.swing_height * lift], axis=-1
        )
    for arm in range(2):
        sign = -1.0 if (arm == 1 and p.arm_mirror) else 1.0
        ang = 2 * np.pi * p.arm_rate * p.cycle_hz * t
        shoulder = p.arm_bias + sign * p.arm_amp * np.cos(ang)
        elbow = p.elbow_bias + p.elbow_amp * (0.5 + 0.5 * np.sin(ang))
        frames[:, 4 + 2 * arm] = shoulder
        frames[:, 5 + 2 * arm] = elbow
    frames = np.clip(frames, HUMAN_LIMITS[:, 0], HUMAN_LIMITS[:, 1])
    ee[:, 2] = arm_fk(frames[:, 4], frames[:, 5], 1.0)
    ee[:, 3] = arm_fk(frames[:, 6], frames[:, 7], -1.0)
    return MotionClip(frames, frame_rate, ee, contacts, keyword)


def annotate(frames: np.ndarray, frame_rate: float, label: str = "", contact_height: float = 0.02, **meta) -> MotionClip:
    """Build a clip from joint angles alone; feet heights come from knee flexion.

    Used for generated motion, where no stance annotations exist.
    """
    frames = np.clip(np.asarray(frames, dtype=float), HUMAN_LIMITS[:, 0], HUMAN_LIMITS[:, 1])
    n = len(frames)
    ee = np.zeros((n, len(EFFECTORS), 3))
    contacts = np.zeros((n, 2), dtype=bool)
    for leg in range(2):
        hip, knee = frames[:, 2 * leg], frames[:, 2 * leg + 1]
        flex = knee - knee.min()
        height = 0.2 * flex
        ee[:, leg] = np.stack([LEG_LENGTH * np.sin(hip), np.full(n, 0.1 * (1 - 2 * leg)), height], axis=-1)
        contacts[:, leg] = height < contact_height
    ee[:, 2] = arm_fk(frames[:, 4], frames[:, 5], 1.0)
    ee[:, 3] = arm_fk(frames[:, 6], frames[:, 7], -1.0)
    return MotionClip(frames, frame_rate, ee, contacts, label, meta=dict(meta))


def duty_factor(contacts: np.ndarray) -> np.ndarray:
    return np.asarray(contacts, dtype=float).mean(axis=0)


# ---------------------------------------------------------------------------
# VQ-VAE motion tokenizer
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class VqConfig:
    n_joints: int = len(HUMAN_JOINTS)
    window: int = 4
    n_codes: int = 32
    code_dim: int = 8
    hidden: int = 64
    beta_vq: float = 0.25

    @property
    def input_dim(self) -> int:
        return self.window * self.n_joints


class MotionCodebook(Module):
    """Encoder E, decoder D and the code vectors e_k."""

    def __init__(self, cfg: VqConfig = VqConfig(), seed: int = 0):
        if cfg.n_codes < 2:
            raise ValueError("codebook needs at least two codes")
        rng = np.random.default_rng(seed)
        self.config = cfg
        self.enc1 = Linear(cfg.input_dim, cfg.hidden, rng)
        self.enc2 = Linear(cfg.hidden, cfg.code_dim, rng)
        self.dec1 = Linear(cfg.code_dim, cfg.hidden, rng)
        self.dec2 = Linear(cfg.hidden, cfg.input_dim, rng)
        self.codes = parameter(rng.standard_normal((cfg.n_codes, cfg.code_dim)))

    @property
    def beta_vq(self) -> float:
        return self.config.beta_vq

    def encode(self, x) -> Tensor:
        return self.enc2(ad.tanh(self.enc1(x)))

    def decode(self, z) -> Tensor:
        return self.dec2(ad.tanh(self.dec1(z)))


def nearest_code(z: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """argmin_i ||z - e_i||; equal distances resolve to the lowest index."""
    z = np.atleast_2d(z)
    d = np.sum((z[:, None, :] - codes[None, :, :]) ** 2, axis=-1)
    return np.argmin(d, axis=1)


def quantize(x_window, codebook: MotionCodebook) -> tuple[int, np.ndarray]:
    """Code index and code vector for one flattened frame window."""
    x = np.asarray(x_window, dtype=float).reshape(1, -1)
    if not np.all(np.isfinite(x)):
        raise ValueError("quantize needs finite input")
    with ad.no_grad():
        z = codebook.encode(x).data
    k = int(nearest_code(z, codebook.codes.data)[0])
    return k, codebook.codes.data[k].copy()


def vqvae_loss_terms(x, codebook: MotionCodebook) -> dict[str, Tensor]:
    """Batch-mean reconstruction, codebook and (beta-weighted) commitment terms.

    The decoder input uses the straight-through estimator so the
    reconstruction gradient reaches the encoder.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    z_e = codebook.encode(x)
    k = nearest_code(z_e.data, codebook.codes.data)
    e_k = codebook.codes[k]
    z_st = z_e + ad.detach(e_k - z_e)
    recon = codebook.decode(z_st)
    b = x.shape[0]
    rec = ((x - recon) ** 2).sum() * (1.0 / b)
    cb = ((ad.detach(z_e) - e_k) ** 2).sum() * (1.0 / b)
    commit = ((z_e - ad.detach(e_k)) ** 2).sum() * (codebook.beta_vq / b)
    return {"reconstruction": rec, "codebook": cb, "commitment": commit}


def vqvae_loss(x, codebook: MotionCodebook) -> Tensor:
    t = vqvae_loss_terms(x, codebook)
    return t["reconstruction"] + t["codebook"] + t["commitment"]


def clip_windows(frames: np.ndarray, window: int = 4) -> np.ndarray:
    """Non-overlapping frame windows flattened frame-major, shape (T // window, window * J)."""
    n = (len(frames) // window) * window
    return np.asarray(frames[:n]).reshape(-1, window * frames.shape[1])


def train_vqvae(
    windows: np.ndarray,
    cfg: VqConfig = VqConfig(),
    epochs: int = 300,
    lr: float = 3e-3,
    batch_size: int = 64,
    seed: int = 0,
) -> tuple[MotionCodebook, list[float]]:
    """Gradient descent on all three terms; codes initialised from encoded samples."""
    rng = np.random.default_rng(seed)
    cb = MotionCodebook(cfg, seed)
    windows = np.asarray(windows, dtype=float)
    with ad.no_grad():
        z = cb.encode(windows).data
    pick = rng.choice(len(windows), size=cfg.n_codes, replace=len(windows) < cfg.n_codes)
    cb.codes.data = z[pick] + 1e-3 * rng.standard_normal((cfg.n_codes, cfg.code_dim))
    opt = ad.AdamW(cb.parameters(), lr=lr)
    curve = []
    n = len(windows)
    bs = min(batch_size, n)
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, bs):
            batch = windows[order[s : s + bs]]
            value = vqvae_loss(batch, cb)
            opt.zero_grad()
            value.backward()
            opt.step()
            total += value.item() * len(batch)
        curve.append(total / n)
    return cb, curve


def reconstruct(windows: np.ndarray, codebook: MotionCodebook) -> np.ndarray:
    with ad.no_grad():
        z = codebook.encode(np.atleast_2d(windows)).data
        k = nearest_code(z, codebook.codes.data)
        return codebook.decode(codebook.codes.data[k]).data


# ---------------------------------------------------------------------------
# token language model
# ---------------------------------------------------------------------------
class TokenLm(Module):
    """Causal transformer over motion tokens, EOS/BOS and keyword (text) tokens.

    Ids: [0, K) motion codes, K = EOS, K + 1 = BOS, then one id per word.
    """

    def __init__(self, n_motion: int, words: Sequence[str], embed_dim: int = 32, n_heads: int = 2, max_len: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.n_motion = n_motion
        self.words = tuple(words)
        self.max_len = max_len
        self.embed_dim = embed_dim
        self.n_heads = n_heads
        v = self.vocab_size
        self.tok = parameter(0.1 * rng.standard_normal((v, embed_dim)))
        self.pos = parameter(0.1 * rng.standard_normal((max_len, embed_dim)))
        self.attn = SelfAttention(embed_dim, n_heads, rng)
        self.ff = FeedForward(embed_dim, 2 * embed_dim, rng)
        self.norm = LayerNorm(embed_dim)
        self.out = Linear(embed_dim, v, rng)

    @property
    def eos(self) -> int:
        return self.n_motion

    @property
    def bos(self) -> int:
        return self.n_motion + 1

    @property
    def vocab_size(self) -> int:
        return self.n_motion + 2 + len(self.words)

    def text_tokens(self, text: str) -> list[int]:
        ids = []
        for w in text.split():
            if w not in self.words:
                raise UnknownKeywordError(f"word {w!r} not in the language model vocabulary")
            ids.append(self.n_motion + 2 + self.words.index(w))
        return ids

    def logits(self, seqs: np.ndarray) -> Tensor:
        """Next-token logits for every position of an (B, L) id batch."""
        seqs = np.atleast_2d(np.asarray(seqs, dtype=int))
        b, n = seqs.shape
        if n > self.max_len:
            raise ValueError(f"sequence length {n} exceeds max_len {self.max_len}")
        x = self.tok[seqs] + self.pos[np.arange(n)]
        x = x + self.attn(x, causal=True)
        x = x + self.ff(x)
        return self.out(self.norm(x))

    def next_token_probs(self, prefix: Sequence[int]) -> np.ndarray:
        with ad.no_grad():
            z = self.logits(np.asarray(prefix)[None]).data[0, -1]
        p = np.exp(z - z.max())
        return p / p.sum()


def _check_tokens(model: TokenLm, tokens) -> np.ndarray:
    arr = np.asarray(tokens, dtype=int)
    bad = arr[(arr < 0) | (arr >= model.vocab_size)]
    if bad.size:
        raise ValueError(f"tokens {sorted(set(bad.tolist()))} outside vocabulary of size {model.vocab_size}")
    return arr


def lm_loss(model: TokenLm, x_s: Sequence[int], x_t: Sequence[int]) -> Tensor:
    """-sum_i log p(x_t[i] | x_t[<i], x_s), teacher-forced."""
    x_s = _check_tokens(model, x_s)
    x_t = _check_tokens(model, x_t)
    if len(x_t) < 1:
        raise ValueError("target sequence must have at least one token")
    seq = np.concatenate([x_s, [model.bos], x_t[:-1]])
    logp = ad.log_softmax(model.logits(seq[None])[0], axis=-1)
    start = len(x_s)
    rows = np.arange(start, start + len(x_t))
    return -logp[rows, x_t].sum()


def lm_loss_batch(model: TokenLm, sources: Sequence[Sequence[int]], targets: Sequence[Sequence[int]]) -> Tensor:
    """Sum of per-sequence losses; sequences are right-padded so the causal mask keeps them independent."""
    n = len(sources)
    lens = [len(s) + 1 + len(t) - 1 for s, t in zip(sources, targets)]
    width = max(lens)
    seqs = np.full((n, width), model.eos, dtype=int)
    pick_rows, pick_pos, pick_tok = [], [], []
    for i, (s, t) in enumerate(zip(sources, targets)):
        s = _check_tokens(model, s)
        t = _check_tokens(model, t)
        seq = np.concatenate([s, [model.bos], t[:-1]])
        seqs[i, : len(seq)] = seq
        pick_rows += [i] * len(t)
        pick_pos += list(range(len(s), len(s) + len(t)))
        pick_tok += list(t)
    logp = ad.log_softmax(model.logits(seqs), axis=-1)
    return -logp[np.array(pick_rows), np.array(pick_pos), np.array(pick_tok)].sum()


def train_lm(
    model: TokenLm,
    corpus: Sequence[tuple[Sequence[int], Sequence[int]]],
    steps: int = 300,
    lr: float = 3e-3,
    seed: int = 0,
) -> list[float]:
    opt = ad.AdamW(model.parameters(), lr=lr)
    sources = [c[0] for c in corpus]
    targets = [c[1] for c in corpus]
    curve = []
    for _ in range(steps):
        value = lm_loss_batch(model, sources, targets)
        opt.zero_grad()
        value.backward()
        ad.clip_grad_norm(opt.params, 5.0)
        opt.step()
        curve.append(value.item() / len(corpus))
    return curve


def rollout_tokens(model: TokenLm, keyword_tokens: Sequence[int], max_len: int, seed: int | None = None) -> tuple[list[int], bool]:
    """Greedy (seed None) or sampled motion-token continuation; returns (tokens, ended_with_eos)."""
    if max_len <= 0:
        raise ValueError("max_len must be positive; an empty clip cannot be generated")
    rng = None if seed is None else np.random.default_rng(seed)
    prefix = list(_check_tokens(model, keyword_tokens)) + [model.bos]
    out = []
    allowed = model.n_motion + 1  # motion codes and EOS
    for _ in range(max_len):
        if len(prefix) >= model.max_len:
            break
        p = model.next_token_probs(prefix)[:allowed]
        p = p / p.sum()
        tok = int(np.argmax(p)) if rng is None else int(rng.choice(allowed, p=p))
        if tok == model.eos:
            return out, True
        out.append(tok)
        prefix.append(tok)
    return out, False


def generate_motion(
    model: TokenLm,
    codebook: MotionCodebook,
    keyword_tokens: Sequence[int],
    max_len: int,
    frame_rate: float = 30.0,
    seed: int | None = None,
    label: str = "",
) -> MotionClip:
    tokens, ended = rollout_tokens(model, keyword_tokens, max_len, seed)
    if not tokens:
        raise ValueError("generation produced no motion tokens")
    cfg = codebook.config
    with ad.no_grad():
        windows = codebook.decode(codebook.codes.data[np.array(tokens)]).data
    frames = windows.reshape(-1, cfg.n_joints)
    return annotate(frames, frame_rate, label, tokens=tokens, truncated=not ended)


@dataclass
class MotionModels:
    codebook: MotionCodebook
    lm: TokenLm

    def save(self, path) -> None:
        cfg = {
            "vq": self.codebook.config.__dict__,
            "lm": {"n_motion": self.lm.n_motion, "words": list(self.lm.words), "embed_dim": self.lm.embed_dim,
                   "n_heads": self.lm.n_heads, "max_len": self.lm.max_len},
        }
        tensors = {f"vq.{k}": v for k, v in self.codebook.state_dict().items()}
        tensors.update({f"lm.{k}": v for k, v in self.lm.state_dict().items()})
        save_tensors(path, cfg, tensors, kind="motion")

    @classmethod
    def load(cls, path) -> MotionModels:
        cfg, tensors = load_tensors(path, kind="motion")
        cb = MotionCodebook(VqConfig(**cfg["vq"]))
        cb.load_state_dict({k[3:]: v for k, v in tensors.items() if k.startswith("vq.")})
        lm = TokenLm(**cfg["lm"])
        lm.load_state_dict({k[3:]: v for k, v in tensors.items() if k.startswith("lm.")})
        return cls(cb, lm)

    def generate(self, keyword: str, max_len: int = 40) -> MotionClip:
        return generate_motion(self.lm, self.codebook, self.lm.text_tokens(keyword), max_len, label=keyword)


def train_motion_models(
    keywords: Sequence[str],
    vq: VqConfig = VqConfig(),
    vq_epochs: int = 200,
    lm_steps: int = 300,
    seed: int = 0,
) -> tuple[MotionModels, dict]:
    """Fit the tokenizer on library clips, then the LM on (keyword -> clip tokens + EOS) pairs."""
    clips = [keyword_to_clip(kw) for kw in keywords]
    windows = np.concatenate([clip_windows(c.frames, vq.window) for c in clips])
    cb, vq_curve = train_vqvae(windows, vq, epochs=vq_epochs, seed=seed)
    with ad.no_grad():
        codes = [nearest_code(cb.encode(clip_windows(c.frames, vq.window)).data, cb.codes.data) for c in clips]
    lm = TokenLm(vq.n_codes, keywords, max_len=max(len(c) for c in codes) + 4, seed=seed)
    corpus = [(lm.text_tokens(kw), list(c) + [lm.eos]) for kw, c in zip(keywords, codes)]
    lm_curve = train_lm(lm, corpus, steps=lm_steps, seed=seed)
    return MotionModels(cb, lm), {"vq_curve": vq_curve, "lm_curve": lm_curve, "targets": {kw: c.tolist() for kw, c in zip(keywords, codes)}}


# ---------------------------------------------------------------------------
# retargeting and file I/O
# ---------------------------------------------------------------------------
def retarget(clip: MotionClip, robot: RobotSpec) -> ReferenceTrajectory:
    """Linear joint map + clamp + linear resampling to the robot control rate.

    Velocities are central differences of the resampled positions (one-sided
    at the ends), so they describe the trajectory the controller tracks.
    """
    if clip.frame_rate <= 0:
        raise ValueError("clip frame_rate must be positive")
    if clip.frames.shape[1] != robot.joint_map.shape[1]:
        raise ValueError(f"clip has {clip.frames.shape[1]} joints, robot map expects {robot.joint_map.shape[1]}")
    q_src = robot.clamp(clip.frames @ robot.joint_map.T + robot.joint_offset)
    t_src = np.arange(clip.n_frames) / clip.frame_rate
    n_out = int(np.floor(t_src[-1] * robot.control_rate + 1e-9)) + 1
    t_out = np.arange(n_out) / robot.control_rate
    if np.isclose(clip.frame_rate, robot.control_rate):
        q = q_src.copy()
        seg = np.arange(n_out)
        frac = np.zeros(n_out)
    else:
        pos = t_out * clip.frame_rate
        seg = np.minimum(np.floor(pos + 1e-9).astype(int), clip.n_frames - 2)
        frac = pos - seg
        q = q_src[seg] * (1 - frac)[:, None] + q_src[seg + 1] * frac[:, None]
    qd = np.gradient(q, robot.dt, axis=0) if n_out > 1 else np.zeros_like(q)
    f = frac[:, None, None]
    ee = clip.end_effector[seg] * (1 - f) + clip.end_effector[np.minimum(seg + 1, clip.n_frames - 1)] * f
    contacts = clip.contacts[seg]
    return ReferenceTrajectory(clip.label, robot.control_rate, q, qd, ee, contacts, robot.joint_names, dict(clip.meta))


def trajectory_to_clip(ref: ReferenceTrajectory) -> MotionClip:
    return MotionClip(ref.q, ref.control_rate, ref.end_effector, ref.contacts, ref.label, tuple(ref.joint_names), dict(ref.meta))


def _clip_columns(joint_names, n_ee, n_feet, with_velocity):
    cols = list(joint_names)
    if with_velocity:
        cols += [f"d_{j}" for j in joint_names]
    cols += [f"ee{i}_{ax}" for i in range(n_ee) for ax in "xyz"]
    cols += [f"contact{i}" for i in range(n_feet)]
    return cols


def write_clip_csv(clip, path) -> None:
    """MotionClip or ReferenceTrajectory as CSV; a comment line carries rate and label."""
    is_ref = isinstance(clip, ReferenceTrajectory)
    frames = clip.q if is_ref else clip.frames
    rate = clip.control_rate if is_ref else clip.frame_rate
    n_ee, n_feet = clip.end_effector.shape[1], clip.contacts.shape[1]
    with open(path, "w", newline="") as fh:
        fh.write(f"# frame_rate={rate!r};label={clip.label};kind={'reference' if is_ref else 'clip'}\n")
        w = csv.writer(fh)
        w.writerow(_clip_columns(clip.joint_names, n_ee, n_feet, is_ref))
        for i in range(len(frames)):
            row = [repr(float(v)) for v in frames[i]]
            if is_ref:
                row += [repr(float(v)) for v in clip.qd[i]]
            row += [repr(float(v)) for v in clip.end_effector[i].ravel()]
            row += [str(int(c)) for c in clip.contacts[i]]
            w.writerow(row)


def read_clip_csv(path):
    text = Path(path).read_text()
    first, rest = text.split("\n", 1)
    if not first.startswith("# "):
        raise ValueError(f"{path}: missing clip header line")
    info = dict(kv.split("=", 1) for kv in first[2:].split(";"))
    rows = list(csv.reader(io.StringIO(rest)))
    header, body = rows[0], [r for r in rows[1:] if r]
    data = np.array([[float(v) for v in r] for r in body])
    contact_cols = [i for i, h in enumerate(header) if h.startswith("contact")]
    ee_cols = [i for i, h in enumerate(header) if h.startswith("ee")]
    vel_cols = [i for i, h in enumerate(header) if h.startswith("d_")]
    joint_cols = [i for i in range(len(header)) if i not in contact_cols + ee_cols + vel_cols]
    names = tuple(header[i] for i in joint_cols)
    ee = data[:, ee_cols].reshape(len(data), -1, 3)
    contacts = data[:, contact_cols].astype(bool)
    rate = float(info["frame_rate"])
    if info.get("kind") == "reference":
        return ReferenceTrajectory(info["label"], rate, data[:, joint_cols], data[:, vel_cols], ee, contacts, names)
    return MotionClip(data[:, joint_cols], rate, ee, contacts, info["label"], names)
