"""Conformer band-token classifier with masked-band reconstruction.

Trials arrive as (N channels x D bands) log energies.  Each band is a token;
a spatial projection over channels plus a band position embedding produces
the embedded sequence fed to the Conformer blocks.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Linear, LayerNorm, Module, Tensor, parameter
from .features import BandTokenSequence
from .tensorio import load_tensors, save_tensors

log = logging.getLogger(__name__)


class NonFiniteError(FloatingPointError):
    def __init__(self, where: str, step: int | None = None, seed: int | None = None):
        msg = f"non-finite values produced in {where}"
        if step is not None:
            msg += f" at step {step} (seed {seed})"
        super().__init__(msg)
        self.where = where
        self.step = step
        self.seed = seed


@dataclass(frozen=True)
class DecoderConfig:
    n_channels: int = 16
    n_bands: int = 16
    n_classes: int = 6
    n_blocks: int = 2
    embed_dim: int = 64
    n_heads: int = 4
    ff_dim: int = 128
    conv_kernel: int = 3
    alpha: float = 0.5
    beta: float = 0.5
    mask_rate: float = 0.25

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if not 0 <= self.mask_rate < 1:
            raise ValueError("mask_rate must be in [0, 1)")

    @classmethod
    def paper(cls, **kw) -> DecoderConfig:
        return cls(**{"n_channels": 128, "n_classes": 24, "embed_dim": 512, "n_heads": 8, "ff_dim": 1024, **kw})


@dataclass(frozen=True)
class TrainSchedule:
    """Linear warm-up from ``initial_lr`` to ``peak_lr``, then linear decay to ``final_lr``."""

    initial_lr: float = 1e-4
    peak_lr: float = 1e-2
    final_lr: float = 1e-6
    warmup_steps: int = 500
    weight_decay: float = 0.05
    batch_size: int = 256
    epochs: int = 100
    grad_clip: float = 1.0

    @classmethod
    def desk(cls, **kw) -> TrainSchedule:
        return cls(**{"peak_lr": 2e-3, "warmup_steps": 40, "batch_size": 32, "epochs": 20, **kw})

    def lr(self, step: int, total_steps: int) -> float:
        if step <= self.warmup_steps:
            if self.warmup_steps == 0:
                return self.peak_lr
            return self.initial_lr + (self.peak_lr - self.initial_lr) * step / self.warmup_steps
        if total_steps <= self.warmup_steps:
            return self.final_lr
        frac = min((step - self.warmup_steps) / (total_steps - self.warmup_steps), 1.0)
        return self.peak_lr + (self.final_lr - self.peak_lr) * frac


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------
class FeedForward(Module):
    def __init__(self, e: int, f: int, rng):
        self.norm = LayerNorm(e)
        self.up = Linear(e, f, rng)
        self.down = Linear(f, e, rng)

    def __call__(self, x):
        return self.down(ad.swish(self.up(self.norm(x))))


class SelfAttention(Module):
    def __init__(self, e: int, heads: int, rng):
        self.heads = heads
        self.norm = LayerNorm(e)
        self.q = Linear(e, e, rng)
        self.k = Linear(e, e, rng)
        self.v = Linear(e, e, rng)
        self.out = Linear(e, e, rng)

    def __call__(self, x, key_mask: np.ndarray | None = None, causal: bool = False):
        b, d, e = x.shape
        h, dh = self.heads, e // self.heads
        xn = self.norm(x)

        def split(t):
            return t.reshape(b, d, h, dh).transpose(0, 2, 1, 3)

        q, k, v = split(self.q(xn)), split(self.k(xn)), split(self.v(xn))
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
        bias = np.zeros((b, 1, d, d))
        if key_mask is not None:
            bias = bias + np.where(np.asarray(key_mask, bool)[:, None, None, :], -1e9, 0.0)
        if causal:
            bias = bias + np.triu(np.full((d, d), -1e9), k=1)[None, None]
        if key_mask is not None or causal:
            scores = scores + bias
        att = ad.softmax(scores, axis=-1)
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(b, d, e)
        return self.out(ctx)


class ConvModule(Module):
    """Pointwise -> GLU -> depthwise conv over the band axis -> norm -> swish -> pointwise."""

    def __init__(self, e: int, kernel: int, rng):
        self.kernel = kernel
        self.norm = LayerNorm(e)
        self.pw1 = Linear(e, 2 * e, rng)
        self.dw = parameter(rng.uniform(-1, 1, size=(kernel, e)) / math.sqrt(kernel))
        self.dw_bias = parameter(np.zeros(e))
        self.mid_norm = LayerNorm(e)
        self.pw2 = Linear(e, e, rng)

    def __call__(self, x):
        b, d, e = x.shape
        y = self.pw1(self.norm(x))
        y = y[..., :e] * ad.sigmoid(y[..., e:])
        half = self.kernel // 2
        pad = np.zeros((b, half, e))
        yp = ad.concatenate([pad, y, pad], axis=1)
        acc = None
        for j in range(self.kernel):
            term = yp[:, j : j + d, :] * self.dw[j]
            acc = term if acc is None else acc + term
        y = ad.swish(self.mid_norm(acc + self.dw_bias))
        return self.pw2(y)


class ConformerBlock(Module):
    def __init__(self, cfg: DecoderConfig, rng):
        e = cfg.embed_dim
        self.ff1 = FeedForward(e, cfg.ff_dim, rng)
        self.attn = SelfAttention(e, cfg.n_heads, rng)
        self.conv = ConvModule(e, cfg.conv_kernel, rng)
        self.ff2 = FeedForward(e, cfg.ff_dim, rng)
        self.norm = LayerNorm(e)

    def __call__(self, x, key_mask=None, check=None):
        x = x + 0.5 * self.ff1(x)
        check and check(x, "ff1")
        x = x + self.attn(x, key_mask)
        check and check(x, "attention")
        x = x + self.conv(x)
        check and check(x, "conv")
        x = x + 0.5 * self.ff2(x)
        check and check(x, "ff2")
        return self.norm(x)


class DecoderModel(Module):
    def __init__(self, cfg: DecoderConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = cfg
        n, d, e = cfg.n_channels, cfg.n_bands, cfg.embed_dim
        self.spatial_weight = parameter(rng.uniform(-1, 1, size=(n, e)) / math.sqrt(n))
        self.spatial_bias = parameter(np.zeros(e))
        self.pos = parameter(0.02 * rng.standard_normal((d, e)))
        self.mask_token = parameter(0.02 * rng.standard_normal(e))
        self.blocks = [ConformerBlock(cfg, rng) for _ in range(cfg.n_blocks)]
        self.head = Linear(e, cfg.n_classes, rng)
        self.recon = Linear(e, n, rng)
        # per (band, channel) standardisation, fitted on training features
        self.norm_mean = np.zeros((d, n))
        self.norm_std = np.ones((d, n))

    def fit_normalization(self, features: np.ndarray) -> None:
        """``features`` has shape (n_trials, N, D)."""
        tok = np.transpose(features, (0, 2, 1))
        self.norm_mean = tok.mean(axis=0)
        self.norm_std = tok.std(axis=0) + 1e-6

    def normalize(self, tokens: np.ndarray) -> np.ndarray:
        return (tokens - self.norm_mean) / self.norm_std

    def buffers(self) -> dict[str, np.ndarray]:
        return {"norm_mean": self.norm_mean, "norm_std": self.norm_std}


def _as_token_batch(tokens) -> np.ndarray:
    if isinstance(tokens, BandTokenSequence):
        return tokens.tokens[None]
    arr = np.asarray(tokens, dtype=np.float64)
    return arr[None] if arr.ndim == 2 else arr


def features_to_tokens(features: np.ndarray) -> np.ndarray:
    """(n_trials, N, D) band energies -> (n_trials, D, N) token batch."""
    return np.transpose(np.asarray(features, dtype=np.float64), (0, 2, 1))


def spatial_encode(tokens, model: DecoderModel, band_mask: np.ndarray | None = None) -> Tensor:
    """Project each band token over channels and add its band position embedding.

    ``tokens`` is a BandTokenSequence, a (D, N) or a (B, D, N) array.  Bands
    flagged in ``band_mask`` (B, D) are replaced by the learned mask token.
    """
    x = _as_token_batch(tokens)
    cfg = model.config
    if x.shape[1:] != (cfg.n_bands, cfg.n_channels):
        raise ValueError(
            f"token batch shape {x.shape[1:]} does not match model (bands={cfg.n_bands}, channels={cfg.n_channels})"
        )
    h = ad.matmul(model.normalize(x), model.spatial_weight) + model.spatial_bias
    if band_mask is not None:
        m = np.asarray(band_mask, dtype=np.float64)[..., None]
        h = h * (1.0 - m) + model.mask_token * m
    return h + model.pos


def forward(embedded: Tensor, model: DecoderModel, padding_mask: np.ndarray | None = None, check_finite: bool = True):
    """Conformer stack -> (class logits (B, C), band reconstructions (B, D, N))."""
    def check(t: Tensor, where: str):
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(where)

    prefix = {"i": 0}

    def named(t, where):
        check(t, f"block{prefix['i']}.{where}")

    if check_finite:
        check(embedded, "spatial_encode")
    x = embedded
    for i, block in enumerate(model.blocks):
        prefix["i"] = i
        x = block(x, padding_mask, named if check_finite else None)
        if check_finite:
            check(x, f"block{i}.norm")
    if padding_mask is None:
        pooled = x.mean(axis=1)
    else:
        keep = 1.0 - np.asarray(padding_mask, dtype=np.float64)
        pooled = (x * keep[..., None]).sum(axis=1) / keep.sum(axis=1, keepdims=True)
    logits = model.head(pooled)
    recon = model.recon(x)
    if check_finite:
        check(logits, "head")
        check(recon, "reconstruction_head")
    return logits, recon


def loss(logits, labels, reconstruction, targets, band_mask, alpha: float = 0.5, beta: float = 0.5) -> Tensor:
    """alpha * cross-entropy + beta * MSE over masked bands (batch means)."""
    logits = ad.as_tensor(logits)
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    labels = np.atleast_1d(np.asarray(labels, dtype=int))
    b, c = logits.shape
    onehot = np.zeros((b, c))
    onehot[np.arange(b), labels] = 1.0
    ce = -(ad.log_softmax(logits, axis=-1) * onehot).sum() * (1.0 / b)
    total = ce * alpha
    mask = None if band_mask is None else np.asarray(band_mask, dtype=np.float64)
    if beta > 0:
        if mask is None or mask.sum() == 0:
            warnings.warn("no masked bands; reconstruction term dropped", RuntimeWarning, stacklevel=2)
        else:
            rec = ad.as_tensor(reconstruction)
            if rec.ndim == 2:
                rec = rec.reshape(1, *rec.shape)
            tgt = np.asarray(targets, dtype=np.float64).reshape(rec.shape)
            mask = mask.reshape(rec.shape[:2])
            diff = rec - tgt
            per_band = (diff * diff).mean(axis=-1)
            mse = (per_band * mask).sum() * (1.0 / mask.sum())
            total = total + mse * beta
    return total


# ---------------------------------------------------------------------------
# datasets, training, evaluation
# ---------------------------------------------------------------------------
@dataclass
class FeatureDataset:
    features: np.ndarray  # (n, N, D)
    labels: np.ndarray
    sessions: np.ndarray
    subjects: np.ndarray
    class_names: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> FeatureDataset:
        idx = np.asarray(idx)
        if idx.size == 0:
            idx = idx.astype(int)
        return FeatureDataset(self.features[idx], self.labels[idx], self.sessions[idx], self.subjects[idx], self.class_names)

    def with_labels(self, labels) -> FeatureDataset:
        return FeatureDataset(self.features, np.asarray(labels), self.sessions, self.subjects, self.class_names)


def split_by_session(ds: FeatureDataset, n_val: int, n_test: int = 0) -> tuple[FeatureDataset, ...]:
    """Hold out whole sessions: the last ``n_test`` for test, the ``n_val`` before them for validation."""
    sessions = sorted(set(ds.sessions.tolist()))
    if n_val + n_test >= len(sessions):
        raise ValueError(f"need more than {n_val + n_test} sessions to split, have {len(sessions)}")
    test_s = set(sessions[len(sessions) - n_test :]) if n_test else set()
    val_s = set(sessions[len(sessions) - n_test - n_val : len(sessions) - n_test])
    tr = [i for i, s in enumerate(ds.sessions) if s not in val_s | test_s]
    va = [i for i, s in enumerate(ds.sessions) if s in val_s]
    te = [i for i, s in enumerate(ds.sessions) if s in test_s]
    parts = (ds.subset(tr), ds.subset(va))
    return parts + (ds.subset(te),) if n_test else parts


def sample_band_mask(rng: np.random.Generator, batch: int, n_bands: int, rate: float) -> np.ndarray:
    n_mask = int(round(rate * n_bands))
    if rate > 0:
        n_mask = max(n_mask, 1)
    mask = np.zeros((batch, n_bands), dtype=bool)
    for i in range(batch):
        mask[i, rng.permutation(n_bands)[:n_mask]] = True
    return mask


def predict_logits(model: DecoderModel, features: np.ndarray, batch_size: int = 256) -> np.ndarray:
    tokens = features_to_tokens(features)
    out = []
    with ad.no_grad():
        for s in range(0, len(tokens), batch_size):
            logits, _ = forward(spatial_encode(tokens[s : s + batch_size], model), model)
            out.append(logits.data)
    return np.concatenate(out) if out else np.zeros((0, model.config.n_classes))


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    steps: int = 0

    def write_csv(self, path) -> None:
        keys = ["epoch", "train_loss", "train_loss_start", "val_top1", "lr"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore")
            w.writeheader()
            for row in self.epochs:
                w.writerow(row)


def train(
    train_set: FeatureDataset,
    val_set: FeatureDataset,
    config: DecoderConfig,
    schedule: TrainSchedule,
    seed: int = 0,
) -> tuple[DecoderModel, TrainLog]:
    """AdamW training with the warm-up/decay schedule; returns the best-validation model."""
    if len(train_set) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(seed)
    model = DecoderModel(config, seed=seed)
    model.fit_normalization(train_set.features)
    opt = ad.AdamW(model.parameters(), lr=schedule.initial_lr, weight_decay=schedule.weight_decay)
    tokens = features_to_tokens(train_set.features)
    targets = model.normalize(tokens)
    n = len(tokens)
    bs = min(schedule.batch_size, n)
    steps_per_epoch = math.ceil(n / bs)
    total = steps_per_epoch * schedule.epochs
    tlog = TrainLog()
    best_acc, best_state = -1.0, None
    step = 0
    for ep in range(schedule.epochs):
        model.train()
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, bs):
            idx = order[s : s + bs]
            mask = sample_band_mask(rng, len(idx), config.n_bands, config.mask_rate)
            lr = schedule.lr(step, total)
            emb = spatial_encode(tokens[idx], model, mask)
            logits, recon = forward(emb, model, check_finite=False)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                value = loss(logits, train_set.labels[idx], recon, targets[idx], mask, config.alpha, config.beta)
            if not np.isfinite(value.data):
                raise NonFiniteError("loss", step=step, seed=seed)
            opt.zero_grad()
            value.backward()
            ad.clip_grad_norm(opt.params, schedule.grad_clip)
            opt.step(lr)
            losses.append(value.item())
            step += 1
        model.eval()
        val_acc = float(np.mean(predict_logits(model, val_set.features).argmax(1) == val_set.labels)) if len(val_set) else float("nan")
        tlog.epochs.append(
            {"epoch": ep, "train_loss": float(np.mean(losses)), "train_loss_start": losses[0], "val_top1": val_acc, "lr": lr}
        )
        log.info("epoch %d loss %.4f val_top1 %.4f", ep, np.mean(losses), val_acc)
        if not len(val_set) or val_acc > best_acc:
            best_acc = val_acc
            best_state = model.state_dict()
            tlog.best_epoch = ep
    tlog.steps = step
    model.load_state_dict(best_state)
    model.eval()
    return model, tlog


def topk_predictions(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k highest logits per row; equal logits favour the lower class index."""
    order = np.argsort(-np.asarray(logits), axis=1, kind="stable")
    return order[:, : min(k, logits.shape[1])]


@dataclass
class EvalReport:
    top1: float
    top3: float
    confusion: np.ndarray  # rows = truth
    per_subject: dict[str, tuple[float, float]]
    class_names: tuple[str, ...] = ()
    n_trials: int = 0

    @property
    def n_classes(self) -> int:
        return self.confusion.shape[0]


def report_from_logits(
    logits: np.ndarray,
    labels: np.ndarray,
    subjects: Sequence[str],
    class_names: Sequence[str] = (),
) -> EvalReport:
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=int)
    if len(labels) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    c = logits.shape[1]
    top = topk_predictions(logits, 3)
    hit1 = top[:, 0] == labels
    hit3 = np.any(top == labels[:, None], axis=1)
    conf = np.zeros((c, c), dtype=int)
    np.add.at(conf, (labels, top[:, 0]), 1)
    subjects = np.asarray(subjects)
    per = {
        str(s): (float(hit1[subjects == s].mean()), float(hit3[subjects == s].mean()))
        for s in sorted(set(subjects.tolist()))
    }
    return EvalReport(float(hit1.mean()), float(hit3.mean()), conf, per, tuple(class_names), len(labels))


def evaluate(
    model: DecoderModel,
    dataset: FeatureDataset,
    class_subset: Sequence[int] | None = None,
) -> EvalReport:
    """Top-1/top-3 and confusion; ``class_subset`` restricts both trials and candidate classes."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    logits = predict_logits(model, dataset.features)
    labels = dataset.labels
    subjects = dataset.subjects
    names = dataset.class_names
    if class_subset is not None:
        class_subset = list(class_subset)
        keep = np.isin(labels, class_subset)
        remap = {c: i for i, c in enumerate(class_subset)}
        logits = logits[keep][:, class_subset]
        labels = np.array([remap[x] for x in labels[keep]], dtype=int)
        subjects = subjects[keep]
        names = tuple(names[c] for c in class_subset) if names else ()
    return report_from_logits(logits, labels, subjects, names)


def write_accuracy_table(reports: dict[str, EvalReport], path, model_name: str = "Conformer (%)") -> None:
    """Subjects as columns; one block per (metric, vocabulary size), like a paper results table.

    ``reports`` maps a vocabulary label such as "6 words" to its report.
    """
    subjects = sorted({s for r in reports.values() for s in r.per_subject})
    rows = [["Subject"] + subjects]
    for k, metric in ((0, "Accuracy@Top 1"), (1, "Accuracy@Top 3")):
        for label, rep in reports.items():
            rows.append([f"{metric} ({label})"] + [""] * len(subjects))
            rows.append([model_name] + [f"{100 * rep.per_subject[s][k]:.2f}" if s in rep.per_subject else "" for s in subjects])
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)


def write_confusion_csv(report: EvalReport, path) -> None:
    names = list(report.class_names) or [str(i) for i in range(report.n_classes)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["truth\\pred"] + names)
        for name, row in zip(names, report.confusion):
            w.writerow([name] + [int(v) for v in row])


def save_decoder(model: DecoderModel, path) -> None:
    tensors = dict(model.state_dict())
    tensors.update({f"buffer.{k}": v for k, v in model.buffers().items()})
    save_tensors(path, asdict(model.config), tensors, kind="decoder")


def load_decoder(path) -> DecoderModel:
    cfg, tensors = load_tensors(path, kind="decoder")
    model = DecoderModel(DecoderConfig(**cfg))
    model.norm_mean = tensors.pop("buffer.norm_mean")
    model.norm_std = tensors.pop("buffer.norm_std")
    model.load_state_dict(tensors)
    return model.eval()
