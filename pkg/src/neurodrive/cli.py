"""Command-line pipeline: one subcommand per stage over a shared run directory.

Layout: ``<run-dir>/<stage>/`` holds each stage's outputs plus ``manifest.json``.
Exit codes: 0 ok, 1 I/O error, 2 config error, 3 missing upstream artifact.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
import typing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import closedloop as cl
from . import controller as ctl
from . import decoder as dec
from . import motion as mot
from .datasets import plan_sessions, recording_features, ProtocolConfig
from .preprocess import FilterSpec, PreprocessConfig, run_chain
from .robot import RobotSpec
from .signals import (
    COMMON_SIX,
    FULL_24,
    RecordingMeta,
    SessionTiming,
    SignatureSpec,
    dump_signature_config,
    generate_session,
    load_recording,
    load_signature_config,
    save_recording,
)
from .tensorio import load_tensors, save_tensors

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("neurodrive")

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_MISSING = 0, 1, 2, 3
VOCABULARIES = {"common6": COMMON_SIX, "full24": FULL_24}


class ConfigError(ValueError):
    pass


class MissingArtifactError(FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class DataConfig:
    n_subjects: int = 1
    n_channels: int = 16
    sample_rate: float = 250.0
    vocabulary: typing.Any = "common6"  # preset name or explicit word list
    n_blocks: int = 4
    sessions_per_block: int = 4
    reps_per_session: int = 8
    snr: float = 3.0
    noise_floor: float = 1.0
    line_amplitude: float = 2.0
    baseline_sec: float = 10.0
    fixation_sec: float = 1.5
    action_sec: float = 2.0
    rest_sec: float = 0.5
    window_sec: float = 2.0

    def words(self) -> tuple[str, ...]:
        if isinstance(self.vocabulary, str):
            if self.vocabulary not in VOCABULARIES:
                raise ConfigError(f"unknown vocabulary {self.vocabulary!r}; use one of {sorted(VOCABULARIES)} or a list")
            return VOCABULARIES[self.vocabulary]
        words = tuple(self.vocabulary)
        if len(words) < 2 or len(set(words)) != len(words):
            raise ConfigError("vocabulary needs at least two distinct words")
        return words

    def timing(self) -> SessionTiming:
        return SessionTiming(self.baseline_sec, self.fixation_sec, self.action_sec, self.rest_sec)


@dataclass(frozen=True)
class FeatureConfig:
    n_bands: int = 16
    cycles: float = 7.0


@dataclass(frozen=True)
class DecoderStage:
    model: dec.DecoderConfig = dec.DecoderConfig()
    schedule: dec.TrainSchedule = dec.TrainSchedule.desk()
    n_val: int = 3
    n_test: int = 3


@dataclass(frozen=True)
class MotionStage:
    vq: mot.VqConfig = mot.VqConfig()
    vq_epochs: int = 200
    lm_steps: int = 300
    max_len: int = 40


@dataclass(frozen=True)
class ControllerStage:
    robot: str = "desk"
    training: ctl.ControllerConfig = ctl.ControllerConfig(iterations=150)
    env: ctl.EnvConfig = ctl.EnvConfig()
    keywords: typing.Any = None  # default: the whole vocabulary
    eval_horizon: int = 100


@dataclass(frozen=True)
class ClosedLoopStage:
    base_snr: float = 0.5
    feedback_gain: float = 1.5
    fatigue_decay: float = 1.0
    minutes: float = 3.0
    attempt_sec: float = 120.0
    budget_k: typing.Any = None  # overrides minutes / attempt_sec
    episodes_per_intent: int = 20
    e2e_trials: int = 1  # end-to-end rollouts per intent

    def budget(self) -> float:
        return float(self.budget_k) if self.budget_k is not None else cl.attempt_budget(self.minutes, self.attempt_sec)


@dataclass(frozen=True)
class PipelineConfig:
    preset: str = "desk"
    seed: int = 0
    data: DataConfig = DataConfig()
    preprocess: PreprocessConfig = PreprocessConfig()
    features: FeatureConfig = FeatureConfig()
    decoder: DecoderStage = DecoderStage()
    motion: MotionStage = MotionStage()
    controller: ControllerStage = ControllerStage()
    closedloop: ClosedLoopStage = ClosedLoopStage()

    def robot(self) -> RobotSpec:
        if self.controller.robot == "desk":
            return RobotSpec.desk()
        if self.controller.robot == "paper-scale":
            return RobotSpec.paper_scale()
        raise ConfigError(f"unknown robot {self.controller.robot!r}")

    def meta(self) -> RecordingMeta:
        d = self.data
        return RecordingMeta("S01", d.n_channels, d.sample_rate, d.words())

    def protocol(self) -> ProtocolConfig:
        d = self.data
        return ProtocolConfig(
            d.n_subjects, d.n_blocks, d.sessions_per_block, d.reps_per_session, d.timing(), d.window_sec,
            self.features.n_bands, self.features.cycles,
        )


def preset_config(name: str) -> PipelineConfig:
    if name == "desk":
        return PipelineConfig()
    if name == "paper-scale":
        words = len(FULL_24)
        return PipelineConfig(
            preset=name,
            data=DataConfig(n_subjects=10, n_channels=128, sample_rate=1000.0, vocabulary="full24", reps_per_session=16),
            decoder=DecoderStage(dec.DecoderConfig.paper(n_channels=128, n_classes=words), dec.TrainSchedule()),
            controller=ControllerStage(robot="paper-scale"),
        )
    raise ConfigError(f"unknown preset {name!r}; use desk or paper-scale")


def _coerce(value, current, path: str):
    if dataclasses.is_dataclass(current):
        if not isinstance(value, dict):
            raise ConfigError(f"{path} must be a table")
        return apply_overrides(current, value, path)
    if isinstance(value, list):
        return tuple(value)
    if current is None or isinstance(value, dict):
        return value
    if isinstance(current, bool) != isinstance(value, bool):
        raise ConfigError(f"{path} expects {type(current).__name__}, got {value!r}")
    if isinstance(current, float) and isinstance(value, int):
        return float(value)
    if isinstance(current, (int, float, str)) and not isinstance(value, type(current)):
        if isinstance(current, str) and isinstance(value, (list, tuple)):
            return tuple(value)
        raise ConfigError(f"{path} expects {type(current).__name__}, got {value!r}")
    return value


def apply_overrides(obj, overrides: dict, path: str = ""):
    """Pure merge of a nested dict onto a dataclass; unknown keys are rejected."""
    names = {f.name for f in dataclasses.fields(obj)}
    changes = {}
    for key, value in overrides.items():
        where = f"{path}.{key}" if path else key
        if key not in names:
            raise ConfigError(f"unknown config key {where!r}")
        changes[key] = _coerce(value, getattr(obj, key), where)
    try:
        return replace(obj, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value under {path or 'top level'}: {exc}") from exc


def load_config(path: str | None, preset: str | None = None, seed: int | None = None) -> PipelineConfig:
    raw = {}
    if path:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    name = preset or raw.get("preset", "desk")
    cfg = preset_config(name)
    cfg = apply_overrides(cfg, {k: v for k, v in raw.items() if k != "preset"})
    cfg = replace(cfg, preset=name)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    cfg.data.words()
    cfg.robot()
    return cfg


def config_dict(cfg: PipelineConfig) -> dict:
    return json.loads(json.dumps(asdict(cfg), default=list))


# ---------------------------------------------------------------------------
# run directory helpers
# ---------------------------------------------------------------------------
@dataclass
class Context:
    cfg: PipelineConfig
    run_dir: Path
    jobs: int = 1
    strict: bool = False

    def stage_dir(self, stage: str) -> Path:
        d = self.run_dir / stage
        d.mkdir(parents=True, exist_ok=True)
        return d

    def upstream(self, stage: str, name: str = "manifest.json") -> Path:
        p = self.run_dir / stage / name
        if not p.exists():
            raise MissingArtifactError(str(p))
        return p

    @property
    def workers(self) -> int:
        return 1 if self.strict else max(1, self.jobs)


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(directory: Path, stage: str, ctx: Context, files: list[dict], **extra) -> None:
    manifest = {"stage": stage, "seed": ctx.cfg.seed, "preset": ctx.cfg.preset, "files": files, "config": config_dict(ctx.cfg)}
    manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(ctx: Context, stage: str) -> dict:
    return json.loads(ctx.upstream(stage).read_text())


def _file_entry(path: Path, **kw) -> dict:
    return {"path": path.name, "sha256": sha256(path), **kw}


def _map(ctx: Context, fn, items: list):
    if ctx.workers > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=ctx.workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------
def _session_name(plan) -> str:
    m = plan.meta
    return f"{m.subject_id}_block{m.block_id}_session{m.session_id:02d}.ndrc"


def _signatures(cfg: PipelineConfig) -> SignatureSpec:
    d = cfg.data
    sig = SignatureSpec.default(d.words(), d.n_channels, cfg.seed, snr=d.snr)
    return replace(sig, noise_floor=d.noise_floor, line_amplitude=d.line_amplitude)


def _gen_one(args):
    plan, sig, timing, path = args
    rec = generate_session(plan.meta, sig, plan.n_trials, plan.seed, timing=timing)
    save_recording(rec, path)
    return str(path)


def cmd_gen_data(ctx: Context, args) -> None:
    cfg = ctx.cfg
    out = ctx.stage_dir("gen-data")
    sig = _signatures(cfg)
    plans = plan_sessions(cfg.meta(), cfg.protocol(), cfg.seed)
    if not args.dry_run:
        dump_signature_config(sig, cfg.data.words(), out / "signatures.toml")
        _map(ctx, _gen_one, [(p, sig, cfg.data.timing(), out / _session_name(p)) for p in plans])
    files = []
    for p in plans:
        entry = {
            "path": _session_name(p),
            "subject": p.meta.subject_id,
            "block": p.meta.block_id,
            "session": p.meta.session_id,
            "seed": p.seed,
            "n_trials": p.n_trials,
        }
        if not args.dry_run:
            entry["sha256"] = sha256(out / entry["path"])
        files.append(entry)
    write_manifest(out, "gen-data", ctx, files, dry_run=bool(args.dry_run))
    print(f"gen-data: {len(files)} sessions{' (dry run)' if args.dry_run else ''} -> {out}")


def _prep_one(args):
    src, dst, prep, dump_dir = args
    rec = load_recording(src)
    stages = {} if dump_dir else None
    clean, model = run_chain(rec, prep, stages)
    save_recording(clean.with_samples(clean.samples.astype(np.float32)), dst)
    if dump_dir:
        for name, r in stages.items():
            d = Path(dump_dir) / name
            d.mkdir(parents=True, exist_ok=True)
            save_recording(r.with_samples(r.samples.astype(np.float32)), d / Path(dst).name)
    rejected = int(np.sum(model.component_scores > prep.artifact_threshold)) if model is not None else 0
    return rejected


def cmd_preprocess(ctx: Context, args) -> None:
    man = read_manifest(ctx, "gen-data")
    if man.get("dry_run"):
        raise MissingArtifactError(str(ctx.run_dir / "gen-data" / man["files"][0]["path"]))
    src_dir = ctx.run_dir / "gen-data"
    out = ctx.stage_dir("preprocess")
    items = []
    for f in man["files"]:
        src = ctx.upstream("gen-data", f["path"])
        items.append((src, out / f["path"], ctx.cfg.preprocess, str(out / "stages") if args.dump_stages else None))
    rejected = _map(ctx, _prep_one, items)
    files = [_file_entry(out / f["path"], rejected_components=r) for f, r in zip(man["files"], rejected)]
    write_manifest(out, "preprocess", ctx, files, source=str(src_dir.name))
    print(f"preprocess: {len(files)} sessions cleaned -> {out}")


def _features_one(args):
    path, proto = args
    rec = load_recording(path)
    feats, labels = recording_features(rec, proto)
    return feats, labels, rec.meta.session_id, rec.meta.subject_id


def cmd_extract_features(ctx: Context, args) -> None:
    man = read_manifest(ctx, "preprocess")
    proto = ctx.cfg.protocol()
    items = [(ctx.upstream("preprocess", f["path"]), proto) for f in man["files"]]
    parts = _map(ctx, _features_one, items)
    feats = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    sessions = np.concatenate([np.full(len(p[1]), p[2]) for p in parts])
    subjects = [p[3] for p in parts for _ in range(len(p[1]))]
    names = sorted(set(subjects))
    out = ctx.stage_dir("extract-features")
    path = out / "features.ndtk"
    save_tensors(
        path,
        {"class_names": list(ctx.cfg.data.words()), "subjects": names, "sample_rate": ctx.cfg.data.sample_rate},
        {
            "features": feats,
            "labels": labels.astype(float),
            "sessions": sessions.astype(float),
            "subjects": np.array([names.index(s) for s in subjects], dtype=float),
        },
        kind="features",
    )
    write_manifest(out, "extract-features", ctx, [_file_entry(path, n_trials=int(len(labels)), shape=list(feats.shape))])
    print(f"extract-features: {feats.shape[0]} trials x {feats.shape[1]} channels x {feats.shape[2]} bands -> {path}")


def load_feature_dataset(path: Path) -> dec.FeatureDataset:
    cfg, t = load_tensors(path, kind="features")
    subjects = np.array([cfg["subjects"][int(i)] for i in t["subjects"]])
    return dec.FeatureDataset(t["features"], t["labels"].astype(int), t["sessions"].astype(int), subjects, tuple(cfg["class_names"]))


def _splits(ctx: Context, ds: dec.FeatureDataset):
    d = ctx.cfg.decoder
    return dec.split_by_session(ds, d.n_val, d.n_test)


def cmd_train_decoder(ctx: Context, args) -> None:
    ds = load_feature_dataset(ctx.upstream("extract-features", "features.ndtk"))
    tr, va, te = _splits(ctx, ds)
    mcfg = replace(ctx.cfg.decoder.model, n_channels=ds.features.shape[1], n_bands=ds.features.shape[2], n_classes=len(ds.class_names))
    model, tlog = dec.train(tr, va, mcfg, ctx.cfg.decoder.schedule, seed=ctx.cfg.seed)
    out = ctx.stage_dir("train-decoder")
    dec.save_decoder(model, out / "decoder.ndtk")
    tlog.write_csv(out / "train_log.csv")
    split = {
        "train_sessions": sorted(set(tr.sessions.tolist())),
        "val_sessions": sorted(set(va.sessions.tolist())),
        "test_sessions": sorted(set(te.sessions.tolist())),
    }
    (out / "split.json").write_text(json.dumps(split, indent=2) + "\n")
    files = [_file_entry(out / n) for n in ("decoder.ndtk", "train_log.csv", "split.json")]
    write_manifest(out, "train-decoder", ctx, files, best_epoch=tlog.best_epoch, steps=tlog.steps)
    print(f"train-decoder: best epoch {tlog.best_epoch}, val top-1 {tlog.epochs[tlog.best_epoch]['val_top1']:.3f} -> {out}")


def decoder_reports(model: dec.DecoderModel, ds: dec.FeatureDataset) -> dict[str, dec.EvalReport]:
    """Full-vocabulary report, plus the 6-word restriction when a larger vocabulary contains it."""
    reports = {}
    n = len(ds.class_names)
    six = [ds.class_names.index(w) for w in COMMON_SIX if w in ds.class_names]
    if n > len(COMMON_SIX) and len(six) == len(COMMON_SIX):
        reports[f"{len(six)} words"] = dec.evaluate(model, ds, class_subset=six)
    reports[f"{n} words"] = dec.evaluate(model, ds)
    return dict(sorted(reports.items(), key=lambda kv: int(kv[0].split()[0])))


def cmd_eval_decoder(ctx: Context, args) -> None:
    ds = load_feature_dataset(ctx.upstream("extract-features", "features.ndtk"))
    model = dec.load_decoder(ctx.upstream("train-decoder", "decoder.ndtk"))
    split = json.loads(ctx.upstream("train-decoder", "split.json").read_text())
    test = ds.subset(np.flatnonzero(np.isin(ds.sessions, split["test_sessions"])))
    reports = decoder_reports(model, test)
    out = ctx.stage_dir("eval-decoder")
    dec.write_accuracy_table(reports, out / "accuracy_table.csv")
    files = [out / "accuracy_table.csv"]
    summary = {}
    with open(out / "reports.jsonl", "w") as fh:
        for label, rep in reports.items():
            k = label.split()[0]
            dec.write_confusion_csv(rep, out / f"confusion_{k}.csv")
            files.append(out / f"confusion_{k}.csv")
            row = {"vocabulary": label, "top1": rep.top1, "top3": rep.top3, "n_trials": rep.n_trials, "per_subject": rep.per_subject}
            fh.write(json.dumps(row) + "\n")
            summary[label] = {"top1": rep.top1, "top3": rep.top3, "n_trials": rep.n_trials}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    files += [out / "reports.jsonl", out / "summary.json"]
    write_manifest(out, "eval-decoder", ctx, [_file_entry(p) for p in files])
    for label, s in summary.items():
        print(f"eval-decoder [{label}]: top-1 {100 * s['top1']:.2f}%  top-3 {100 * s['top3']:.2f}%  (n={s['n_trials']})")


def cmd_train_motion(ctx: Context, args) -> None:
    words = list(ctx.cfg.data.words())
    m = ctx.cfg.motion
    models, info = mot.train_motion_models(words, m.vq, m.vq_epochs, m.lm_steps, seed=ctx.cfg.seed)
    out = ctx.stage_dir("train-motion")
    models.save(out / "motion.ndtk")
    with open(out / "curves.csv", "w") as fh:
        fh.write("step,vqvae_loss,lm_loss\n")
        for i in range(max(len(info["vq_curve"]), len(info["lm_curve"]))):
            vq = info["vq_curve"][i] if i < len(info["vq_curve"]) else ""
            lm = info["lm_curve"][i] if i < len(info["lm_curve"]) else ""
            fh.write(f"{i},{vq},{lm}\n")
    clips = out / "clips"
    clips.mkdir(exist_ok=True)
    exact = 0
    for w in words:
        mot.write_clip_csv(mot.keyword_to_clip(w), clips / f"{w}.csv")
        gen = models.generate(w, m.max_len)
        exact += gen.meta["tokens"] == info["targets"][w]
        mot.write_clip_csv(gen, clips / f"{w}_generated.csv")
    files = [_file_entry(out / "motion.ndtk"), _file_entry(out / "curves.csv")]
    write_manifest(out, "train-motion", ctx, files, greedy_exact=exact, keywords=words)
    print(f"train-motion: {exact}/{len(words)} keywords regenerate their token sequence exactly -> {out}")


def _controller_keywords(cfg: PipelineConfig) -> list[str]:
    kw = cfg.controller.keywords
    return list(cfg.data.words() if kw is None else kw)


def cmd_train_controller(ctx: Context, args) -> None:
    cfg = ctx.cfg
    robot = cfg.robot()
    words = _controller_keywords(cfg)
    try:
        refs = [mot.retarget(mot.keyword_to_clip(w), robot) for w in words]
    except mot.UnknownKeywordError as exc:
        raise ConfigError(str(exc)) from exc
    env = ctl.TrackingEnv(robot, cfg.controller.env)
    policy, disc, tlog = ctl.rl_train(env, refs, cfg.controller.training, seed=cfg.seed)
    out = ctx.stage_dir("train-controller")
    ctl.save_controller(out / "controller.ndtk", policy, disc)
    tlog.write_csv(out / "training_log.csv")
    evals = {}
    for w, ref in zip(words, refs):
        _, metrics = ctl.rollout(policy, env, ref, min(cfg.controller.eval_horizon, len(ref) - 1), disc)
        evals[w] = metrics
    (out / "rollouts.json").write_text(json.dumps(evals, indent=2, sort_keys=True) + "\n")
    files = [_file_entry(out / n) for n in ("controller.ndtk", "training_log.csv", "rollouts.json")]
    quartiles = tlog.quartile_means("mean_style") if len(tlog.rows) >= 4 else None
    write_manifest(out, "train-controller", ctx, files, keywords=words, style_quartiles=quartiles)
    print("train-controller: " + ", ".join(f"{w} rmse {m['rmse']:.3f}" for w, m in evals.items()))


def _decoder_pipeline(ctx: Context) -> cl.DecoderPipeline:
    model = dec.load_decoder(ctx.upstream("train-decoder", "decoder.ndtk"))
    words, sig = load_signature_config(ctx.upstream("gen-data", "signatures.toml"))
    cfg = ctx.cfg
    meta = RecordingMeta("S01", cfg.data.n_channels, cfg.data.sample_rate, tuple(words))
    timing = SessionTiming(2.0, cfg.data.fixation_sec, cfg.data.action_sec, cfg.data.rest_sec)
    prep = replace(cfg.preprocess, ica=False)
    return cl.DecoderPipeline(model, meta, sig, cfg.data.window_sec, cfg.features.n_bands, cfg.features.cycles, prep, timing)


def cmd_run_closed_loop(ctx: Context, args) -> None:
    cfg = ctx.cfg
    pipe = _decoder_pipeline(ctx)
    policy, disc = ctl.load_controller(ctx.upstream("train-controller", "controller.ndtk"))
    ctx.upstream("train-motion", "motion.ndtk")
    robot = cfg.robot()
    env = ctl.TrackingEnv(robot, cfg.controller.env)
    c = cfg.closedloop
    subject = cl.SubjectModel(c.base_snr, c.feedback_gain, c.fatigue_decay, cfg.seed)
    budget = c.budget()
    logs = []
    for i, intent in enumerate(pipe.vocabulary):
        for e in range(c.episodes_per_intent):
            logs.append(cl.run_attempt_loop(subject, pipe, intent, budget, seed=i * 100003 + e))
    report = cl.success_report(logs)
    out = ctx.stage_dir("run-closed-loop")
    cl.write_attempt_logs(logs, out / "attempts.jsonl")
    cl.write_summary_csv(report, out / "summary.csv")
    e2e = cl.wire_pipeline(pipe, None, (policy, disc, env), robot, cfg.controller.eval_horizon)
    rng = np.random.default_rng(cfg.seed)
    # wall-clock timings go to their own file so e2e.jsonl stays reproducible
    with open(out / "e2e.jsonl", "w") as fh, open(out / "timings.jsonl", "w") as th:
        for intent in pipe.vocabulary:
            for _ in range(c.e2e_trials):
                trial = pipe.trial(intent, cfg.data.snr, int(rng.integers(2**63)))
                res = e2e.run(trial)
                fh.write(json.dumps({"intent": intent, "decoded": res.keyword, "metrics": res.metrics}, sort_keys=True) + "\n")
                th.write(json.dumps({"intent": intent, "timings": res.timings, "total_sec": res.total_sec}, sort_keys=True) + "\n")
    files = [_file_entry(out / n) for n in ("attempts.jsonl", "summary.csv", "e2e.jsonl")]
    write_manifest(out, "run-closed-loop", ctx, files, budget_k=budget, success_rate=report.rate, ci99=list(report.ci99))
    print(f"run-closed-loop: success rate {100 * report.rate:.2f}% over {report.n_episodes} episodes (budget k={budget:.2f})")


def cmd_report(ctx: Context, args) -> None:
    required = [
        ("eval-decoder", "summary.json"),
        ("eval-decoder", "accuracy_table.csv"),
        ("train-controller", "training_log.csv"),
        ("run-closed-loop", "summary.csv"),
    ]
    paths = {k: ctx.upstream(*k) for k in required}
    out = ctx.stage_dir("report")
    acc = json.loads(paths[("eval-decoder", "summary.json")].read_text())
    cl_man = read_manifest(ctx, "run-closed-loop")
    ctl_man = read_manifest(ctx, "train-controller")
    n_classes = len(ctx.cfg.data.words())
    (out / "accuracy_table.csv").write_text(paths[("eval-decoder", "accuracy_table.csv")].read_text())
    with open(out / "success_table.csv", "w") as fh:
        fh.write("system,success_rate_pct,budget_k,episodes\n")
        rows = cl.read_attempt_logs(ctx.upstream("run-closed-loop", "attempts.jsonl"))
        fh.write(f"{n_classes} class,{100 * cl_man['success_rate']:.2f},{cl_man['budget_k']:.3f},{len(rows)}\n")
    rollouts = json.loads(ctx.upstream("train-controller", "rollouts.json").read_text())
    summary = {
        "decoder": acc,
        "closed_loop": {"success_rate": cl_man["success_rate"], "ci99": cl_man["ci99"], "budget_k": cl_man["budget_k"]},
        "controller": {"style_quartiles": ctl_man["style_quartiles"], "rmse": {k: v["rmse"] for k, v in rollouts.items()}},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    files = [_file_entry(out / n) for n in ("accuracy_table.csv", "success_table.csv", "summary.json")]
    write_manifest(out, "report", ctx, files)
    print(f"report -> {out / 'summary.json'}")


STAGES = {
    "gen-data": (cmd_gen_data, "simulate recording sessions"),
    "preprocess": (cmd_preprocess, "band-pass, line-noise removal, re-reference and ICA cleaning"),
    "extract-features": (cmd_extract_features, "epoch trials and compute wavelet band features"),
    "train-decoder": (cmd_train_decoder, "train the keyword decoder"),
    "eval-decoder": (cmd_eval_decoder, "accuracy tables and confusion matrices on held-out sessions"),
    "train-motion": (cmd_train_motion, "fit the motion tokenizer and token language model"),
    "train-controller": (cmd_train_controller, "train the tracking policy and discriminator"),
    "run-closed-loop": (cmd_run_closed_loop, "simulate retry episodes and end-to-end rollouts"),
    "report": (cmd_report, "aggregate results into one summary"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file with overrides for the chosen preset")
    common.add_argument("--preset", choices=("desk", "paper-scale"), help="base configuration (default: desk, or the config file's preset)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for per-session stages")
    common.add_argument("--strict", action="store_true", help="single worker, for byte-identical outputs")
    common.add_argument("--run-dir", help="run directory (default: run/<timestamp>)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser = argparse.ArgumentParser(prog="neurodrive", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in STAGES.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name == "gen-data":
            p.add_argument("--dry-run", action="store_true", help="write the manifest only, no recordings")
        if name == "preprocess":
            p.add_argument("--dump-stages", action="store_true", help="also save each intermediate cleaning stage")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.preset, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    run_dir = Path(args.run_dir) if args.run_dir else Path("run") / time.strftime("%Y%m%d-%H%M%S")
    ctx = Context(cfg, run_dir, args.jobs, args.strict)
    fn, _ = STAGES[args.command]
    try:
        fn(ctx, args)
    except MissingArtifactError as exc:
        print(f"missing upstream artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
