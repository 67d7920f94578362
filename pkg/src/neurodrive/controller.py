"""Tracking controller: toy joint dynamics, rewards, AMP discriminator and PPO.

The environment is vectorised: every state array carries a leading batch axis
so many episodes step together.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Linear, Module, Tensor, parameter
from .robot import ReferenceTrajectory, RobotSpec
from .tensorio import load_tensors, save_tensors

log = logging.getLogger(__name__)

ROOT_DIM = 6  # linear + angular
GRAVITY = np.array([0.0, 0.0, -1.0])
REWARD_TERMS = ("tracking", "style", "action_rate", "velocity", "acceleration", "torque")


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, what: str):
        super().__init__(f"non-finite {what} at iteration {step}")
        self.step = step


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------
@dataclass
class EnvState:
    q: np.ndarray  # B x n
    qd: np.ndarray
    last_action: np.ndarray
    root_vel: np.ndarray  # B x 6, current
    root_vel_avg: np.ndarray  # B x 6, exponential average
    gravity: np.ndarray  # B x 3, base frame
    ee_target: np.ndarray  # B x E x 3
    contacts: np.ndarray  # B x F desired contact flags
    fault: np.ndarray  # B bool

    @classmethod
    def rest(cls, robot: RobotSpec, q=None, qd=None, batch: int = 1, n_ee: int = 4, n_feet: int = 2) -> EnvState:
        n = robot.n_joints
        q = np.broadcast_to(np.zeros(n) if q is None else np.asarray(q, dtype=float), (batch, n)).copy()
        qd = np.broadcast_to(np.zeros(n) if qd is None else np.asarray(qd, dtype=float), (batch, n)).copy()
        return cls(
            q,
            qd,
            q.copy(),
            np.zeros((batch, ROOT_DIM)),
            np.zeros((batch, ROOT_DIM)),
            np.tile(GRAVITY, (batch, 1)),
            np.zeros((batch, n_ee, 3)),
            np.zeros((batch, n_feet), dtype=bool),
            np.zeros(batch, dtype=bool),
        )

    def kinetic_energy(self, robot: RobotSpec) -> np.ndarray:
        return 0.5 * np.sum(robot.inertia * self.qd**2, axis=-1)


def pd_torque(robot: RobotSpec, q: np.ndarray, qd: np.ndarray, target: np.ndarray) -> np.ndarray:
    tau = robot.kp * (target - q) - robot.kd * qd
    return np.clip(tau, -robot.torque_limits, robot.torque_limits)


def integrate(robot: RobotSpec, q: np.ndarray, qd: np.ndarray, torque_fn: Callable) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Semi-implicit Euler over ``robot.substeps``; returns (q, qd, mean applied torque)."""
    h = robot.dt / robot.substeps
    lo, hi = robot.joint_limits[:, 0], robot.joint_limits[:, 1]
    tau_sum = np.zeros_like(q)
    for _ in range(robot.substeps):
        tau = torque_fn(q, qd)
        tau_sum += tau
        qdd = (tau - robot.damping * qd) / robot.inertia
        qd = np.clip(qd + h * qdd, -robot.velocity_limits, robot.velocity_limits)
        q = q + h * qd
        # inelastic joint stops
        hit_lo, hit_hi = q < lo, q > hi
        q = np.clip(q, lo, hi)
        qd = np.where((hit_lo & (qd < 0)) | (hit_hi & (qd > 0)), 0.0, qd)
    return q, qd, tau_sum / robot.substeps


def _advance(robot: RobotSpec, state: EnvState, q, qd, action) -> EnvState:
    # toy root motion: the body moves opposite to feet that are in contact
    ee_old = robot.end_effectors(state.q)
    ee_new = robot.end_effectors(q)
    foot_vx = (ee_new[..., 0] - ee_old[..., 0]) / robot.dt
    n_feet = min(state.contacts.shape[-1], foot_vx.shape[-1])
    w = state.contacts[..., :n_feet].astype(float)
    lin_x = -np.sum(w * foot_vx[..., :n_feet], axis=-1) / np.maximum(w.sum(axis=-1), 1.0)
    root = np.zeros_like(state.root_vel)
    root[..., 0] = lin_x
    alpha = min(robot.dt / 0.5, 1.0)
    avg = (1 - alpha) * state.root_vel_avg + alpha * root
    fault = state.fault | ~np.all(np.isfinite(q), axis=-1) | ~np.all(np.isfinite(qd), axis=-1)
    return replace(state, q=q, qd=qd, last_action=np.asarray(action, dtype=float), root_vel=root, root_vel_avg=avg, fault=fault)


def env_step(robot: RobotSpec, state: EnvState, action) -> tuple[EnvState, np.ndarray]:
    """PD toward target angles ``action``; returns (next state, applied torque)."""
    action = np.asarray(action, dtype=float)
    if action.shape[-1] != robot.n_joints:
        raise ValueError(f"action has {action.shape[-1]} entries, robot has {robot.n_joints} joints")
    q, qd, tau = integrate(robot, state.q, state.qd, lambda q, qd: pd_torque(robot, q, qd, action))
    return _advance(robot, state, q, qd, action), tau


def apply_torque(robot: RobotSpec, state: EnvState, torque) -> EnvState:
    """Open-loop torque (clipped to limits) instead of PD; for dynamics checks."""
    torque = np.clip(np.asarray(torque, dtype=float), -robot.torque_limits, robot.torque_limits)
    q, qd, _ = integrate(robot, state.q, state.qd, lambda q, qd: np.broadcast_to(torque, q.shape))
    return _advance(robot, state, q, qd, state.last_action)


def observation(robot: RobotSpec, state: EnvState, q_ref: np.ndarray, phase: np.ndarray) -> np.ndarray:
    """o_t = [root avg vel, root vel, gravity, q, qd, last action, q_ref, phase, ee targets, contacts]."""
    b = state.q.shape[0]
    return np.concatenate(
        [
            state.root_vel_avg,
            state.root_vel,
            state.gravity,
            state.q,
            state.qd,
            state.last_action,
            q_ref,
            np.reshape(phase, (b, 1)),
            state.ee_target.reshape(b, -1),
            state.contacts.astype(float),
        ],
        axis=-1,
    )


def observation_size(robot: RobotSpec, n_ee: int = 4, n_feet: int = 2) -> int:
    """Proprioceptive part is 16 + 4 n (96 for 20 joints); task terms follow."""
    return 2 * ROOT_DIM + 3 + 4 * robot.n_joints + 1 + 3 * n_ee + n_feet


def amp_features(robot: RobotSpec, q: np.ndarray, qd: np.ndarray) -> np.ndarray:
    """s^I: joint positions, joint velocities, end-effector positions."""
    ee = robot.end_effectors(q)
    return np.concatenate([q, qd, ee.reshape(*ee.shape[:-2], -1)], axis=-1)


def amp_feature_size(robot: RobotSpec) -> int:
    return 2 * robot.n_joints + 3 * robot.n_end_effectors


# ---------------------------------------------------------------------------
# rewards and discriminator
# ---------------------------------------------------------------------------
def style_reward(d):
    """max(0, 1 - (d - 1)^2 / 4)."""
    d = np.asarray(d, dtype=float)
    out = np.maximum(0.0, 1.0 - 0.25 * (d - 1.0) ** 2)
    return float(out) if out.ndim == 0 else out


def regularization_rewards(action, last_action, qd, qdd, torque) -> tuple:
    """Action-rate, joint velocity, joint acceleration and torque rewards (last axis is joints)."""
    a = np.asarray(action, dtype=float) - np.asarray(last_action, dtype=float)
    r_rate = np.exp(-np.linalg.norm(a, axis=-1))
    r_vel = np.exp(-np.sum(np.asarray(qd, dtype=float) ** 2, axis=-1))
    r_acc = np.exp(-np.sum(np.asarray(qdd, dtype=float) ** 2, axis=-1))
    r_tau = np.exp(-np.linalg.norm(np.asarray(torque, dtype=float), axis=-1))
    return r_rate, r_vel, r_acc, r_tau


def tracking_reward(q, q_ref):
    return np.exp(-np.sum((np.asarray(q) - np.asarray(q_ref)) ** 2, axis=-1))


@dataclass(frozen=True)
class RewardWeights:
    tracking: float = 0.5
    style: float = 0.5
    action_rate: float = 0.1
    velocity: float = 0.05
    acceleration: float = 0.05
    torque: float = 0.05

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"reward weight {k} must be >= 0")

    def total(self) -> float:
        return sum(asdict(self).values())


def reward_terms(q, q_ref, d, action, last_action, qd, qdd, torque) -> dict[str, np.ndarray]:
    r_rate, r_vel, r_acc, r_tau = regularization_rewards(action, last_action, qd, qdd, torque)
    return {
        "tracking": tracking_reward(q, q_ref),
        "style": style_reward(d),
        "action_rate": r_rate,
        "velocity": r_vel,
        "acceleration": r_acc,
        "torque": r_tau,
    }


def total_reward(terms: dict, weights: RewardWeights = RewardWeights()):
    w = asdict(weights)
    return sum(w[k] * np.asarray(terms[k], dtype=float) for k in REWARD_TERMS)


class Discriminator(Module):
    """tanh MLP over concatenated (s_t^I, s_{t+1}^I)."""

    def __init__(self, feature_dim: int, hidden: int = 64, seed: int = 0, grad_penalty: float = 5.0):
        rng = np.random.default_rng(seed)
        self.feature_dim = feature_dim
        self.hidden = hidden
        self.grad_penalty = grad_penalty
        self.l1 = Linear(2 * feature_dim, hidden, rng)
        self.l2 = Linear(hidden, hidden, rng)
        self.out = Linear(hidden, 1, rng, scale=0.1)

    def __call__(self, pairs) -> Tensor:
        h = ad.tanh(self.l1(pairs))
        h = ad.tanh(self.l2(h))
        return self.out(h).reshape(-1)

    def score(self, pairs: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self(np.asarray(pairs, dtype=float)).data


def amp_loss(real_pairs, policy_pairs, disc: Callable, grad_penalty: float) -> Tensor:
    """Least-squares GAN loss with a gradient penalty on reference samples."""
    real_pairs = np.asarray(real_pairs, dtype=float)
    policy_pairs = np.asarray(policy_pairs, dtype=float)
    if len(real_pairs) == 0 or len(policy_pairs) == 0:
        raise ValueError("amp_loss needs non-empty reference and policy batches")
    real_in = Tensor(real_pairs, requires_grad=True)
    d_real = disc(real_in)
    d_policy = disc(Tensor(policy_pairs))
    loss = 0.5 * ((d_real - 1.0) ** 2).mean() + 0.5 * ((d_policy + 1.0) ** 2).mean()
    if grad_penalty:
        (g,) = ad.grad(d_real.sum(), [real_in], create_graph=True, allow_unused=True)
        if g is not None:
            loss = loss + grad_penalty * (g * g).sum(axis=-1).mean()
    return loss


# ---------------------------------------------------------------------------
# policy, value, PPO
# ---------------------------------------------------------------------------
class Policy(Module):
    """Gaussian policy; the mean is a residual on the next reference pose."""

    def __init__(self, obs_dim: int, n_act: int, hidden: int = 64, seed: int = 0, init_std: float = 0.2, action_scale: float = 0.5):
        rng = np.random.default_rng(seed)
        self.obs_dim, self.n_act, self.hidden = obs_dim, n_act, hidden
        self.action_scale = action_scale
        self.l1 = Linear(obs_dim, hidden, rng)
        self.l2 = Linear(hidden, hidden, rng)
        self.out = Linear(hidden, n_act, rng, scale=0.01)
        self.log_std = parameter(np.full(n_act, math.log(init_std)))

    def mean(self, obs, q_ref) -> Tensor:
        h = ad.tanh(self.l2(ad.tanh(self.l1(obs))))
        return self.out(h) * self.action_scale + np.asarray(q_ref, dtype=float)

    def log_prob(self, actions: np.ndarray, mean: Tensor) -> Tensor:
        z = (actions - mean) * ad.exp(-self.log_std)
        return -0.5 * (z * z).sum(axis=-1) - self.log_std.sum() - 0.5 * self.n_act * math.log(2 * math.pi)

    def act(self, obs, q_ref, rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Sample (or the mean when ``rng`` is None); returns (action, log-prob)."""
        with ad.no_grad():
            mu = self.mean(obs, q_ref)
            if rng is None:
                a = mu.data.copy()
            else:
                a = mu.data + np.exp(self.log_std.data) * rng.standard_normal(mu.shape)
            return a, self.log_prob(a, mu).data


class ValueNet(Module):
    def __init__(self, obs_dim: int, hidden: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed + 1)
        self.l1 = Linear(obs_dim, hidden, rng)
        self.l2 = Linear(hidden, hidden, rng)
        self.out = Linear(hidden, 1, rng)

    def __call__(self, obs) -> Tensor:
        return self.out(ad.tanh(self.l2(ad.tanh(self.l1(obs))))).reshape(-1)


class RandomPolicy:
    """Uniform random targets within joint limits; a baseline for comparisons."""

    def __init__(self, robot: RobotSpec, seed: int = 0):
        self.robot = robot
        self.rng = np.random.default_rng(seed)

    def act(self, obs, q_ref, rng=None):
        lo, hi = self.robot.joint_limits[:, 0], self.robot.joint_limits[:, 1]
        a = self.rng.uniform(lo, hi, size=np.shape(q_ref))
        return a, np.zeros(len(a))


def discounted_returns(rewards: Sequence[float], gamma: float) -> np.ndarray:
    out = np.zeros(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def gae(rewards: np.ndarray, values: np.ndarray, last_value: np.ndarray, dones: np.ndarray, gamma: float, lam: float):
    """Generalised advantage estimates over a T x B rollout; returns (advantages, returns)."""
    t_len = rewards.shape[0]
    adv = np.zeros_like(rewards)
    acc = np.zeros_like(last_value)
    next_v = last_value
    for t in range(t_len - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_v * live - values[t]
        acc = delta + gamma * lam * live * acc
        adv[t] = acc
        next_v = values[t]
    return adv, adv + values


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    epochs: int = 4
    minibatch: int = 256
    policy_lr: float = 1e-3
    value_lr: float = 1e-3
    max_grad_norm: float = 1.0


@dataclass
class PpoBatch:
    obs: np.ndarray
    q_ref: np.ndarray
    actions: np.ndarray
    log_prob: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray


def policy_kl(policy: Policy, before: dict, obs, q_ref) -> float:
    """Mean KL(old || new) between diagonal Gaussians at the given observations."""
    old = Policy(policy.obs_dim, policy.n_act, policy.hidden)
    old.load_state_dict(before)
    with ad.no_grad():
        m0, m1 = old.mean(obs, q_ref).data, policy.mean(obs, q_ref).data
    s0, s1 = old.log_std.data, policy.log_std.data
    kl = s1 - s0 + (np.exp(2 * s0) + (m0 - m1) ** 2) / (2 * np.exp(2 * s1)) - 0.5
    return float(np.mean(np.sum(kl, axis=-1)))


def ppo_update(policy: Policy, value: ValueNet, batch: PpoBatch, cfg: PpoConfig, opt_pi, opt_v, rng) -> dict:
    n = len(batch.obs)
    adv = batch.advantages
    std = adv.std()
    adv = (adv - adv.mean()) / std if std > 1e-8 else adv - adv.mean()
    stats = {"policy_loss": 0.0, "value_loss": 0.0}
    count = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for s in range(0, n, cfg.minibatch):
            idx = order[s : s + cfg.minibatch]
            mu = policy.mean(batch.obs[idx], batch.q_ref[idx])
            ratio = ad.exp(policy.log_prob(batch.actions[idx], mu) - batch.log_prob[idx])
            a = adv[idx]
            clipped = np.clip(ratio.data, 1 - cfg.clip, 1 + cfg.clip)
            # min(r A, clip(r) A): take the clipped branch (constant) where it is smaller
            use_clip = clipped * a < ratio.data * a
            surrogate = ratio * np.where(use_clip, 0.0, a) + np.where(use_clip, clipped * a, 0.0)
            pi_loss = -surrogate.mean()
            opt_pi.zero_grad()
            pi_loss.backward()
            ad.clip_grad_norm(opt_pi.params, cfg.max_grad_norm)
            opt_pi.step()

            v_loss = ((value(batch.obs[idx]) - batch.returns[idx]) ** 2).mean()
            opt_v.zero_grad()
            v_loss.backward()
            ad.clip_grad_norm(opt_v.params, cfg.max_grad_norm)
            opt_v.step()
            stats["policy_loss"] += pi_loss.item()
            stats["value_loss"] += v_loss.item()
            count += 1
    return {k: v / max(count, 1) for k, v in stats.items()}


# ---------------------------------------------------------------------------
# environment wrapper and rollouts
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class EnvConfig:
    horizon: int = 100
    init_noise: float = 0.1  # rad, start-state perturbation during training
    weights: RewardWeights = RewardWeights()


class TrackingEnv:
    def __init__(self, robot: RobotSpec, cfg: EnvConfig = EnvConfig()):
        self.robot = robot
        self.cfg = cfg

    def obs_dim(self, reference: ReferenceTrajectory) -> int:
        return observation_size(self.robot, reference.end_effector.shape[1], reference.contacts.shape[1])

    def reset(self, references: Sequence[ReferenceTrajectory], starts: np.ndarray, noise: float = 0.0, rng=None) -> EnvState:
        q = np.stack([r.q[s] for r, s in zip(references, starts)])
        qd = np.stack([r.qd[s] for r, s in zip(references, starts)])
        if noise and rng is not None:
            q = self.robot.clamp(q + noise * rng.standard_normal(q.shape))
        st = EnvState.rest(self.robot, batch=len(references), n_ee=references[0].end_effector.shape[1], n_feet=references[0].contacts.shape[1])
        return replace(st, q=q, qd=qd, last_action=q.copy())


@dataclass
class Transition:
    obs: np.ndarray
    action: np.ndarray
    reward: float
    next_obs: np.ndarray
    done: bool
    amp_pair: tuple[np.ndarray, np.ndarray]
    terms: dict = field(default_factory=dict)


@dataclass
class Simulation:
    obs: np.ndarray  # T x B x obs
    q_ref: np.ndarray  # T x B x n
    actions: np.ndarray
    log_prob: np.ndarray  # T x B
    rewards: np.ndarray
    dones: np.ndarray
    q: np.ndarray  # T x B x n, after each step
    target: np.ndarray  # T x B x n, reference pose the step aimed at
    amp_pairs: np.ndarray  # T x B x 2F
    terms: dict
    last_obs: np.ndarray
    n_steps: np.ndarray  # B, steps before done


def simulate(policy, env: TrackingEnv, references: Sequence[ReferenceTrajectory], starts, horizon: int, rng=None, disc=None, noise: float = 0.0) -> Simulation:
    """Step one episode per reference in lockstep; ``rng`` None gives the deterministic mean policy."""
    robot = env.robot
    b = len(references)
    starts = np.asarray(starts, dtype=int)
    lengths = np.array([len(r) for r in references])
    state = env.reset(references, starts, noise, rng)
    prev_qd = state.qd.copy()
    rec = {k: [] for k in ("obs", "q_ref", "actions", "log_prob", "rewards", "dones", "q", "target", "amp")}
    terms_acc = {k: [] for k in REWARD_TERMS}
    done = np.zeros(b, dtype=bool)
    n_steps = np.full(b, horizon)

    def ref_at(idx):
        idx = idx % lengths
        return (
            np.stack([r.q[i] for r, i in zip(references, idx)]),
            np.stack([r.end_effector[i] for r, i in zip(references, idx)]),
            np.stack([r.contacts[i] for r, i in zip(references, idx)]),
        )

    for t in range(horizon):
        q_next, ee, contacts = ref_at(starts + t + 1)
        state = replace(state, ee_target=ee, contacts=contacts)
        phase = ((starts + t) % lengths) / lengths
        obs = observation(robot, state, q_next, phase)
        action, logp = policy.act(obs, q_next, rng)
        feat0 = amp_features(robot, state.q, state.qd)
        new_state, tau = env_step(robot, state, action)
        qdd = (new_state.qd - state.qd) / robot.dt
        feat1 = amp_features(robot, new_state.q, new_state.qd)
        pair = np.concatenate([feat0, feat1], axis=-1)
        d = disc.score(pair) if disc is not None else np.ones(b)
        terms = reward_terms(new_state.q, q_next, d, action, state.last_action, new_state.qd, qdd, tau)
        r = total_reward(terms, env.cfg.weights)
        fault = new_state.fault
        r = np.where(fault, 0.0, r)
        newly = fault & ~done
        n_steps[newly] = np.minimum(n_steps[newly], t + 1)
        done = done | fault
        rec["obs"].append(obs)
        rec["q_ref"].append(q_next)
        rec["actions"].append(action)
        rec["log_prob"].append(logp)
        rec["rewards"].append(r)
        rec["dones"].append(fault.astype(float))
        rec["q"].append(new_state.q)
        rec["target"].append(q_next)
        rec["amp"].append(pair)
        for k in REWARD_TERMS:
            terms_acc[k].append(np.broadcast_to(terms[k], (b,)))
        prev_qd = new_state.qd
        if fault.any():
            # freeze faulted episodes at a finite state so the batch keeps stepping
            new_state = replace(new_state, q=np.where(fault[:, None], state.q, new_state.q), qd=np.where(fault[:, None], 0.0, new_state.qd))
        state = new_state
        if done.all():
            break
    q_next, ee, contacts = ref_at(starts + len(rec["obs"]) + 1)
    state = replace(state, ee_target=ee, contacts=contacts)
    last_obs = observation(robot, state, q_next, ((starts + len(rec["obs"])) % lengths) / lengths)
    arr = {k: np.stack(v) for k, v in rec.items()}
    return Simulation(
        arr["obs"], arr["q_ref"], arr["actions"], arr["log_prob"], arr["rewards"], arr["dones"], arr["q"], arr["target"],
        arr["amp"], {k: np.stack(v) for k, v in terms_acc.items()}, last_obs, n_steps,
    )


def tracking_rmse(sim: Simulation, episode: int | None = None) -> float:
    err = sim.q - sim.target
    if episode is not None:
        err = err[: sim.n_steps[episode], episode]
    return float(np.sqrt(np.mean(err**2)))


def rollout(policy, env: TrackingEnv, reference: ReferenceTrajectory, horizon: int, disc=None, start: int = 0) -> tuple[list[Transition], dict]:
    """Deterministic single-episode rollout; metrics hold joint RMSE and mean reward terms."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    sim = simulate(policy, env, [reference], [start], horizon, rng=None, disc=disc)
    n = int(sim.n_steps[0])
    half = sim.amp_pairs.shape[-1] // 2
    transitions = []
    for t in range(min(n, sim.obs.shape[0])):
        nxt = sim.obs[t + 1, 0] if t + 1 < sim.obs.shape[0] else sim.last_obs[0]
        transitions.append(
            Transition(
                sim.obs[t, 0], sim.actions[t, 0], float(sim.rewards[t, 0]), nxt, bool(sim.dones[t, 0]),
                (sim.amp_pairs[t, 0, :half], sim.amp_pairs[t, 0, half:]), {k: float(v[t, 0]) for k, v in sim.terms.items()},
            )
        )
    metrics = {"rmse": tracking_rmse(sim, 0), "return": float(sim.rewards[:n, 0].sum()), "steps": n}
    metrics.update({f"mean_{k}": float(v[:n, 0].mean()) for k, v in sim.terms.items()})
    return transitions, metrics


def reference_pairs(robot: RobotSpec, reference: ReferenceTrajectory, n: int, rng) -> np.ndarray:
    idx = rng.integers(0, len(reference) - 1, size=n)
    f0 = amp_features(robot, reference.q[idx], reference.qd[idx])
    f1 = amp_features(robot, reference.q[idx + 1], reference.qd[idx + 1])
    return np.concatenate([f0, f1], axis=-1)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class ControllerConfig:
    iterations: int = 60
    n_envs: int = 16
    horizon: int = 100
    ppo: PpoConfig = PpoConfig()
    hidden: int = 64
    init_std: float = 0.2
    action_scale: float = 0.5
    disc_hidden: int = 64
    disc_lr: float = 1e-3
    disc_batches: int = 4
    disc_batch_size: int = 128
    grad_penalty: float = 5.0
    disc_warmup: int = 40  # discriminator-only iterations before policy updates
    use_style: bool = True
    max_seconds: float | None = None


@dataclass
class ControllerLog:
    rows: list = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def quartile_means(self, name: str) -> list[float]:
        col = self.column(name)
        if len(col) < 4:
            raise ValueError(f"need at least 4 logged iterations for quartiles, have {len(col)}")
        return [float(c.mean()) for c in np.array_split(col, 4)]

    def write_csv(self, path) -> None:
        if not self.rows:
            raise ValueError("empty training log")
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(self.rows[0]))
            w.writeheader()
            w.writerows(self.rows)


def rl_train(env: TrackingEnv, references: Sequence[ReferenceTrajectory], cfg: ControllerConfig = ControllerConfig(), seed: int = 0):
    """PPO on the weighted reward, alternating with discriminator updates.

    Returns (policy, discriminator, log).
    """
    import time

    if not references:
        raise ValueError("rl_train needs at least one reference trajectory")
    robot = env.robot
    rng = np.random.default_rng(seed)
    obs_dim = env.obs_dim(references[0])
    policy = Policy(obs_dim, robot.n_joints, cfg.hidden, seed, cfg.init_std, cfg.action_scale)
    value = ValueNet(obs_dim, cfg.hidden, seed)
    disc = Discriminator(amp_feature_size(robot), cfg.disc_hidden, seed + 2, cfg.grad_penalty)
    opt_pi = ad.AdamW(policy.parameters(), lr=cfg.ppo.policy_lr, weight_decay=0.0)
    opt_v = ad.AdamW(value.parameters(), lr=cfg.ppo.value_lr, weight_decay=0.0)
    opt_d = ad.AdamW(disc.parameters(), lr=cfg.disc_lr, weight_decay=0.0)
    tlog = ControllerLog()
    t0 = time.perf_counter()

    def update_disc(policy_pairs):
        total = 0.0
        for _ in range(cfg.disc_batches):
            # one reference motion type per discriminator batch
            ref = references[rng.integers(0, len(references))]
            real = reference_pairs(robot, ref, cfg.disc_batch_size, rng)
            fake = policy_pairs[rng.integers(0, len(policy_pairs), size=cfg.disc_batch_size)]
            loss = amp_loss(real, fake, disc, disc.grad_penalty)
            opt_d.zero_grad()
            loss.backward()
            opt_d.step()
            total += loss.item() / cfg.disc_batches
        return total

    def collect():
        ref_idx = rng.integers(0, len(references), size=cfg.n_envs)
        refs = [references[i] for i in ref_idx]
        starts = np.array([rng.integers(0, len(r)) for r in refs])
        return simulate(policy, env, refs, starts, cfg.horizon, rng=rng, disc=disc if cfg.use_style else None, noise=env.cfg.init_noise)

    if cfg.use_style:
        for _ in range(cfg.disc_warmup):
            sim = collect()
            update_disc(sim.amp_pairs.reshape(-1, sim.amp_pairs.shape[-1]))
    env_steps = 0
    for it in range(cfg.iterations):
        sim = collect()
        if not np.all(np.isfinite(sim.rewards)):
            raise TrainingDivergedError(it, "reward")
        t_len, b = sim.rewards.shape
        env_steps += t_len * b
        with ad.no_grad():
            values = value(sim.obs.reshape(t_len * b, -1)).data.reshape(t_len, b)
            last_v = value(sim.last_obs).data
        adv, ret = gae(sim.rewards, values, last_v, sim.dones, cfg.ppo.gamma, cfg.ppo.gae_lambda)
        flat = lambda a: a.reshape(t_len * b, *a.shape[2:])
        batch = PpoBatch(flat(sim.obs), flat(sim.q_ref), flat(sim.actions), flat(sim.log_prob), flat(adv), flat(ret))
        stats = ppo_update(policy, value, batch, cfg.ppo, opt_pi, opt_v, rng)

        disc_loss = update_disc(flat(sim.amp_pairs)) if cfg.use_style else 0.0
        if not (np.isfinite(disc_loss) and np.isfinite(stats["policy_loss"]) and np.isfinite(stats["value_loss"])):
            raise TrainingDivergedError(it, "loss")
        row = {
            "iteration": it,
            "env_steps": env_steps,
            "return": float(sim.rewards.sum(axis=0).mean()),
            "disc_loss": disc_loss,
            "policy_loss": stats["policy_loss"],
            "value_loss": stats["value_loss"],
            "rmse": tracking_rmse(sim),
            "action_std": float(np.exp(policy.log_std.data).mean()),
        }
        row.update({f"mean_{k}": float(v.mean()) for k, v in sim.terms.items()})
        tlog.rows.append(row)
        log.debug("iter %d return %.3f rmse %.4f", it, row["return"], row["rmse"])
        if cfg.max_seconds is not None and time.perf_counter() - t0 > cfg.max_seconds:
            log.warning("controller training stopped by time budget after %d iterations", it + 1)
            break
    return policy, disc, tlog


def save_controller(path, policy: Policy, disc: Discriminator) -> None:
    cfg = {
        "policy": {"obs_dim": policy.obs_dim, "n_act": policy.n_act, "hidden": policy.hidden, "action_scale": policy.action_scale},
        "disc": {"feature_dim": disc.feature_dim, "hidden": disc.hidden, "grad_penalty": disc.grad_penalty},
    }
    tensors = {f"policy.{k}": v for k, v in policy.state_dict().items()}
    tensors.update({f"disc.{k}": v for k, v in disc.state_dict().items()})
    save_tensors(path, cfg, tensors, kind="controller")


def load_controller(path) -> tuple[Policy, Discriminator]:
    cfg, tensors = load_tensors(path, kind="controller")
    policy = Policy(**cfg["policy"])
    policy.load_state_dict({k[7:]: v for k, v in tensors.items() if k.startswith("policy.")})
    disc = Discriminator(**cfg["disc"])
    disc.load_state_dict({k[5:]: v for k, v in tensors.items() if k.startswith("disc.")})
    return policy, disc
