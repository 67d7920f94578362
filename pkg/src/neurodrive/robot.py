"""Robot description and the reference trajectories the controller tracks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HUMAN_JOINTS = ("l_hip", "l_knee", "r_hip", "r_knee", "l_shoulder", "l_elbow", "r_shoulder", "r_elbow")
HUMAN_LIMITS = np.array(
    [[-1.2, 1.2], [0.0, 2.2], [-1.2, 1.2], [0.0, 2.2], [-2.5, 2.5], [0.0, 2.4], [-2.5, 2.5], [0.0, 2.4]]
)


@dataclass(frozen=True, eq=False)
class RobotSpec:
    joint_names: tuple[str, ...]
    joint_limits: np.ndarray  # n x 2, lower < upper
    velocity_limits: np.ndarray
    torque_limits: np.ndarray
    inertia: np.ndarray
    damping: np.ndarray
    kp: np.ndarray
    kd: np.ndarray
    joint_map: np.ndarray  # n x len(HUMAN_JOINTS)
    joint_offset: np.ndarray
    link_length: float = 0.4
    control_rate: float = 50.0
    substeps: int = 4

    def __post_init__(self):
        n = len(self.joint_names)
        if n < 1:
            raise ValueError("robot needs at least one joint")
        for name in ("joint_limits", "velocity_limits", "torque_limits", "inertia", "damping", "kp", "kd", "joint_map", "joint_offset"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.joint_limits.shape != (n, 2) or np.any(self.joint_limits[:, 1] <= self.joint_limits[:, 0]):
            raise ValueError("joint_limits must be n x 2 with lower < upper")
        for name in ("velocity_limits", "torque_limits", "inertia"):
            v = getattr(self, name)
            if v.shape != (n,) or np.any(v <= 0):
                raise ValueError(f"{name} must be {n} positive values")
        if self.joint_map.shape != (n, len(HUMAN_JOINTS)):
            raise ValueError("joint_map must be n_joints x n_human_joints")
        if self.control_rate <= 0 or self.substeps < 1:
            raise ValueError("control_rate must be positive and substeps >= 1")

    @property
    def n_joints(self) -> int:
        return len(self.joint_names)

    @property
    def dt(self) -> float:
        return 1.0 / self.control_rate

    @property
    def n_end_effectors(self) -> int:
        return max(self.n_joints // 2, 1)

    def end_effectors(self, q: np.ndarray) -> np.ndarray:
        """Planar two-link FK over consecutive joint pairs, shape (..., n_ee, 3).

        A trailing unpaired joint forms a one-link chain.
        """
        q = np.asarray(q, dtype=float)
        L = self.link_length
        out = []
        for i in range(0, self.n_joints, 2):
            a = q[..., i]
            if i + 1 < self.n_joints:
                b = a + q[..., i + 1]
                x = L * np.sin(a) + L * np.sin(b)
                z = -L * np.cos(a) - L * np.cos(b)
            else:
                x, z = L * np.sin(a), -L * np.cos(a)
            out.append(np.stack([x, np.zeros_like(x), z], axis=-1))
        return np.stack(out, axis=-2)

    def clamp(self, q: np.ndarray) -> np.ndarray:
        return np.clip(q, self.joint_limits[:, 0], self.joint_limits[:, 1])

    @classmethod
    def desk(cls, **kw) -> RobotSpec:
        """4-joint planar chain pair (two legs of hip + knee)."""
        n = 4
        jmap = np.zeros((n, len(HUMAN_JOINTS)))
        jmap[np.arange(n), np.arange(n)] = 1.0
        base = dict(
            joint_names=HUMAN_JOINTS[:4],
            joint_limits=HUMAN_LIMITS[:4],
            velocity_limits=np.full(n, 12.0),
            torque_limits=np.full(n, 30.0),
            inertia=np.full(n, 0.05),
            damping=np.full(n, 0.1),
            kp=np.full(n, 20.0),
            kd=np.full(n, 1.0),
            joint_map=jmap,
            joint_offset=np.zeros(n),
        )
        base.update(kw)
        return cls(**base)

    @classmethod
    def paper_scale(cls, **kw) -> RobotSpec:
        """20 actuated joints: 6 per leg, 4 per arm."""
        names = []
        for side in ("l", "r"):
            names += [f"{side}_hip_yaw", f"{side}_hip_roll", f"{side}_hip_pitch", f"{side}_knee", f"{side}_ankle_pitch", f"{side}_ankle_roll"]
        for side in ("l", "r"):
            names += [f"{side}_shoulder_pitch", f"{side}_shoulder_roll", f"{side}_shoulder_yaw", f"{side}_elbow"]
        n = len(names)
        h = {name: i for i, name in enumerate(HUMAN_JOINTS)}
        jmap = np.zeros((n, len(HUMAN_JOINTS)))
        limits = np.tile([-0.6, 0.6], (n, 1))
        for side in ("l", "r"):
            i = names.index
            jmap[i(f"{side}_hip_pitch"), h[f"{side}_hip"]] = 1.0
            jmap[i(f"{side}_knee"), h[f"{side}_knee"]] = 1.0
            # keep the foot level: ankle compensates hip + knee pitch
            jmap[i(f"{side}_ankle_pitch"), h[f"{side}_hip"]] = -1.0
            jmap[i(f"{side}_ankle_pitch"), h[f"{side}_knee"]] = -1.0
            jmap[i(f"{side}_shoulder_pitch"), h[f"{side}_shoulder"]] = 1.0
            jmap[i(f"{side}_elbow"), h[f"{side}_elbow"]] = 1.0
            limits[i(f"{side}_hip_pitch")] = HUMAN_LIMITS[h[f"{side}_hip"]]
            limits[i(f"{side}_knee")] = HUMAN_LIMITS[h[f"{side}_knee"]]
            limits[i(f"{side}_ankle_pitch")] = [-1.5, 1.5]
            limits[i(f"{side}_shoulder_pitch")] = HUMAN_LIMITS[h[f"{side}_shoulder"]]
            limits[i(f"{side}_elbow")] = HUMAN_LIMITS[h[f"{side}_elbow"]]
        base = dict(
            joint_names=tuple(names),
            joint_limits=limits,
            velocity_limits=np.full(n, 12.0),
            torque_limits=np.full(n, 60.0),
            inertia=np.full(n, 0.05),
            damping=np.full(n, 0.1),
            kp=np.full(n, 20.0),
            kd=np.full(n, 1.0),
            joint_map=jmap,
            joint_offset=np.zeros(n),
        )
        base.update(kw)
        return cls(**base)


@dataclass(eq=False)
class ReferenceTrajectory:
    label: str
    control_rate: float
    q: np.ndarray  # T x n
    qd: np.ndarray  # T x n
    end_effector: np.ndarray  # T x E x 3, from the source motion
    contacts: np.ndarray  # T x F bool
    joint_names: tuple[str, ...] = ()
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.q.shape[0]

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self)) / self.control_rate

    @classmethod
    def static(cls, pose, n_frames: int, control_rate: float = 50.0, label: str = "static", joint_names=()) -> ReferenceTrajectory:
        pose = np.asarray(pose, dtype=float)
        return cls(
            label,
            control_rate,
            np.tile(pose, (n_frames, 1)),
            np.zeros((n_frames, len(pose))),
            np.zeros((n_frames, 4, 3)),
            np.ones((n_frames, 2), dtype=bool),
            tuple(joint_names),
        )
