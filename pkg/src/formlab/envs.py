"""Desk-scale fixed-length continuous-control environments.

Three substitutes for heavyweight physics benchmarks, each a value-semantic
state machine with episodes of exactly T steps (no early termination) and
observations that include velocities so single-observation conditioning is
informative:

* ``lingauss``  - linear-Gaussian dynamics with an analytic LQR expert and
  closed-form conditional next-state densities (the verification workhorse).
* ``point_mass`` - damped 2D point mass driven toward a per-episode goal.
* ``reacher2``  - torque-controlled 2-link arm reaching a planar goal.

Plus the distractor augmentation wrapper: binary patterns appended to the
observation, constant within an episode, pool-constrained during the demo
phase and unconstrained during imitation.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

from .common import StructuralError

ENV_NAMES = ("point_mass", "reacher2", "lingauss")


@dataclass(frozen=True)
class EnvSpec:
    name: str
    obs_dim: int
    action_dim: int
    episode_len: int = 100


# --- lingauss constants ----------------------------------------------------
# x' = A x + B a + eps, eps ~ N(0, noise^2 I). B selects the first two state
# dims so that Gaussian action noise keeps the conditional covariance
# diagonal (closed-form KL stays a diagonal-Gaussian computation).

LINGAUSS_A = np.array(
    [
        [0.95, 0.05, 0.0, 0.0],
        [-0.05, 0.95, 0.0, 0.0],
        [0.0, 0.0, 0.90, 0.05],
        [0.0, 0.0, -0.05, 0.90],
    ]
)
LINGAUSS_B = np.array(
    [
        [0.5, 0.0],
        [0.0, 0.5],
        [0.0, 0.0],
        [0.0, 0.0],
    ]
)
LINGAUSS_NOISE = 0.01
LINGAUSS_Q = np.eye(4)
LINGAUSS_R = np.eye(2)
LINGAUSS_REWARD_SCALE = 0.25

# --- point_mass constants ---------------------------------------------------

PM_DT = 0.1
PM_ACCEL = 1.0
PM_DAMPING = 0.5
PM_NOISE = 0.02          # velocity process noise per step
PM_REWARD_WIDTH = 0.15
PM_POS_BOX = 1.0
PM_VEL_BOX = 0.5
PM_GOAL_BOX = 0.8

# --- reacher2 constants ------------------------------------------------------

R2_DT = 0.1
R2_TORQUE = 2.0
R2_DAMPING = 1.0
R2_NOISE = 0.02
R2_LINK = 0.5
R2_GOAL_BOX = 0.7
R2_VEL_BOX = 1.0
R2_REWARD_WIDTH = 0.15


def make_spec(name: str, episode_len: int = 100) -> EnvSpec:
    if name == "lingauss":
        return EnvSpec(name, obs_dim=4, action_dim=2, episode_len=episode_len)
    if name == "point_mass":
        return EnvSpec(name, obs_dim=6, action_dim=2, episode_len=episode_len)
    if name == "reacher2":
        return EnvSpec(name, obs_dim=6, action_dim=2, episode_len=episode_len)
    raise StructuralError(f"unknown environment {name!r}")


class Env:
    """Base: pure transition functions over array states, rng passed in."""

    spec: EnvSpec

    def __init__(self, spec: EnvSpec):
        self.spec = spec
        self.clip_warnings = 0

    def reset(self, rng: np.random.Generator):
        raise NotImplementedError

    def step(self, state: np.ndarray, action: np.ndarray, rng: np.random.Generator):
        raise NotImplementedError

    def _check_action(self, action: np.ndarray) -> np.ndarray:
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (self.spec.action_dim,):
            raise StructuralError(f"action shape {action.shape} != ({self.spec.action_dim},)")
        if not np.isfinite(action).all():
            raise StructuralError("non-finite action")
        if np.any(np.abs(action) > 1.0):
            self.clip_warnings += 1
            action = np.clip(action, -1.0, 1.0)
        return action


class LinGauss(Env):
    """x' = A x + B a + eps; task reward is a scaled negative LQR cost.

    Dynamics matrices and the noise level are overridable for tests that
    want identity dynamics or a deterministic invertible system.
    """

    def __init__(self, spec: EnvSpec, a_dyn=None, b_dyn=None, noise=None):
        super().__init__(spec)
        self.a_dyn = LINGAUSS_A if a_dyn is None else np.asarray(a_dyn, dtype=np.float64)
        self.b_dyn = LINGAUSS_B if b_dyn is None else np.asarray(b_dyn, dtype=np.float64)
        self.noise = LINGAUSS_NOISE if noise is None else float(noise)

    def reset(self, rng):
        x = rng.uniform(-1.0, 1.0, size=self.a_dyn.shape[0])
        return x, x.copy()

    def step(self, state, action, rng):
        a = self._check_action(action)
        x = self.a_dyn @ state + self.b_dyn @ a + rng.normal(0.0, self.noise, size=state.shape)
        cost = float(state @ state + a @ a)
        return x, x.copy(), -LINGAUSS_REWARD_SCALE * cost

    def conditional_next(self, state: np.ndarray, action_mean: np.ndarray, action_var: np.ndarray):
        """Closed-form next-state Gaussian induced by a Gaussian action.

        Returns (mean, diagonal variance); valid because B routes each
        action dim to a distinct state dim.
        """
        mean = self.a_dyn @ state + self.b_dyn @ action_mean
        var = np.full(state.shape[0], self.noise**2)
        var[:2] += (self.b_dyn[0, 0] ** 2) * np.asarray(action_var)
        return mean, var


class PointMass(Env):
    """Damped point mass; obs = [pos(2), vel(2), goal(2)]."""

    def __init__(self, spec: EnvSpec, noise=None):
        super().__init__(spec)
        self.noise = PM_NOISE if noise is None else float(noise)

    def reset(self, rng):
        pos = rng.uniform(-PM_POS_BOX, PM_POS_BOX, size=2)
        vel = rng.uniform(-PM_VEL_BOX, PM_VEL_BOX, size=2)
        goal = rng.uniform(-PM_GOAL_BOX, PM_GOAL_BOX, size=2)
        state = np.concatenate([pos, vel, goal])
        return state, state.copy()

    def step(self, state, action, rng):
        a = self._check_action(action)
        pos, vel, goal = state[:2], state[2:4], state[4:6]
        vel = vel + PM_DT * (PM_ACCEL * a - PM_DAMPING * vel) + rng.normal(0.0, self.noise, size=2)
        pos = pos + PM_DT * vel
        new_state = np.concatenate([pos, vel, goal])
        d2 = float(((pos - goal) ** 2).sum())
        reward = float(np.exp(-0.5 * d2 / PM_REWARD_WIDTH**2))
        return new_state, new_state.copy(), reward


class Reacher2(Env):
    """Two-link arm; obs = [theta(2), omega(2), goal(2)]; goal in a box
    inside the reachable disk."""

    def reset(self, rng):
        theta = rng.uniform(-np.pi, np.pi, size=2)
        omega = rng.uniform(-R2_VEL_BOX, R2_VEL_BOX, size=2)
        goal = rng.uniform(-R2_GOAL_BOX, R2_GOAL_BOX, size=2)
        state = np.concatenate([theta, omega, goal])
        return state, state.copy()

    @staticmethod
    def fingertip(theta: np.ndarray) -> np.ndarray:
        x = R2_LINK * np.cos(theta[0]) + R2_LINK * np.cos(theta[0] + theta[1])
        y = R2_LINK * np.sin(theta[0]) + R2_LINK * np.sin(theta[0] + theta[1])
        return np.array([x, y])

    def step(self, state, action, rng):
        a = self._check_action(action)
        theta, omega, goal = state[:2], state[2:4], state[4:6]
        omega = omega + R2_DT * (R2_TORQUE * a - R2_DAMPING * omega) + rng.normal(0.0, R2_NOISE, size=2)
        theta = np.arctan2(np.sin(theta + R2_DT * omega), np.cos(theta + R2_DT * omega))
        new_state = np.concatenate([theta, omega, goal])
        d2 = float(((self.fingertip(theta) - goal) ** 2).sum())
        reward = float(np.exp(-0.5 * d2 / R2_REWARD_WIDTH**2))
        return new_state, new_state.copy(), reward


def make_env(spec: EnvSpec) -> Env:
    cls = {"lingauss": LinGauss, "point_mass": PointMass, "reacher2": Reacher2}[spec.name]
    return cls(spec)


# ---------------------------------------------------------------------------
# Analytic experts
# ---------------------------------------------------------------------------


def solve_dare_iterative(a, b, q, r, tol=1e-13, max_iter=100000):
    """Discrete-time algebraic Riccati equation by fixed-point iteration."""
    p = q.copy()
    for _ in range(max_iter):
        btp = b.T @ p
        gain = np.linalg.solve(r + btp @ b, btp @ a)
        p_next = q + a.T @ p @ (a - b @ gain)
        if np.max(np.abs(p_next - p)) < tol:
            return p_next
        p = p_next
    raise StructuralError("Riccati iteration did not converge (system not stabilizable?)")


def lqr_gain(a, b, q, r) -> np.ndarray:
    p = solve_dare_iterative(a, b, q, r)
    btp = b.T @ p
    return np.linalg.solve(r + btp @ b, btp @ a)


class ScriptedExpert:
    """Gaussian expert: deterministic controller mean plus exploration noise.

    The noise gives demo transitions a well-conditioned conditional density
    for effect-model training (and a target scale for imitators to match).
    """

    def __init__(self, mean_fn, action_dim: int, noise_std: float):
        self.mean_fn = mean_fn
        self.action_dim = action_dim
        self.noise_std = noise_std

    def act(self, obs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return self.mean_fn(obs) + rng.normal(0.0, self.noise_std, size=self.action_dim)

    def action_mean(self, obs: np.ndarray) -> np.ndarray:
        return self.mean_fn(obs)


EXPERT_NOISE_STD = {"lingauss": 0.15, "point_mass": 0.1, "reacher2": 0.1}


def lqr_expert(spec: EnvSpec, noise_std: float | None = None) -> ScriptedExpert:
    """Riccati-optimal linear feedback a = -K x for lingauss."""
    if spec.name != "lingauss":
        raise StructuralError("lqr_expert is defined for lingauss only")
    k = lqr_gain(LINGAUSS_A, LINGAUSS_B, LINGAUSS_Q, LINGAUSS_R)
    if noise_std is None:
        noise_std = EXPERT_NOISE_STD["lingauss"]
    return ScriptedExpert(lambda obs: -(k @ obs), spec.action_dim, noise_std)


def pd_expert(spec: EnvSpec, noise_std: float | None = None) -> ScriptedExpert:
    """Hand-tuned PD controllers for point_mass / reacher2."""
    if noise_std is None:
        noise_std = EXPERT_NOISE_STD[spec.name]
    if spec.name == "point_mass":

        def mean_fn(obs):
            pos, vel, goal = obs[:2], obs[2:4], obs[4:6]
            return np.clip(4.0 * (goal - pos) - 2.0 * vel, -1.0, 1.0)

        return ScriptedExpert(mean_fn, spec.action_dim, noise_std)
    if spec.name == "reacher2":

        def mean_fn(obs):
            theta, omega, goal = obs[:2], obs[2:4], obs[4:6]
            target = _reacher_ik(goal)
            err = np.arctan2(np.sin(target - theta), np.cos(target - theta))
            return np.clip(3.0 * err - 1.2 * omega, -1.0, 1.0)

        return ScriptedExpert(mean_fn, spec.action_dim, noise_std)
    raise StructuralError(f"no scripted expert for {spec.name}")


def _reacher_ik(goal: np.ndarray) -> np.ndarray:
    """Elbow-down inverse kinematics for the 2-link arm."""
    r2 = float(goal @ goal)
    c2 = np.clip((r2 - 2 * R2_LINK**2) / (2 * R2_LINK**2), -1.0, 1.0)
    t2 = np.arccos(c2)
    t1 = np.arctan2(goal[1], goal[0]) - np.arctan2(
        R2_LINK * np.sin(t2), R2_LINK * (1.0 + np.cos(t2))
    )
    return np.array([t1, t2])


def scripted_expert(spec: EnvSpec, noise_std: float | None = None) -> ScriptedExpert:
    if spec.name == "lingauss":
        return lqr_expert(spec, noise_std)
    return pd_expert(spec, noise_std)


# ---------------------------------------------------------------------------
# Distractors
# ---------------------------------------------------------------------------


@dataclass
class DistractorSpec:
    """Pool of binary patterns appended to observations.

    Demo phase draws one pool pattern per episode; imitation phase draws any
    pattern in {0,1}^n per episode. n = 0 disables augmentation.
    """

    n: int
    m: int
    pool: np.ndarray  # (m, n) of {0., 1.}
    seed: int


def make_pool(n: int, m: int, seed: int) -> DistractorSpec:
    if n < 0 or m < 1:
        raise StructuralError("need n >= 0 and m >= 1")
    if n == 0:
        return DistractorSpec(0, 1, np.zeros((1, 0)), seed)
    if m > 2**n:
        raise StructuralError(f"pool size {m} exceeds 2^{n} distinct patterns")
    rng = np.random.default_rng(seed)
    seen = set()
    rows = []
    while len(rows) < m:
        pattern = tuple(int(b) for b in rng.integers(0, 2, size=n))
        if pattern in seen:
            continue
        seen.add(pattern)
        rows.append(pattern)
    return DistractorSpec(n, m, np.array(rows, dtype=np.float64), seed)


def effective_pool_size(n: int, m: int) -> int:
    """Requested pool sizes beyond 2^n saturate at full enumeration."""
    if n == 0:
        return 1
    return min(m, 2**n)


def sample_pattern(spec: DistractorSpec, phase: str, rng: np.random.Generator):
    """Demo phase: uniform over the pool; imitation phase: any pattern."""
    if spec.n == 0:
        return np.zeros(0), -1
    if phase == "demo":
        idx = int(rng.integers(0, spec.m))
        return spec.pool[idx].copy(), idx
    if phase == "imitation":
        return rng.integers(0, 2, size=spec.n).astype(np.float64), -1
    raise StructuralError(f"unknown phase {phase!r}")


def augment(observation: np.ndarray, pattern: np.ndarray) -> np.ndarray:
    """Concatenate base dims then distractor dims, in that fixed order."""
    return np.concatenate([np.asarray(observation, dtype=np.float64), pattern])


class AugmentedEnv:
    """Env wrapper appending a per-episode binary pattern to observations."""

    def __init__(self, env: Env, distractor: DistractorSpec, phase: str):
        self.env = env
        self.distractor = distractor
        self.phase = phase
        self.pattern = None
        self.pattern_id = -1

    @property
    def obs_dim(self) -> int:
        return self.env.spec.obs_dim + self.distractor.n

    @property
    def spec(self) -> EnvSpec:
        return self.env.spec

    def reset(self, rng):
        state, obs = self.env.reset(rng)
        self.pattern, self.pattern_id = sample_pattern(self.distractor, self.phase, rng)
        return state, augment(obs, self.pattern)

    def step(self, state, action, rng):
        state, obs, reward = self.env.step(state, action, rng)
        return state, augment(obs, self.pattern), reward


# ---------------------------------------------------------------------------
# Trajectories and the demo dataset file
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    observations: np.ndarray  # (T+1, D[+N])
    actions: np.ndarray       # (T, A)
    task_rewards: np.ndarray  # (T,)
    env_name: str
    seed: int
    pattern_id: int           # -1 means free / no pool pattern

    def __post_init__(self):
        t = self.actions.shape[0]
        if self.observations.shape[0] != t + 1 or self.task_rewards.shape[0] != t:
            raise StructuralError("trajectory lengths are inconsistent")
        if not np.isfinite(self.observations).all():
            raise StructuralError("non-finite observations")


def rollout_episode(env, policy_act, rng, base_env: Env | None = None) -> Trajectory:
    """Run one fixed-length episode; ``policy_act(obs, rng) -> action``.

    ``env`` may be a raw Env or an AugmentedEnv; the policy sees whatever
    the env emits. Scripted experts act on the base observation only.
    """
    spec = env.spec
    t_len = spec.episode_len
    state, obs = env.reset(rng)
    obs_rows = [obs]
    act_rows, rew_rows = [], []
    for _ in range(t_len):
        action = policy_act(obs, rng)
        state, obs, reward = env.step(state, action, rng)
        obs_rows.append(obs)
        act_rows.append(np.asarray(action, dtype=np.float64))
        rew_rows.append(reward)
    pattern_id = getattr(env, "pattern_id", -1)
    return Trajectory(
        observations=np.array(obs_rows),
        actions=np.array(act_rows),
        task_rewards=np.array(rew_rows),
        env_name=spec.name,
        seed=-1,
        pattern_id=pattern_id,
    )


def expert_act_fn(expert: ScriptedExpert, base_dim: int):
    """Experts ignore appended distractor dims."""

    def act(obs, rng):
        return expert.act(obs[:base_dim], rng)

    return act


# Demo dataset file: text header lines, then per trajectory a pattern-id
# int32 followed by little-endian float32 blocks (observations, actions,
# task rewards). Actions and rewards are consumed only by BC and evaluation.

DATASET_MAGIC = "FORMDEMOS v1"


def save_demos(path, trajectories: list[Trajectory], distractor: DistractorSpec | None = None):
    if not trajectories:
        raise StructuralError("refusing to write an empty demo dataset")
    first = trajectories[0]
    t_len = first.actions.shape[0]
    header = {
        "env": first.env_name,
        "episode_len": t_len,
        "obs_dim": int(first.observations.shape[1]),
        "action_dim": int(first.actions.shape[1]),
        "count": len(trajectories),
        "distractor_n": int(distractor.n) if distractor else 0,
        "distractor_m": int(distractor.m) if distractor else 1,
        "distractor_seed": int(distractor.seed) if distractor else 0,
    }
    buf = io.BytesIO()
    buf.write((DATASET_MAGIC + "\n").encode())
    buf.write((json.dumps(header, sort_keys=True) + "\n").encode())
    for traj in trajectories:
        if traj.actions.shape[0] != t_len:
            raise StructuralError("mixed episode lengths in one dataset")
        buf.write(np.int32(traj.pattern_id).tobytes())
        buf.write(np.ascontiguousarray(traj.observations, dtype="<f4").tobytes())
        buf.write(np.ascontiguousarray(traj.actions, dtype="<f4").tobytes())
        buf.write(np.ascontiguousarray(traj.task_rewards, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_demos(path) -> tuple[list[Trajectory], dict]:
    with open(path, "rb") as f:
        magic = f.readline().decode().rstrip("\n")
        if magic != DATASET_MAGIC:
            raise StructuralError(f"bad dataset header {magic!r} in {path}")
        header = json.loads(f.readline().decode())
        blob = f.read()
    t_len, d, a = header["episode_len"], header["obs_dim"], header["action_dim"]
    rec_bytes = 4 + 4 * ((t_len + 1) * d + t_len * a + t_len)
    if len(blob) != rec_bytes * header["count"]:
        raise StructuralError(f"dataset {path} has wrong payload size")
    out = []
    offset = 0
    for _ in range(header["count"]):
        pattern_id = int(np.frombuffer(blob, dtype=np.int32, count=1, offset=offset)[0])
        offset += 4

        def take(shape):
            nonlocal offset
            n = int(np.prod(shape))
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(shape)
            offset += 4 * n
            return arr.astype(np.float64)

        obs = take(((t_len + 1), d))
        acts = take((t_len, a))
        rews = take((t_len,))
        out.append(
            Trajectory(obs, acts, rews, header["env"], seed=-1, pattern_id=pattern_id)
        )
    return out, header
