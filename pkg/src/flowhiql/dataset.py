"""Offline trajectory datasets, hindsight goal relabeling and batch samplers.

Dataset file layout (ASCII header lines, each '\\n' terminated)::

    FLOWHIQL-DATA 1
    env <name>
    state_dim <int>
    action_dim <int>
    seed <int>
    fraction <float repr>
    n_traj <int>
    lengths <T_0>,<T_1>,...        # actions per trajectory
    END

followed, for each trajectory i in order, by ``(T_i + 1) * state_dim``
little-endian float64 states (row-major) and then ``T_i * action_dim``
little-endian float64 actions.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .envs import GoalEnv, make_env
from .errors import ArgumentError, CheckpointError, ConfigError, DatasetError

SHUFFLE_TAG = 7919


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if len(self.actions) != len(self.states) - 1:
            raise DatasetError("a trajectory needs exactly one action per transition")

    def __len__(self):
        return len(self.actions)


@dataclass
class RelabelConfig:
    p_geom: float = 0.7
    p_uniform: float = 0.2
    p_final: float = 0.1
    gamma: float = 0.99

    def __post_init__(self):
        if min(self.p_geom, self.p_uniform, self.p_final) < 0 or not math.isclose(
            self.p_geom + self.p_uniform + self.p_final, 1.0
        ):
            raise ConfigError("relabel probabilities must be non-negative and sum to one")


@dataclass
class OfflineDataset:
    env_name: str
    trajectories: list
    seed: int = 0
    fraction: float = 1.0

    def __post_init__(self):
        if not self.trajectories:
            raise DatasetError("dataset has no trajectories")
        env = self._env = make_env(self.env_name)
        for tr in self.trajectories:
            if tr.states.shape[1] != env.state_dim or tr.actions.shape[1:] != (env.action_dim,):
                raise ConfigError(f"trajectory dimensions do not match environment {self.env_name!r}")
            if len(tr) < 1:
                raise DatasetError("trajectories need at least one transition")
        self._build_index()

    @property
    def env(self) -> GoalEnv:
        return self._env

    def __len__(self):
        return len(self.trajectories)

    @property
    def n_transitions(self):
        return int(self._lengths.sum())

    def _build_index(self):
        lengths = np.array([len(t) for t in self.trajectories])
        self._lengths = lengths
        self._states = np.concatenate([t.states for t in self.trajectories])
        self._actions = np.concatenate([t.actions for t in self.trajectories])
        self._state_off = np.concatenate([[0], np.cumsum(lengths + 1)[:-1]])
        self._action_off = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        self._traj_of = np.repeat(np.arange(len(lengths)), lengths)
        self._t_of = np.concatenate([np.arange(n) for n in lengths])

    def subset(self, fraction):
        """First ``ceil(fraction * N)`` trajectories of a seed-determined shuffle."""
        if not 0 < fraction <= 1:
            raise ArgumentError(f"fraction must be in (0, 1], got {fraction}")
        order = shuffled_order(len(self.trajectories), self.seed)
        keep = order[: math.ceil(fraction * len(order))]
        return OfflineDataset(self.env_name, [self.trajectories[i] for i in keep], self.seed, fraction * self.fraction)

    # sampling -------------------------------------------------------------
    def _anchor_transitions(self, rng, n):
        if n < 1:
            raise ArgumentError("batch size must be at least 1")
        j = rng.integers(self.n_transitions, size=n)
        return self._traj_of[j], self._t_of[j]

    def _state(self, traj, t):
        return self._states[self._state_off[traj] + t]

    def relabel_indices(self, rng, traj, anchor, relabel: RelabelConfig):
        """Goal indices on the same trajectory at or after ``anchor``."""
        T = self._lengths[traj]
        n = len(traj)
        mode = rng.random(n)
        geom = np.minimum(anchor + rng.geometric(1.0 - relabel.gamma, size=n) - 1, T)
        uniform = anchor + np.floor(rng.random(n) * (T - anchor + 1)).astype(int)
        out = np.where(mode < relabel.p_geom, geom, np.where(mode < relabel.p_geom + relabel.p_uniform, uniform, T))
        return out

    def sample_value_batch(self, rng, n, relabel=None):
        relabel = relabel or RelabelConfig()
        env = self.env
        traj, t = self._anchor_transitions(rng, n)
        gi = self.relabel_indices(rng, traj, t + 1, relabel)
        # goals are positions; dropping velocity keeps them in the form eval goals take
        s, s_next, g = self._state(traj, t), self._state(traj, t + 1), env.goal_of(self._state(traj, gi))
        terminal = env.success(s, g)
        return {
            "s": s, "s_next": s_next, "g": g,
            "r": np.where(terminal, 0.0, -1.0), "terminal": terminal.astype(np.float64),
            "traj": traj, "t": t, "g_index": gi,
        }

    def sample_high_batch(self, rng, n, k, relabel=None):
        if k < 1:
            raise ArgumentError("subgoal horizon k must be at least 1")
        relabel = relabel or RelabelConfig()
        traj, t = self._anchor_transitions(rng, n)
        tk = np.minimum(t + k, self._lengths[traj])
        gi = self.relabel_indices(rng, traj, tk, relabel)
        return {
            "s": self._state(traj, t), "s_k": self._state(traj, tk), "g": self.env.goal_of(self._state(traj, gi)),
            "traj": traj, "t": t, "tk": tk, "g_index": gi,
        }

    def sample_low_batch(self, rng, n, k):
        if k < 1:
            raise ArgumentError("subgoal horizon k must be at least 1")
        traj, t = self._anchor_transitions(rng, n)
        tk = np.minimum(t + k, self._lengths[traj])
        return {
            "s": self._state(traj, t), "a": self._actions[self._action_off[traj] + t],
            "s_next": self._state(traj, t + 1), "s_k": self._state(traj, tk),
            "traj": traj, "t": t, "tk": tk,
        }

    # persistence ------------------------------------------------------------
    def to_bytes(self) -> bytes:
        env = self.env
        header = [
            "FLOWHIQL-DATA 1",
            f"env {self.env_name}",
            f"state_dim {env.state_dim}",
            f"action_dim {env.action_dim}",
            f"seed {self.seed}",
            f"fraction {self.fraction!r}",
            f"n_traj {len(self.trajectories)}",
            "lengths " + ",".join(str(len(t)) for t in self.trajectories),
            "END",
        ]
        parts = [("\n".join(header) + "\n").encode("ascii")]
        for tr in self.trajectories:
            parts.append(tr.states.astype("<f8").tobytes())
            parts.append(tr.actions.astype("<f8").tobytes())
        return b"".join(parts)

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    def checksum(self):
        return hashlib.sha256(self.to_bytes()).hexdigest()


def shuffled_order(n, seed):
    return np.random.default_rng([seed, SHUFFLE_TAG]).permutation(n)


def dataset_from_bytes(blob: bytes, expect_env=None) -> OfflineDataset:
    try:
        lines, pos = [], 0
        while True:
            nl = blob.index(b"\n", pos)
            line = blob[pos:nl].decode("ascii")
            pos = nl + 1
            if line == "END":
                break
            lines.append(line)
            if len(lines) > 16:
                raise ValueError("header too long")
        if lines[0] != "FLOWHIQL-DATA 1":
            raise ValueError("bad magic line")
        fields = dict(line.split(" ", 1) for line in lines[1:])
        env_name = fields["env"]
        state_dim, action_dim = int(fields["state_dim"]), int(fields["action_dim"])
        seed, fraction, n_traj = int(fields["seed"]), float(fields["fraction"]), int(fields["n_traj"])
        lengths = [int(v) for v in fields["lengths"].split(",")] if n_traj else []
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed dataset header: {exc}") from exc
    env = make_env(env_name)
    if (state_dim, action_dim) != (env.state_dim, env.action_dim):
        raise ConfigError(
            f"dataset dimensions ({state_dim}, {action_dim}) do not match environment "
            f"{env_name!r} ({env.state_dim}, {env.action_dim})"
        )
    if expect_env is not None and env_name != expect_env:
        raise ConfigError(f"dataset was generated for {env_name!r}, not {expect_env!r}")
    if len(lengths) != n_traj:
        raise CheckpointError("trajectory count does not match the lengths line")
    expected = sum((T + 1) * state_dim + T * action_dim for T in lengths) * 8
    if len(blob) - pos != expected:
        raise CheckpointError(f"dataset payload has {len(blob) - pos} bytes, expected {expected}")
    flat = np.frombuffer(blob, dtype="<f8", offset=pos).astype(np.float64)
    trajs, off = [], 0
    for T in lengths:
        ns, na = (T + 1) * state_dim, T * action_dim
        states = flat[off : off + ns].reshape(T + 1, state_dim)
        actions = flat[off + ns : off + ns + na].reshape(T, action_dim)
        trajs.append(Trajectory(states, actions))
        off += ns + na
    return OfflineDataset(env_name, trajs, seed, fraction)


def load_dataset(path, expect_env=None) -> OfflineDataset:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read dataset {path}: {exc}") from exc
    return dataset_from_bytes(blob, expect_env)


def generate_dataset(env: GoalEnv, n_traj, seed, behavior=None) -> OfflineDataset:
    """Scripted noisy waypoint-following data; trajectory ``i`` uses rng ``[seed, i]``.

    ``behavior(env, rng) -> (states, actions)`` overrides the environment's
    own scripted policy.
    """
    if n_traj < 1:
        raise ArgumentError("n_traj must be at least 1")
    behavior = behavior or (lambda e, rng: e.rollout_behavior(rng))
    trajs = []
    for i in range(n_traj):
        states, actions = behavior(env, np.random.default_rng([seed, i]))
        trajs.append(Trajectory(states, actions))
    return OfflineDataset(env.name, trajs, seed, 1.0)


def replay(env: GoalEnv, traj: Trajectory):
    """Re-simulate ``traj`` from its first state under its recorded actions."""
    states = [traj.states[0]]
    for a in traj.actions:
        states.append(env.dynamics(states[-1], a))
    return np.array(states)
