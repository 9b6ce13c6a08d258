"""Desk-scale deterministic goal-reaching environments and scripted experts.

All environments are vectorised: states are ``(n, state_dim)`` arrays and a
single state is accepted wherever a batch is. Goals live in the state space;
success is tested on the position sub-vector ``pos_idx`` only.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


class GoalEnv:
    name = "base"
    state_dim = 2
    action_dim = 2
    pos_idx = np.array([0, 1])
    eps_goal = 0.5
    max_steps = 400
    action_low = -1.0
    action_high = 1.0
    # noise of the scripted behavior policy
    behavior_sigma = 0.2

    def descriptor(self):
        return self.name

    def clip_action(self, a):
        return np.clip(a, self.action_low, self.action_high)

    def position(self, s):
        return np.asarray(s)[..., self.pos_idx]

    def success(self, s, g):
        d = self.position(s) - self.position(g)
        return np.sqrt(np.sum(d * d, axis=-1)) <= self.eps_goal

    def reward(self, s, g):
        return np.where(self.success(s, g), 0.0, -1.0)

    def step(self, s, a, g=None):
        """Deterministic transition. Reward/terminal refer to the *current* state."""
        s = np.asarray(s, dtype=np.float64)
        nxt = self.dynamics(s, self.clip_action(np.asarray(a, dtype=np.float64)))
        if g is None:
            return nxt, None, None
        return nxt, self.reward(s, g), self.success(s, g)

    @property
    def state_radius(self):
        """Upper bound on the Euclidean norm of any reachable state."""
        raise NotImplementedError

    def goal_state(self, pos):
        out = np.zeros(self.state_dim)
        out[self.pos_idx] = pos
        return out

    def goal_of(self, states):
        """Goal states for (batches of) states: positions kept, other coordinates zeroed."""
        states = np.asarray(states, dtype=np.float64)
        out = np.zeros_like(states)
        out[..., self.pos_idx] = states[..., self.pos_idx]
        return out


def env_step(env: GoalEnv, state, action, goal=None):
    return env.step(state, action, goal)


class ChainEnv(GoalEnv):
    """Five nodes on a line at x = -2..2; kinematic point, 2-D action.

    The lateral coordinate ``y`` is a nuisance dimension confined to
    [-0.5, 0.5]; success compares ``x`` only.
    """

    name = "chain"
    state_dim = 2
    action_dim = 2
    pos_idx = np.array([0])
    eps_goal = 0.25
    max_steps = 100
    step_size = 0.25
    n_nodes = 5
    traj_len = 60
    low = np.array([-2.5, -0.5])
    high = np.array([2.5, 0.5])

    def node(self, i):
        return np.array([i - (self.n_nodes - 1) / 2, 0.0])

    def dynamics(self, s, a):
        return np.clip(s + self.step_size * a, self.low, self.high)

    @property
    def state_radius(self):
        return float(np.linalg.norm(self.high))

    def eval_tasks(self):
        return [(self.node(i), self.node(j)) for i in range(self.n_nodes) for j in range(self.n_nodes) if i != j]

    def rollout_behavior(self, rng):
        """Navigate between random nodes for ``traj_len`` steps."""
        s = self.node(rng.integers(self.n_nodes))
        states, actions = [s], []
        target = self.node(rng.integers(self.n_nodes))
        for _ in range(self.traj_len):
            if abs(s[0] - target[0]) < 0.1:
                target = self.node(rng.integers(self.n_nodes))
            a = np.clip(2.0 * (target - s) / self.step_size, -1, 1)
            a = self.clip_action(a + self.behavior_sigma * rng.standard_normal(2))
            s = self.dynamics(s, a)
            states.append(s)
            actions.append(a)
        return np.array(states), np.array(actions)

    def expert_action(self, s, g):
        return self.clip_action(2.0 * (np.asarray(g) - s) / self.step_size)


SIMPLE_MAZE = (
    "#######",
    "#...#.#",
    "#.#.#.#",
    "#.#...#",
    "#.###.#",
    "#.....#",
    "#######",
)

TWO_CORRIDOR_MAZE = (
    "#######",
    "#.....#",
    "#S###G#",
    "#.....#",
    "#######",
)


class PointMazeEnv(GoalEnv):
    """Damped double integrator in a grid maze; state ``(x, y, vx, vy)``.

    ``v' = damping * v + accel * a`` then the position moves by ``v'`` one
    axis at a time; an axis move that would land in a wall cell is cancelled
    and that velocity component zeroed (sliding). Cell ``(r, c)`` is centred
    at ``(c - cx, r - cy)`` with the maze centred on the origin.
    """

    name = "pointmaze"
    state_dim = 4
    action_dim = 2
    pos_idx = np.array([0, 1])
    eps_goal = 0.5
    max_steps = 400
    damping = 0.5
    accel = 0.05
    traj_len = 300
    waypoint_radius = 0.3

    def __init__(self, layout=SIMPLE_MAZE):
        self.layout = tuple(layout)
        self.grid = np.array([[ch != "#" for ch in row] for row in self.layout])
        if len({len(r) for r in self.layout}) != 1:
            raise ConfigError("maze rows must have equal length")
        self.n_rows, self.n_cols = self.grid.shape
        self.cx = (self.n_cols - 1) / 2
        self.cy = (self.n_rows - 1) / 2
        self.free_cells = [tuple(rc) for rc in np.argwhere(self.grid)]
        self.max_speed = self.accel / (1 - self.damping)

    @property
    def state_radius(self):
        corner = max(np.linalg.norm(self.cell_center(c)) for c in self.free_cells) + math.sqrt(0.5)
        return float(math.sqrt(corner**2 + 2 * self.max_speed**2))

    # geometry -----------------------------------------------------------
    def cell_center(self, cell):
        r, c = cell
        return np.array([c - self.cx, r - self.cy])

    def cell_of(self, pos):
        pos = np.asarray(pos)
        c = np.floor(pos[..., 0] + self.cx + 0.5).astype(int)
        r = np.floor(pos[..., 1] + self.cy + 0.5).astype(int)
        return r, c

    def is_free(self, pos):
        r, c = self.cell_of(pos)
        inside = (r >= 0) & (r < self.n_rows) & (c >= 0) & (c < self.n_cols)
        rr = np.clip(r, 0, self.n_rows - 1)
        cc = np.clip(c, 0, self.n_cols - 1)
        return inside & self.grid[rr, cc]

    def dynamics(self, s, a):
        single = s.ndim == 1
        s = np.atleast_2d(s)
        a = np.atleast_2d(a)
        v = self.damping * s[:, 2:4] + self.accel * a
        p = s[:, 0:2].copy()
        for axis in (0, 1):
            trial = p.copy()
            trial[:, axis] += v[:, axis]
            ok = self.is_free(trial)
            p[ok] = trial[ok]
            v[~ok, axis] = 0.0
        out = np.concatenate([p, v], axis=1)
        return out[0] if single else out

    def state_at(self, cell):
        return self.goal_state(self.cell_center(cell))

    # routing ------------------------------------------------------------
    def distances_to(self, goal_cell):
        dist = np.full(self.grid.shape, -1, dtype=int)
        dist[goal_cell] = 0
        queue = deque([goal_cell])
        while queue:
            r, c = queue.popleft()
            for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                nr, nc = r + dr, c + dc
                if self.grid[nr, nc] and dist[nr, nc] < 0:
                    dist[nr, nc] = dist[r, c] + 1
                    queue.append((nr, nc))
        return dist

    def plan(self, start_cell, goal_cell, rng):
        """Shortest cell path, breaking ties between equal-length routes uniformly."""
        dist = self.distances_to(goal_cell)
        path = [tuple(start_cell)]
        while path[-1] != tuple(goal_cell):
            r, c = path[-1]
            options = [
                (r + dr, c + dc)
                for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1))
                if self.grid[r + dr, c + dc] and dist[r + dr, c + dc] == dist[r, c] - 1
            ]
            path.append(options[rng.integers(len(options))] if len(options) > 1 else options[0])
        return path

    def track(self, s, waypoint):
        """Deadbeat velocity controller toward ``waypoint`` (unclipped action)."""
        delta = waypoint - s[0:2]
        dist = np.linalg.norm(delta)
        speed = min(self.max_speed, 0.5 * dist)
        v_des = delta / dist * speed if dist > 1e-9 else np.zeros(2)
        return (v_des - self.damping * s[2:4]) / self.accel

    def follow(self, s, path, goal_pos, rng, max_len, sigma):
        waypoints = [self.cell_center(c) for c in path[1:]] + [goal_pos]
        states, actions = [s], []
        i = 0
        for _ in range(max_len):
            while i < len(waypoints) - 1 and np.linalg.norm(waypoints[i] - s[0:2]) < self.waypoint_radius:
                i += 1
            if i == len(waypoints) - 1 and np.linalg.norm(waypoints[i] - s[0:2]) < 0.1:
                break
            a = self.clip_action(self.track(s, waypoints[i]) + sigma * rng.standard_normal(2))
            s = self.dynamics(s, a)
            states.append(s)
            actions.append(a)
        return states, actions

    def rollout_behavior(self, rng):
        """Navigate between random free cells for ``traj_len`` steps."""
        cells = self.free_cells
        cell = cells[rng.integers(len(cells))]
        s = self.state_at(cell)
        states, actions = [s], []
        while len(actions) < self.traj_len:
            goal = cells[rng.integers(len(cells))]
            if goal == cell:
                continue
            st, ac = self.follow(s, self.plan(cell, goal, rng), self.cell_center(goal), rng,
                                 self.traj_len - len(actions), self.behavior_sigma)
            states += st[1:]
            actions += ac
            s = states[-1]
            cell = tuple(int(v) for v in self.cell_of(s[0:2]))
        return np.array(states), np.array(actions)

    def expert_action(self, s, g):
        """Noise-free waypoint policy (used as an oracle); batches are handled row by row."""
        s = np.asarray(s, dtype=np.float64)
        if s.ndim == 2:
            g = np.broadcast_to(g, s.shape)
            return np.array([self.expert_action(si, gi) for si, gi in zip(s, g)])
        cell = tuple(int(v) for v in self.cell_of(s[0:2]))
        goal_cell = tuple(int(v) for v in self.cell_of(np.asarray(g)[0:2]))
        if cell == goal_cell:
            return self.clip_action(self.track(s, np.asarray(g)[0:2]))
        dist = self.distances_to(goal_cell)
        r, c = cell
        nxt = min(
            ((r + dr, c + dc) for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)) if self.grid[r + dr, c + dc]),
            key=lambda rc: dist[rc],
        )
        return self.clip_action(self.track(s, self.cell_center(nxt)))

    def eval_tasks(self, n=20, min_dist=3, seed=1234):
        """Fixed (start, goal) pairs at least ``min_dist`` cells apart."""
        pairs = []
        for a in self.free_cells:
            dist = self.distances_to(a)
            pairs += [(b, a) for b in self.free_cells if dist[b] >= min_dist]
        rng = np.random.default_rng(seed)
        chosen = rng.choice(len(pairs), size=min(n, len(pairs)), replace=False)
        return [(self.state_at(pairs[i][0]), self.state_at(pairs[i][1])) for i in sorted(chosen)]


class TwoCorridorMaze(PointMazeEnv):
    """Start ``S`` and goal ``G`` joined by two disjoint corridors of equal length."""

    name = "twocorridor"
    traj_len = 200
    max_dwell = 10

    def __init__(self, layout=TWO_CORRIDOR_MAZE):
        super().__init__(layout)
        self.start_cell = self._find("S")
        self.goal_cell = self._find("G")
        mid = self.start_cell[0]
        self.corridors = (
            [c for c in self.free_cells if c[0] < mid],
            [c for c in self.free_cells if c[0] > mid],
        )

    def _find(self, ch):
        for r, row in enumerate(self.layout):
            if ch in row:
                return (r, row.index(ch))
        raise ConfigError(f"layout has no {ch!r} cell")

    def corridor_of_position(self, pos):
        """0 for the upper corridor, 1 for the lower one, -1 for neither."""
        r, _ = self.cell_of(pos)
        mid = self.start_cell[0]
        return np.where(~self.is_free(pos), -1, np.where(r < mid, 0, np.where(r > mid, 1, -1)))

    def rollout_behavior(self, rng):
        """Idle at one end for up to ``max_dwell`` steps, then pass to the other end.

        The corridor is chosen uniformly; the direction (S->G or G->S) too.
        """
        if rng.random() < 0.5:
            a, b = self.start_cell, self.goal_cell
        else:
            a, b = self.goal_cell, self.start_cell
        s = self.state_at(a)
        states, actions = [s], []
        # idle before committing, so undecided states near the start are common in the data
        for _ in range(rng.integers(self.max_dwell + 1)):
            act = self.clip_action(self.track(s, self.cell_center(a)) + self.behavior_sigma * rng.standard_normal(2))
            s = self.dynamics(s, act)
            states.append(s)
            actions.append(act)
        st, ac = self.follow(s, self.plan(a, b, rng), self.cell_center(b), rng,
                             self.traj_len - len(actions), self.behavior_sigma)
        return np.array(states + st[1:]), np.array(actions + ac)

    def corridor_used(self, states):
        """Which corridor a trajectory passed through (majority of off-axis states)."""
        ids = self.corridor_of_position(states[:, 0:2])
        up, down = np.sum(ids == 0), np.sum(ids == 1)
        if up == down == 0:
            return -1
        return 0 if up >= down else 1

    def eval_tasks(self):
        s, g = self.state_at(self.start_cell), self.state_at(self.goal_cell)
        return [(s, g), (g, s)]


ENVS = {
    "chain": ChainEnv,
    "pointmaze": PointMazeEnv,
    "twocorridor": TwoCorridorMaze,
}


def make_env(name) -> GoalEnv:
    try:
        return ENVS[name]()
    except KeyError:
        raise ConfigError(f"unknown environment {name!r}; choose from {sorted(ENVS)}") from None


@dataclass
class EvalResult:
    per_task: list
    successes: np.ndarray  # (n_tasks, episodes) booleans
    steps_to_goal: np.ndarray

    @property
    def mean(self):
        return float(self.successes.mean())

    @property
    def std_err(self):
        n = self.successes.size
        if n < 2:
            return 0.0
        return float(self.successes.std(ddof=1) / np.sqrt(n))


def evaluate(policy, env: GoalEnv, tasks, episodes_per_goal, rng, max_steps=None):
    """Success rate of ``policy`` over ``(start, goal)`` tasks.

    ``policy(states, goals, step_in_episode, rng)`` acts on the whole batch of
    synchronous episodes; a plain goal vector in ``tasks`` starts from the
    goal itself. An episode succeeds once its state is within ``eps_goal`` of
    its goal, checked before every step and after the last.
    """
    if not tasks:
        raise ConfigError("evaluation needs at least one goal")
    tasks = [t if isinstance(t, tuple) else (np.asarray(t), np.asarray(t)) for t in tasks]
    max_steps = env.max_steps if max_steps is None else max_steps
    starts = np.repeat(np.array([t[0] for t in tasks], dtype=np.float64), episodes_per_goal, axis=0)
    goals = np.repeat(np.array([t[1] for t in tasks], dtype=np.float64), episodes_per_goal, axis=0)
    s = starts.copy()
    done = env.success(s, goals)
    first = np.where(done, 0, -1)
    if hasattr(policy, "reset"):
        policy.reset()
    for t in range(max_steps):
        if done.all():
            break
        a = env.clip_action(np.asarray(policy(s, goals, t, rng)))
        nxt = env.dynamics(s, a)
        s = np.where(done[:, None], s, nxt)
        hit = env.success(s, goals) & ~done
        first[hit] = t + 1
        done |= hit
    succ = done.reshape(len(tasks), episodes_per_goal)
    return EvalResult(list(succ.mean(axis=1)), succ, first.reshape(len(tasks), episodes_per_goal))
