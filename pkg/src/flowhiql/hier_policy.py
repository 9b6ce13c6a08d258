"""Hierarchical advantage-weighted flow policies and the offline training loop.

One training iteration performs, in order:

1. an expectile TD step on the goal-conditioned value ``V(s, g)``;
2. a weighted maximum-likelihood step on the high-level flow
   ``pi_h(s_{t+k} | s_t, g)`` with weights ``min(exp(beta * A_h), w_max)``,
   ``A_h = V(s_{t+k}, g) - V(s_t, g)``;
3. the same on the low-level flow ``pi_l(a_t | s_t, s_{t+k})`` with
   ``A_l = V(s_{t+1}, s_{t+k}) - V(s_t, s_{t+k})``.

Advantage weights are computed from plain arrays, so no gradient reaches the
value network from the policy losses.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import flow_core as fc
from . import tensor_nn as tn
from .dataset import OfflineDataset, RelabelConfig
from .envs import GoalEnv, evaluate
from .errors import ArgumentError, ConfigError, FlowHiqlError
from .value_learner import ValueFunction, value, value_update

log = logging.getLogger(__name__)

INIT_TAG = 1
EVAL_TAG = 2
POLICY_FAMILIES = ("flow", "gaussian")
METRIC_FIELDS = ("step", "loss_v", "loss_h", "loss_l", "success_rate")


@dataclass
class TrainConfig:
    k: int = 25
    beta: float = 3.0
    w_max: float = 100.0
    tau: float = 0.7
    gamma: float = 0.99
    polyak: float = 0.005
    lr_value: float = 3e-4
    lr_high: float = 3e-4
    lr_low: float = 3e-4
    grad_clip: float = 10.0
    batch_size: int = 256
    total_steps: int = 20000
    eval_interval: int = 5000
    checkpoint_interval: int = 0
    seed: int = 0
    dataset_fraction: float = 1.0
    policy_family: str = "flow"
    n_coupling_layers: int = 4
    flow_hidden: tuple = (64, 64)
    value_hidden: tuple = (64, 64)
    s_max: float = 3.0
    t_elem: float = 5.0
    p_geom: float = 0.7
    p_uniform: float = 0.2
    p_final: float = 0.1
    eval_episodes: int = 1
    eval_high_noise: float = 1.0
    eval_low_noise: float = 0.0

    def __post_init__(self):
        self.flow_hidden = tuple(int(h) for h in self.flow_hidden)
        self.value_hidden = tuple(int(h) for h in self.value_hidden)
        self.validate()

    def validate(self):
        if self.k < 1:
            raise ConfigError("k must be at least 1")
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")
        if not self.w_max > 1:
            raise ConfigError("w_max must exceed 1")
        if not 0 < self.tau < 1 or not 0 < self.gamma < 1:
            raise ConfigError("tau and gamma must lie in (0, 1)")
        if not 0 < self.polyak <= 1:
            raise ConfigError("polyak rate must lie in (0, 1]")
        if not 0 < self.dataset_fraction <= 1:
            raise ConfigError("dataset_fraction must lie in (0, 1]")
        if self.policy_family not in POLICY_FAMILIES:
            raise ConfigError(f"policy_family must be one of {POLICY_FAMILIES}")
        if self.batch_size < 1 or self.total_steps < 0 or self.eval_interval < 1:
            raise ConfigError("batch_size and eval_interval must be positive, total_steps non-negative")
        if min(self.lr_value, self.lr_high, self.lr_low, self.grad_clip) <= 0:
            raise ConfigError("learning rates and grad_clip must be positive")
        RelabelConfig(self.p_geom, self.p_uniform, self.p_final, self.gamma)

    @property
    def relabel(self):
        return RelabelConfig(self.p_geom, self.p_uniform, self.p_final, self.gamma)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------------------
# agent state
# ---------------------------------------------------------------------------


@dataclass
class PolicyHead:
    """A conditional flow (or gaussian head) with its parameters and optimizer."""

    flow: fc.ConditionalFlow
    params: tn.ParamStore
    adam: tn.AdamState

    def log_prob(self, x, context):
        return fc.log_prob(self.flow, self.params, x, context)

    def sample(self, context, rng, noise_scale=1.0):
        return fc.sample(self.flow, self.params, context, rng, noise_scale=noise_scale)[0]


def _make_head(config: TrainConfig, dim, context_dim, rng, lr, prefix):
    if config.policy_family == "flow":
        flow = fc.build_flow(dim, context_dim, config.n_coupling_layers, config.flow_hidden,
                             config.s_max, config.t_elem, prefix)
    else:
        flow = fc.build_gaussian(dim, context_dim, config.flow_hidden, config.s_max, config.t_elem, prefix)
    params = flow.init_params(rng)
    return PolicyHead(flow, params, tn.AdamState.for_params(params, lr=lr))


@dataclass
class Agent:
    config: TrainConfig
    state_dim: int
    action_dim: int
    value: ValueFunction
    high: PolicyHead
    low: PolicyHead
    step: int = 0

    @classmethod
    def create(cls, config: TrainConfig, state_dim, action_dim):
        rng = np.random.default_rng([config.seed, INIT_TAG])
        vf = ValueFunction.create(state_dim, state_dim, config.value_hidden, rng, config.lr_value)
        high = _make_head(config, state_dim, 2 * state_dim, rng, config.lr_high, "high")
        low = _make_head(config, action_dim, 2 * state_dim, rng, config.lr_low, "low")
        return cls(config, state_dim, action_dim, vf, high, low)

    # checkpoint layout: one ParamStore with prefixed segments ---------------
    def to_params(self) -> tn.ParamStore:
        out = tn.ParamStore()
        out.add("meta/step", (), self.step)
        out.add("meta/dims", (2,), [self.state_dim, self.action_dim])
        for name, store, adam in (
            ("value", self.value.params, self.value.adam),
            ("high", self.high.params, self.high.adam),
            ("low", self.low.params, self.low.adam),
        ):
            out.merge(f"{name}/", store)
            out.add(f"adam/{name}/m", (len(store),), adam.m)
            out.add(f"adam/{name}/v", (len(store),), adam.v)
            out.add(f"adam/{name}/step", (), adam.step)
        out.merge("target/", self.value.target)
        return out

    @classmethod
    def from_params(cls, config: TrainConfig, params: tn.ParamStore):
        try:
            state_dim, action_dim = (int(v) for v in params["meta/dims"])
            agent = cls.create(config, state_dim, action_dim)
            for name, store, adam in (
                ("value", agent.value.params, agent.value.adam),
                ("high", agent.high.params, agent.high.adam),
                ("low", agent.low.params, agent.low.adam),
            ):
                loaded = params.subset(f"{name}/")
                store.check_layout(loaded)
                store.values[...] = loaded.values
                adam.m = params[f"adam/{name}/m"].copy()
                adam.v = params[f"adam/{name}/v"].copy()
                adam.step = int(params[f"adam/{name}/step"])
            target = params.subset("target/")
            agent.value.target.check_layout(target)
            agent.value.target.values[...] = target.values
            agent.step = int(params["meta/step"])
        except KeyError as exc:
            raise ConfigError(f"checkpoint lacks segment {exc}") from exc
        return agent


# ---------------------------------------------------------------------------
# advantages and updates
# ---------------------------------------------------------------------------


def high_advantage(vf: ValueFunction, s_t, s_tk, g):
    return value(vf, s_tk, g) - value(vf, s_t, g)


def low_advantage(vf: ValueFunction, s_t, s_t1, s_tk):
    return value(vf, s_t1, s_tk) - value(vf, s_t, s_tk)


def awr_weight(adv, beta, w_max):
    if beta < 0:
        raise ArgumentError("beta must be non-negative")
    # clamp before exp to avoid overflow; floor keeps hugely negative advantages from underflowing to 0
    w = np.exp(np.minimum(beta * np.asarray(adv, dtype=np.float64), math.log(w_max)))
    return np.clip(w, np.finfo(np.float64).tiny, w_max)


def _policy_step(head: PolicyHead, x, context, weights, grad_clip):
    loss, grad = tn.value_and_grad(lambda p: fc.weighted_nll_loss(head.flow, p, x, context, weights), head.params)
    tn.adam_step(head.adam, head.params, tn.clip_by_global_norm(grad, grad_clip))
    return loss


def high_policy_update(agent: Agent, batch, beta=None, w_max=None):
    """One weighted-MLE step on subgoals; returns the pre-step loss."""
    cfg = agent.config
    beta = cfg.beta if beta is None else beta
    w_max = cfg.w_max if w_max is None else w_max
    adv = high_advantage(agent.value, batch["s"], batch["s_k"], batch["g"])
    weights = awr_weight(adv, beta, w_max)
    context = np.concatenate([batch["s"], batch["g"]], axis=1)
    return _policy_step(agent.high, batch["s_k"], context, weights, cfg.grad_clip)


def low_policy_update(agent: Agent, batch, beta=None, w_max=None):
    """One weighted-MLE step on actions; returns the pre-step loss."""
    cfg = agent.config
    beta = cfg.beta if beta is None else beta
    w_max = cfg.w_max if w_max is None else w_max
    adv = low_advantage(agent.value, batch["s"], batch["s_next"], batch["s_k"])
    weights = awr_weight(adv, beta, w_max)
    context = np.concatenate([batch["s"], batch["s_k"]], axis=1)
    return _policy_step(agent.low, batch["a"], context, weights, cfg.grad_clip)


# ---------------------------------------------------------------------------
# acting
# ---------------------------------------------------------------------------


class HierarchicalActor:
    """Resamples subgoals every ``k`` steps and acts toward the cached subgoal.

    Works on batches of synchronous episodes. ``high_noise``/``low_noise``
    scale the base noise; 0 gives the deterministic zero-noise mode.
    """

    def __init__(self, agent: Agent, env: GoalEnv | None = None, k=None, high_noise=1.0, low_noise=1.0):
        self.agent = agent
        self.env = env
        self.k = agent.config.k if k is None else k
        self.high_noise = high_noise
        self.low_noise = low_noise
        self.subgoal = None

    def reset(self):
        self.subgoal = None

    def __call__(self, s, g, step_in_episode, rng):
        return self.act(s, g, rng, step_in_episode)

    def act(self, s, g, rng, step_in_episode):
        s = np.atleast_2d(s)
        g = np.broadcast_to(g, s.shape)
        if self.subgoal is None or step_in_episode % self.k == 0:
            self.subgoal = self.agent.high.sample(np.concatenate([s, g], axis=1), rng, self.high_noise)
        a = self.agent.low.sample(np.concatenate([s, self.subgoal], axis=1), rng, self.low_noise)
        if self.env is not None:
            a = self.env.clip_action(a)
        return a


def act(agent: Agent, s, g, rng, step_in_episode, k, cache=None, high_noise=1.0, low_noise=1.0):
    """Single-call form of :class:`HierarchicalActor`; ``cache`` carries the subgoal."""
    actor = cache if cache is not None else HierarchicalActor(agent, k=k, high_noise=high_noise, low_noise=low_noise)
    actor.k = k
    single = np.ndim(s) == 1
    a = actor.act(s, g, rng, step_in_episode)
    return (a[0] if single else a), actor


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def eval_agent(agent: Agent, env: GoalEnv, rng, tasks=None, episodes=None):
    cfg = agent.config
    actor = HierarchicalActor(agent, env, high_noise=cfg.eval_high_noise, low_noise=cfg.eval_low_noise)
    tasks = env.eval_tasks() if tasks is None else tasks
    return evaluate(actor, env, tasks, cfg.eval_episodes if episodes is None else episodes, rng)


def train_step(agent: Agent, dataset: OfflineDataset, step: int):
    cfg = agent.config
    rng = np.random.default_rng([cfg.seed, step])
    vb = dataset.sample_value_batch(rng, cfg.batch_size, cfg.relabel)
    loss_v = value_update(agent.value, vb, cfg.tau, cfg.gamma, cfg.polyak, cfg.grad_clip)
    hb = dataset.sample_high_batch(rng, cfg.batch_size, cfg.k, cfg.relabel)
    loss_h = high_policy_update(agent, hb)
    lb = dataset.sample_low_batch(rng, cfg.batch_size, cfg.k)
    loss_l = low_policy_update(agent, lb)
    agent.step = step + 1
    return loss_v, loss_h, loss_l


def train(config: TrainConfig, dataset: OfflineDataset, agent: Agent | None = None, on_metrics=None,
          on_checkpoint=None, evaluate_success=True):
    """Run the offline loop from ``agent.step`` to ``config.total_steps``.

    Every ``eval_interval`` steps a metrics row is appended (and passed to
    ``on_metrics``); every ``checkpoint_interval`` steps ``on_checkpoint(agent)``
    is called. Each step draws from ``default_rng([seed, step])``, so a
    resumed run replays the uninterrupted one exactly.
    """
    env = dataset.env
    if agent is None:
        agent = Agent.create(config, env.state_dim, env.action_dim)
    if (agent.state_dim, agent.action_dim) != (env.state_dim, env.action_dim):
        raise ConfigError("agent and dataset dimensions differ")
    metrics = []
    for step in range(agent.step, config.total_steps):
        try:
            losses = train_step(agent, dataset, step)
        except FlowHiqlError as exc:
            raise type(exc)(f"training aborted at step {step}: {exc}") from exc
        done = step + 1
        if done % config.eval_interval == 0 or done == config.total_steps:
            rate = float("nan")
            if evaluate_success:
                rate = eval_agent(agent, env, np.random.default_rng([config.seed, done, EVAL_TAG])).mean
            row = dict(zip(METRIC_FIELDS, (done, *losses, rate)))
            log.info("step %d loss_v %.4f loss_h %.4f loss_l %.4f success %.3f", *row.values())
            metrics.append(row)
            if on_metrics is not None:
                on_metrics(row)
        if on_checkpoint is not None and config.checkpoint_interval and done % config.checkpoint_interval == 0:
            on_checkpoint(agent)
    return metrics, agent
