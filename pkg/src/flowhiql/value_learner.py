"""Action-free goal-conditioned value learning by expectile regression."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_nn as tn
from .errors import ArgumentError, DatasetError


def expectile_loss(diff, tau):
    """``|tau - 1{diff < 0}| * diff**2`` (elementwise for arrays and nodes)."""
    if not 0.0 < tau < 1.0:
        raise ArgumentError(f"tau must lie in (0, 1), got {tau}")
    weight = np.where(tn._val(diff) < 0, 1.0 - tau, tau)
    return weight * tn.square(diff)


def td_target(r, gamma, v_next_target, terminal=False):
    """Bootstrapped target; terminal transitions keep only the reward."""
    return r + gamma * (1.0 - np.asarray(terminal, dtype=np.float64)) * v_next_target


@dataclass
class ValueFunction:
    net: tn.Mlp
    params: tn.ParamStore
    target: tn.ParamStore
    adam: tn.AdamState

    @classmethod
    def create(cls, state_dim, goal_dim, hidden=(64, 64), rng=None, lr=3e-4, prefix="value"):
        rng = np.random.default_rng(0) if rng is None else rng
        net = tn.Mlp([state_dim + goal_dim, *hidden, 1], prefix)
        params = tn.ParamStore()
        net.register(params, rng)
        return cls(net, params, params.copy(), tn.AdamState.for_params(params, lr=lr))

    def __call__(self, s, g, params=None):
        return value(self, s, g, params)


def value(vf: ValueFunction, s, g, params=None):
    """``V(s, g)`` for batches (n,) or a single pair (scalar). ``params`` defaults to online."""
    params = vf.params if params is None else params
    out = tn.mlp_forward(vf.net, params, np.concatenate([s, g], axis=-1))
    if isinstance(out, tn.Node):
        return out[:, 0]
    return out[..., 0]


def target_value(vf: ValueFunction, s, g):
    return value(vf, s, g, vf.target)


def value_loss(vf: ValueFunction, params, batch, tau, gamma):
    """Mean expectile loss of ``V(s, g)`` against the target-network TD target."""
    y = td_target(batch["r"], gamma, target_value(vf, batch["s_next"], batch["g"]), batch["terminal"])
    v = value(vf, batch["s"], batch["g"], params)
    return tn.mean(expectile_loss(y - v, tau))


def value_update(vf: ValueFunction, batch, tau=0.7, gamma=0.99, polyak=0.005, grad_clip=10.0):
    """One Adam step on the expectile TD loss followed by a target update.

    Returns the loss measured before the step.
    """
    if len(batch["s"]) == 0:
        raise DatasetError("empty value batch")
    loss, grad = tn.value_and_grad(lambda p: value_loss(vf, p, batch, tau, gamma), vf.params)
    tn.adam_step(vf.adam, vf.params, tn.clip_by_global_norm(grad, grad_clip))
    tn.polyak_update(vf.target, vf.params, polyak)
    return loss
