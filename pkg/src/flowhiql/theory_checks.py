"""Certified log-density floor and KL cap for clamped coupling flows.

With every scale output bounded by ``S_l`` and every translation by ``T_l``
(in Euclidean norm), inverting a flow on an action of norm at most ``A_max``
gives base noise of norm at most::

    U_max = exp(sum_l S_l) * (A_max + sum_l T_l)

and the log-density of any such action is at least ``-B`` with::

    B = d/2 log(2 pi) + U_max**2 / 2 + sum_l d_l S_l

A behavior density bounded by ``M`` on the same ball then has
``KL(behavior || flow) <= B + log M``. Per-element clamping at ``t_elem``
certifies ``T_l = t_elem * sqrt(d_l)``, the worst case over the ``d_l``
transformed coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ArgumentError, ConfigError
from .flow_core import LOG_2PI, ConditionalFlow, log_prob, sample

MIN_AUDIT_ACTIONS = 10_000
CHUNK = 20_000


@dataclass(frozen=True)
class LayerBound:
    d: int
    S: float
    T: float


def layer_bounds(flow: ConditionalFlow):
    if not flow.clamped:
        raise ConfigError("flow has unclamped coupling layers; no log-density bound can be certified")
    return [LayerBound(l.n_transformed, float(l.s_max), float(l.t_elem) * math.sqrt(l.n_transformed)) for l in flow.layers]


def constants_from_layers(d, layers, A_max):
    """``(U_max, B)`` from explicit per-layer ``(d_l, S_l, T_l)``."""
    if A_max < 0:
        raise ArgumentError("A_max must be non-negative")
    S = sum(l.S for l in layers)
    T = sum(l.T for l in layers)
    u_max = math.exp(S) * (A_max + T)
    B = 0.5 * d * LOG_2PI + 0.5 * u_max**2 + sum(l.d * l.S for l in layers)
    return u_max, B


def bound_constants(flow: ConditionalFlow, A_max):
    """``(U_max, B)`` for a flow built with architectural clamps."""
    return constants_from_layers(flow.dim, layer_bounds(flow), A_max)


def uniform_ball(rng, n, dim, radius):
    """``n`` points uniform in the centred ``dim``-ball of the given radius."""
    direction = rng.standard_normal((n, dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    r = radius * rng.random(n) ** (1.0 / dim)
    return direction * r[:, None]


def log_ball_volume(dim, radius):
    return 0.5 * dim * math.log(math.pi) + dim * math.log(radius) - math.lgamma(0.5 * dim + 1.0)


def _chunked_log_prob(flow, params, x, context):
    out = np.empty(len(x))
    for lo in range(0, len(x), CHUNK):
        hi = lo + CHUNK
        ctx = np.broadcast_to(context, (len(x[lo:hi]), flow.context_dim))
        out[lo:hi] = log_prob(flow, params, x[lo:hi], ctx)
    return out


CSV_FIELDS = ["check", "d", "layers", "A_max", "U_max", "B", "min_log_prob", "margin", "n_samples", "valid"]


@dataclass
class BoundReport:
    d: int
    layers: list
    A_max: float
    U_max: float
    B: float
    min_log_prob: float
    margin: float
    n_samples: int
    worst_action: np.ndarray = field(default=None, repr=False)
    worst_context: np.ndarray = field(default=None, repr=False)

    @property
    def valid(self):
        return bool(self.margin >= 0)

    def text(self):
        lines = [
            f"log-density lower bound: {'PASS' if self.valid else 'FAIL'}",
            f"  d = {self.d}, A_max = {self.A_max!r}",
            "  layers (d_l, S_l, T_l): " + ", ".join(f"({l.d}, {l.S!r}, {l.T!r})" for l in self.layers),
            f"  U_max = {self.U_max!r}",
            f"  B = {self.B!r}",
            f"  min observed log-density = {self.min_log_prob!r} over {self.n_samples} samples",
            f"  margin = {self.margin!r}",
        ]
        if not self.valid:
            lines.append(f"  offending action = {self.worst_action.tolist()}, context = {self.worst_context.tolist()}")
        return "\n".join(lines)

    def csv_row(self):
        layers = ";".join(f"{l.d}:{l.S!r}:{l.T!r}" for l in self.layers)
        return {
            "check": "lower_bound", "d": self.d, "layers": layers, "A_max": repr(self.A_max),
            "U_max": repr(self.U_max), "B": repr(self.B), "min_log_prob": repr(self.min_log_prob),
            "margin": repr(self.margin), "n_samples": self.n_samples, "valid": int(self.valid),
        }


def check_lower_bound(flow: ConditionalFlow, params, contexts, n_actions, rng, A_max=1.0):
    """Audit ``log pi(a | c) >= -B`` on uniform actions in the ``A_max`` ball.

    Every context in ``contexts`` is paired with ``n_actions`` fresh actions.
    """
    if n_actions < MIN_AUDIT_ACTIONS:
        raise ArgumentError(f"the audit needs at least {MIN_AUDIT_ACTIONS} actions, got {n_actions}")
    layers = layer_bounds(flow)
    u_max, B = constants_from_layers(flow.dim, layers, A_max)
    contexts = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
    if flow.context_dim == 0:
        contexts = contexts.reshape(-1, 0) if contexts.size else np.zeros((1, 0))
    worst = (np.inf, None, None)
    for c in contexts:
        actions = uniform_ball(rng, n_actions, flow.dim, A_max)
        lp = _chunked_log_prob(flow, params, actions, c)
        i = int(np.argmin(lp))
        if lp[i] < worst[0]:
            worst = (float(lp[i]), actions[i], c)
    min_lp, worst_a, worst_c = worst
    return BoundReport(flow.dim, layers, float(A_max), u_max, B, min_lp, min_lp + B, n_actions * len(contexts), worst_a, worst_c)


class UniformBallBehavior:
    """Uniform density on the centred ball; its cap ``M`` is one over the ball volume."""

    def __init__(self, dim, radius=1.0):
        self.dim, self.radius = dim, float(radius)
        self.log_cap = -log_ball_volume(dim, self.radius)

    def sample(self, rng, n):
        return uniform_ball(rng, n, self.dim, self.radius)

    def log_prob(self, a):
        inside = np.linalg.norm(a, axis=-1) <= self.radius
        return np.where(inside, self.log_cap, -np.inf)


class FlowBehavior:
    """A flow used as its own behavior; no density cap and unbounded support."""

    radius = None
    log_cap = math.inf

    def __init__(self, flow, params, context):
        self.flow, self.params, self.context = flow, params, np.asarray(context, dtype=np.float64)
        self.dim = flow.dim

    def sample(self, rng, n):
        return sample(self.flow, self.params, self.context, rng, n=n)[0]

    def log_prob(self, a):
        return _chunked_log_prob(self.flow, self.params, a, self.context)


class KLReport(NamedTuple):
    kl: float
    std_err: float
    bound: float

    @property
    def valid(self):
        return bool(self.kl <= self.bound + 3.0 * self.std_err)

    def text(self):
        return "\n".join([
            f"KL cap: {'PASS' if self.valid else 'FAIL'}",
            f"  KL estimate = {self.kl!r} +/- {self.std_err!r}",
            f"  bound B + log M = {self.bound!r}",
        ])

    def csv_row(self):
        return {
            "check": "kl_cap", "min_log_prob": "", "margin": repr(self.bound + 3.0 * self.std_err - self.kl),
            "B": repr(self.bound), "valid": int(self.valid),
        }


def kl_cap_check(behavior, flow: ConditionalFlow, params, context, n, rng):
    """Monte-Carlo ``KL(behavior || flow(. | context))`` against ``B + log M``.

    ``behavior`` provides ``sample(rng, n)``, ``log_prob(a)``, ``log_cap`` and
    ``radius`` (``None`` when its support is unbounded, which makes the bound
    infinite).
    """
    if n < 2:
        raise ArgumentError("kl_cap_check needs at least two samples")
    a = np.asarray(behavior.sample(rng, n), dtype=np.float64)
    if behavior.radius is not None:
        if np.any(np.linalg.norm(a, axis=-1) > behavior.radius * (1 + 1e-12)):
            raise ArgumentError("behavior produced samples outside its ball")
        bound = bound_constants(flow, behavior.radius)[1] + behavior.log_cap
    else:
        bound = math.inf
    diff = behavior.log_prob(a) - _chunked_log_prob(flow, params, a, context)
    return KLReport(float(diff.mean()), float(diff.std(ddof=1) / math.sqrt(n)), float(bound))
