"""Conditional RealNVP flows with exact log-likelihood.

A flow maps base noise ``u ~ N(0, I_d)`` to an output ``x = f(u; c)`` through a
stack of affine coupling layers. Layer ``l`` keeps the coordinates where
``mask`` is true (the pass-through partition) and updates the others::

    x_I = u_I * exp(s(u_J, c)) + t(u_J, c)

with ``s = s_max * tanh(.)`` and ``t = t_elem * tanh(.)`` so both subnetwork
outputs are bounded by construction. Everything here is vectorised over a
leading batch axis and works for plain arrays as well as autodiff nodes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor_nn as tn
from .errors import ArgumentError, ConfigError

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class CouplingLayer:
    mask: np.ndarray
    scale_net: tn.Mlp
    translate_net: tn.Mlp
    s_max: float | None
    t_elem: float | None

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.pass_idx = np.flatnonzero(self.mask)
        self.trans_idx = np.flatnonzero(~self.mask)
        self._check_mask()

    def _check_mask(self):
        if self.pass_idx.size == 0 or self.trans_idx.size == 0:
            raise ConfigError("coupling mask needs at least one pass-through and one transformed coordinate")

    @property
    def n_transformed(self):
        return int(self.trans_idx.size)

    @property
    def clamped(self):
        return self.s_max is not None and self.t_elem is not None

    def scale_translate(self, params, x_pass, context):
        h = tn.concat([x_pass, context], axis=-1) if self.pass_idx.size else context
        return tn.mlp_forward(self.scale_net, params, h), tn.mlp_forward(self.translate_net, params, h)


@dataclass
class AffineLayer(CouplingLayer):
    """Every coordinate transformed, conditioned on the context alone.

    A single such layer is a diagonal Gaussian ``N(t(c), diag(exp(s(c)))^2)``;
    it is the head used by the gaussian policy family.
    """

    def _check_mask(self):
        if self.pass_idx.size != 0:
            raise ConfigError("affine layer must transform every coordinate")


@dataclass
class ConditionalFlow:
    dim: int
    context_dim: int
    layers: list = field(default_factory=list)
    prefix: str = "flow"

    @property
    def n_layers(self):
        return len(self.layers)

    def register(self, params: tn.ParamStore, rng):
        for layer in self.layers:
            layer.scale_net.register(params, rng, zero_last=True)
            layer.translate_net.register(params, rng, zero_last=True)
        return params

    def init_params(self, rng):
        return self.register(tn.ParamStore(), rng)

    @property
    def clamped(self):
        return all(layer.clamped for layer in self.layers)


def alternating_masks(dim, n_layers):
    even = np.arange(dim) % 2 == 0
    return [even if i % 2 == 0 else ~even for i in range(n_layers)]


def build_flow(dim, context_dim, n_layers=4, hidden=(64, 64), s_max=3.0, t_elem=5.0, prefix="flow", masks=None):
    """RealNVP stack with alternating even/odd masks and clamped subnetworks."""
    if dim < 2:
        raise ConfigError(f"flow policies need an output dimension of at least 2, got {dim}")
    masks = alternating_masks(dim, n_layers) if masks is None else masks
    layers = []
    for i, mask in enumerate(masks):
        mask = np.asarray(mask, dtype=bool)
        n_in = int(mask.sum()) + context_dim
        n_out = int((~mask).sum())
        layers.append(
            CouplingLayer(
                mask,
                tn.Mlp([n_in, *hidden, n_out], f"{prefix}.l{i}.s", out_scale=s_max),
                tn.Mlp([n_in, *hidden, n_out], f"{prefix}.l{i}.t", out_scale=t_elem),
                s_max,
                t_elem,
            )
        )
    return ConditionalFlow(dim, context_dim, layers, prefix)


def build_gaussian(dim, context_dim, hidden=(64, 64), s_max=3.0, t_elem=5.0, prefix="flow"):
    """Diagonal-Gaussian policy head behind the flow interface."""
    mask = np.zeros(dim, dtype=bool)
    layer = AffineLayer(
        mask,
        tn.Mlp([context_dim, *hidden, dim], f"{prefix}.l0.s", out_scale=s_max),
        tn.Mlp([context_dim, *hidden, dim], f"{prefix}.l0.t", out_scale=t_elem),
        s_max,
        t_elem,
    )
    return ConditionalFlow(dim, context_dim, [layer], prefix)


def _prepare(flow, z, context):
    z_val = tn._val(z)
    zc = np.ndim(z_val) == 1
    if np.shape(z_val)[-1] != flow.dim:
        raise ConfigError(f"expected {flow.dim}-dimensional input, got {np.shape(z_val)[-1]}")
    context = np.asarray(context, dtype=np.float64)
    if context.shape[-1] != flow.context_dim:
        raise ConfigError(f"expected {flow.context_dim}-dimensional context, got {context.shape[-1]}")
    if zc:
        z = np.asarray(z_val, dtype=np.float64)[None, :]
    n = np.shape(tn._val(z))[0]
    if context.ndim == 1:
        context = np.broadcast_to(context, (n, flow.context_dim))
    elif context.shape[0] != n:
        if zc:
            z = np.broadcast_to(z, (context.shape[0], flow.dim))
        else:
            raise ConfigError("batch sizes of input and context differ")
    return z, context, zc


def flow_forward(flow: ConditionalFlow, params, u, context):
    """``x = f(u; context)`` and ``log|det df/du|``."""
    x, context, single = _prepare(flow, u, context)
    log_det = np.zeros(context.shape[0])
    for layer in flow.layers:
        x_pass = tn.take_cols(x, layer.pass_idx)
        s, t = layer.scale_translate(params, x_pass, context)
        y = tn.take_cols(x, layer.trans_idx) * tn.exp(s) + t
        x = tn.scatter_cols([(layer.pass_idx, x_pass), (layer.trans_idx, y)], flow.dim) if layer.pass_idx.size else y
        log_det = log_det + tn.sum_(s, axis=1)
    if single:
        return x[0], log_det[0]
    return x, log_det


def flow_inverse(flow: ConditionalFlow, params, x, context):
    """``u = f^{-1}(x; context)`` and ``log|det df^{-1}/dx|``."""
    u, context, single = _prepare(flow, x, context)
    log_det = np.zeros(context.shape[0])
    for layer in reversed(flow.layers):
        u_pass = tn.take_cols(u, layer.pass_idx)
        s, t = layer.scale_translate(params, u_pass, context)
        y = (tn.take_cols(u, layer.trans_idx) - t) * tn.exp(-s)
        u = tn.scatter_cols([(layer.pass_idx, u_pass), (layer.trans_idx, y)], flow.dim) if layer.pass_idx.size else y
        log_det = log_det - tn.sum_(s, axis=1)
    if single:
        return u[0], log_det[0]
    return u, log_det


def base_log_prob(u):
    d = np.shape(tn._val(u))[-1]
    return -0.5 * tn.sum_(tn.square(u), axis=-1) - 0.5 * d * LOG_2PI


def log_prob(flow: ConditionalFlow, params, x, context):
    u, log_det_inv = flow_inverse(flow, params, x, context)
    return base_log_prob(u) + log_det_inv


def sample(flow: ConditionalFlow, params, context, rng, n=None, noise_scale=1.0):
    """Draw ``x = f(u)`` with ``u ~ N(0, noise_scale^2 I)`` and return ``(x, log_prob(x))``.

    ``noise_scale=0`` gives the deterministic image of the base mode. The
    returned log-probability is always under the policy (unit-scale base).
    ``n`` draws per context when ``context`` is a single vector.
    """
    context = np.asarray(context, dtype=np.float64)
    if context.ndim == 1:
        shape = (flow.dim,) if n is None else (n, flow.dim)
    else:
        shape = (context.shape[0], flow.dim)
    u = noise_scale * rng.standard_normal(shape)
    x, log_det = flow_forward(flow, params, u, context)
    return x, base_log_prob(u) - log_det


def entropy_mc(flow: ConditionalFlow, params, context, n, rng):
    """Monte-Carlo entropy ``-E_u[log p(u) - log|det df/du|]`` with its standard error."""
    if n < 2:
        raise ArgumentError("entropy_mc needs at least two samples")
    _, lp = sample(flow, params, context, rng, n=n)
    neg = -np.asarray(lp)
    return float(neg.mean()), float(neg.std(ddof=1) / math.sqrt(n))


def weighted_nll_loss(flow: ConditionalFlow, params, x, context, weights):
    """``-(1/n) * sum_i w_i log p(x_i | c_i)``; differentiable when ``params`` are leaves."""
    weights = np.asarray(weights, dtype=np.float64)
    if not np.all(np.isfinite(weights)) or np.any(weights < 0):
        raise ArgumentError("weights must be finite and non-negative")
    lp = log_prob(flow, params, x, context)
    return -tn.sum_(lp * weights) * (1.0 / weights.size)
