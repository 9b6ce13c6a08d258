import math

import numpy as np
import pytest

from flowhiql import flow_core as fc
from flowhiql import hier_policy as hp
from flowhiql import tensor_nn as tn
from flowhiql.dataset import generate_dataset
from flowhiql.envs import ChainEnv
from flowhiql.errors import ArgumentError, ConfigError
from flowhiql.hier_policy import (
    Agent, HierarchicalActor, TrainConfig, act, awr_weight, high_advantage, high_policy_update, low_advantage,
    low_policy_update, train,
)

from helpers import randomize, rel_err, store_fd

SMALL = dict(flow_hidden=(16,), value_hidden=(16,), n_coupling_layers=2, batch_size=32, k=5)


@pytest.fixture(scope="module")
def chain_ds():
    return generate_dataset(ChainEnv(), 20, seed=0)


def small_agent(family="flow", seed=0, **kw):
    cfg = TrainConfig(policy_family=family, seed=seed, **{**SMALL, **kw})
    agent = Agent.create(cfg, 2, 2)
    rng = np.random.default_rng(seed + 100)
    for store in (agent.value.params, agent.high.params, agent.low.params):
        randomize(store, rng, 0.3)
    return agent


def random_batch(rng, n=16):
    return {key: rng.standard_normal((n, 2)) for key in ("s", "s_next", "s_k", "g", "a")}


def chain_dp_value(s, g, gamma=0.99, step=0.25):
    """Optimal discounted step cost on the chain: steps needed to enter the goal radius."""
    dist = np.abs(np.asarray(s)[..., 0] - np.asarray(g)[..., 0])
    steps = np.maximum(np.ceil((dist - ChainEnv.eps_goal) / step), 0)
    return -(1 - gamma**steps) / (1 - gamma)


class TestAwrWeight:
    @pytest.mark.parametrize("adv,beta,expected", [
        (0.0, 3.0, 1.0), (1.0, 3.0, math.exp(3.0)), (10.0, 3.0, 100.0), (-5.0, 0.0, 1.0),
    ])
    def test_examples(self, adv, beta, expected):
        assert awr_weight(adv, beta, 100.0) == pytest.approx(expected)

    def test_positive_and_clamped(self):
        w = awr_weight(np.linspace(-500, 500, 1001), 3.0, 100.0)
        assert np.all(w > 0) and np.all(w <= 100.0)

    def test_negative_beta(self):
        with pytest.raises(ArgumentError):
            awr_weight(1.0, -1.0, 100.0)


class TestAdvantages:
    def test_identity_cases(self):
        agent = small_agent()
        rng = np.random.default_rng(0)
        s, g = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
        np.testing.assert_allclose(high_advantage(agent.value, s, s, g), 0.0, atol=1e-12)
        np.testing.assert_allclose(low_advantage(agent.value, s, s, g), 0.0, atol=1e-12)

    def test_plug_in(self, monkeypatch):
        table = {(1.0,): -1.0, (0.0,): -2.0}
        monkeypatch.setattr(hp, "value", lambda vf, s, g: np.array([table[(float(x),)] for x in s[:, 0]]))
        s, s1, g = np.zeros((1, 2)), np.ones((1, 2)), np.zeros((1, 2))
        assert low_advantage(None, s, s1, g)[0] == 1.0
        assert high_advantage(None, s, s1, g)[0] == 1.0

    def test_dp_oracle_signs(self, monkeypatch):
        monkeypatch.setattr(hp, "value", lambda vf, s, g: chain_dp_value(s, g))
        env = ChainEnv()
        goal = env.node(4)[None]
        s = np.array([[-1.0, 0.0]])
        forward, back = s + [[0.25, 0.0]], s - [[0.25, 0.0]]
        assert low_advantage(None, s, forward, goal)[0] > 0
        assert low_advantage(None, s, back, goal)[0] < 0
        assert high_advantage(None, s, env.node(3)[None], goal)[0] > 0
        assert high_advantage(None, s, env.node(0)[None], goal)[0] < 0


def _manual_step(head, x, ctx, weights, clip):
    params, adam = head.params.copy(), tn.AdamState.for_params(head.params, lr=head.adam.lr)
    _, grad = tn.value_and_grad(lambda p: fc.weighted_nll_loss(head.flow, p, x, ctx, weights), params)
    tn.adam_step(adam, params, tn.clip_by_global_norm(grad, clip))
    return params.values


class TestPolicyUpdates:
    @pytest.mark.parametrize("level", ["high", "low"])
    def test_beta_zero_is_plain_mle(self, level):
        agent = small_agent()
        batch = random_batch(np.random.default_rng(1))
        if level == "high":
            head, x, ctx = agent.high, batch["s_k"], np.concatenate([batch["s"], batch["g"]], axis=1)
        else:
            head, x, ctx = agent.low, batch["a"], np.concatenate([batch["s"], batch["s_k"]], axis=1)
        expected = _manual_step(head, x, ctx, np.ones(len(x)), agent.config.grad_clip)
        (high_policy_update if level == "high" else low_policy_update)(agent, batch, beta=0.0)
        np.testing.assert_allclose(head.params.values, expected, rtol=0, atol=1e-12)

    def test_weights_are_constants(self):
        agent = small_agent()
        batch = random_batch(np.random.default_rng(2))
        ctx = np.concatenate([batch["s"], batch["g"]], axis=1)
        w = awr_weight(high_advantage(agent.value, batch["s"], batch["s_k"], batch["g"]), 3.0, 100.0)
        expected = _manual_step(agent.high, batch["s_k"], ctx, w, agent.config.grad_clip)
        value_before = agent.value.params.values.copy()
        high_policy_update(agent, batch)
        np.testing.assert_allclose(agent.high.params.values, expected, atol=1e-12)
        np.testing.assert_array_equal(agent.value.params.values, value_before)

    def test_value_perturbation_changes_weights_only(self):
        # the composed update differentiates in the policy parameters alone
        agent = small_agent()
        batch = random_batch(np.random.default_rng(3))
        ctx = np.concatenate([batch["s"], batch["g"]], axis=1)

        def composed_loss(vf_values, policy):
            agent.value.params.values[...] = vf_values
            w = awr_weight(high_advantage(agent.value, batch["s"], batch["s_k"], batch["g"]), 0.5, 100.0)
            return fc.weighted_nll_loss(agent.high.flow, policy, batch["s_k"], ctx, w)

        base = agent.value.params.values.copy()
        bumped = base + 0.05 * np.random.default_rng(4).standard_normal(base.shape)
        w0 = awr_weight(high_advantage(agent.value, batch["s"], batch["s_k"], batch["g"]), 0.5, 100.0)
        _, g0 = tn.value_and_grad(lambda p: composed_loss(base, p), agent.high.params)
        _, g1 = tn.value_and_grad(lambda p: composed_loss(bumped, p), agent.high.params)
        w1 = awr_weight(high_advantage(agent.value, batch["s"], batch["s_k"], batch["g"]), 0.5, 100.0)
        assert not np.allclose(w0, w1)
        # gradients are the analytic ones of each fixed-weight loss
        for vals, grad in ((base, g0), (bumped, g1)):
            fd = store_fd(lambda p: float(tn._val(composed_loss(vals, p))), agent.high.params)
            assert np.percentile(rel_err(grad, fd), 95) < 1e-4
        assert g0.shape == (len(agent.high.params),)

    @pytest.mark.parametrize("seed", range(3))
    def test_low_level_gradient_matches_finite_differences(self, seed):
        agent = small_agent(seed=seed)
        rng = np.random.default_rng(seed)
        batch = random_batch(rng, 8)
        ctx = np.concatenate([batch["s"], batch["s_k"]], axis=1)
        w = awr_weight(low_advantage(agent.value, batch["s"], batch["s_next"], batch["s_k"]), 3.0, 100.0)
        loss = lambda p: fc.weighted_nll_loss(agent.low.flow, p, batch["a"], ctx, w)  # noqa: E731
        _, grad = tn.value_and_grad(loss, agent.low.params)
        fd = store_fd(lambda p: float(tn._val(loss(p))), agent.low.params)
        assert np.percentile(rel_err(grad, fd), 95) < 1e-4

    def test_equal_weights_scale_gradient(self):
        agent = small_agent()
        batch = random_batch(np.random.default_rng(5))
        ctx = np.concatenate([batch["s"], batch["s_k"]], axis=1)
        n = len(batch["a"])
        _, g1 = tn.value_and_grad(lambda p: fc.weighted_nll_loss(agent.low.flow, p, batch["a"], ctx, np.ones(n)),
                                  agent.low.params)
        _, g3 = tn.value_and_grad(
            lambda p: fc.weighted_nll_loss(agent.low.flow, p, batch["a"], ctx, np.full(n, 3.0)), agent.low.params)
        np.testing.assert_allclose(g3, 3.0 * g1, rtol=1e-12, atol=1e-14)


def two_mode_fit(family, steps=800, seed=0):
    """Fit the high head to subgoals split evenly between (-3, 0) and (3, 0)."""
    cfg = TrainConfig(policy_family=family, seed=seed, flow_hidden=(32, 32), lr_high=3e-3, batch_size=128)
    agent = Agent.create(cfg, 2, 2)
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        n = cfg.batch_size
        centers = np.where(rng.random(n) < 0.5, -3.0, 3.0)
        s_k = np.stack([centers, np.zeros(n)], axis=1) + 0.3 * rng.standard_normal((n, 2))
        batch = {"s": np.zeros((n, 2)), "g": np.zeros((n, 2)), "s_k": s_k}
        high_policy_update(agent, batch, beta=0.0)
    return agent


def mode_masses(agent, half_width=0.75, n_grid=121):
    """Quadrature of the subgoal density over the box around each mode."""
    out = []
    for cx in (-3.0, 3.0):
        xs = np.linspace(cx - half_width, cx + half_width, n_grid)
        ys = np.linspace(-half_width, half_width, n_grid)
        xx, yy = np.meshgrid(xs, ys)
        pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
        dens = np.exp(agent.high.log_prob(pts, np.zeros(4))).reshape(xx.shape)
        out.append(float(np.trapezoid(np.trapezoid(dens, xs, axis=1), ys)))
    return out


class TestMultimodality:
    def test_gaussian_reference_mass(self):
        # moment-matched gaussian: sd_x = sqrt(9 + 0.09), sd_y = 0.3
        sd = math.sqrt(9.09)
        px = 0.5 * (math.erf(3.75 / sd / math.sqrt(2)) - math.erf(2.25 / sd / math.sqrt(2)))
        py = math.erf(0.75 / 0.3 / math.sqrt(2))
        assert px * py < 0.15

    def test_flow_holds_both_modes_and_gaussian_does_not(self):
        flow_mass = mode_masses(two_mode_fit("flow"))
        gauss_mass = mode_masses(two_mode_fit("gaussian"))
        assert min(flow_mass) >= 0.30
        assert min(gauss_mass) < 0.15


class TestActing:
    def test_k_one_resamples_every_step(self):
        agent = small_agent()
        actor = HierarchicalActor(agent, k=1)
        rng = np.random.default_rng(0)
        s, g = np.zeros(2), np.ones(2)
        seen = []
        for t in range(3):
            actor.act(s, g, rng, t)
            seen.append(actor.subgoal.copy())
        assert not np.allclose(seen[0], seen[1]) and not np.allclose(seen[1], seen[2])

    def test_subgoal_cached_between_refreshes(self):
        agent = small_agent()
        rng = np.random.default_rng(0)
        _, cache = act(agent, np.zeros(2), np.ones(2), rng, 0, k=3)
        first = cache.subgoal.copy()
        for t in (1, 2):
            act(agent, np.zeros(2), np.ones(2), rng, t, k=3, cache=cache)
            np.testing.assert_array_equal(cache.subgoal, first)
        act(agent, np.zeros(2), np.ones(2), rng, 3, k=3, cache=cache)
        assert not np.allclose(cache.subgoal, first)

    def test_zero_noise_is_repeatable(self):
        agent = small_agent()
        runs = []
        for seed in (0, 1):
            a, _ = act(agent, np.zeros(2), np.ones(2), np.random.default_rng(seed), 0, k=5,
                       high_noise=0.0, low_noise=0.0)
            runs.append(a)
        np.testing.assert_array_equal(runs[0], runs[1])
        assert runs[0].shape == (2,)

    def test_clips_to_action_bounds(self):
        agent = small_agent()
        agent.low.params.values *= 50
        a = HierarchicalActor(agent, ChainEnv()).act(np.zeros((64, 2)), np.ones(2), np.random.default_rng(0), 0)
        assert np.abs(a).max() <= 1.0


class TestTrainLoop:
    def test_zero_steps(self, chain_ds):
        cfg = TrainConfig(total_steps=0, **SMALL)
        agent = Agent.create(cfg, 2, 2)
        before = agent.to_params().values.copy()
        metrics, agent = train(cfg, chain_ds, agent)
        assert metrics == []
        np.testing.assert_array_equal(agent.to_params().values, before)

    def test_metrics_rows(self, chain_ds):
        cfg = TrainConfig(total_steps=6, eval_interval=3, eval_episodes=1, **SMALL)
        metrics, agent = train(cfg, chain_ds)
        assert [m["step"] for m in metrics] == [3, 6]
        assert list(metrics[0]) == list(hp.METRIC_FIELDS)
        assert all(0.0 <= m["success_rate"] <= 1.0 for m in metrics)
        assert agent.step == 6

    def test_identical_runs(self, chain_ds):
        cfg = TrainConfig(total_steps=10, eval_interval=5, **SMALL)
        (m1, a1), (m2, a2) = train(cfg, chain_ds), train(cfg, chain_ds)
        assert m1 == m2
        np.testing.assert_array_equal(a1.to_params().values, a2.to_params().values)

    @pytest.mark.parametrize("family", hp.POLICY_FAMILIES)
    def test_resume_matches_uninterrupted(self, chain_ds, family):
        cfg = TrainConfig(total_steps=12, eval_interval=4, policy_family=family, **SMALL)
        full_metrics, full = train(cfg, chain_ds)
        _, half = train(cfg.replace(total_steps=8), chain_ds)
        blob = tn.params_to_bytes(half.to_params())
        resumed = Agent.from_params(cfg, tn.params_from_bytes(blob))
        tail, resumed = train(cfg, chain_ds, resumed)
        assert tail == full_metrics[-1:]
        np.testing.assert_array_equal(resumed.to_params().values, full.to_params().values)

    def test_dimension_mismatch(self, chain_ds):
        cfg = TrainConfig(total_steps=1, **SMALL)
        with pytest.raises(ConfigError):
            train(cfg, chain_ds, Agent.create(cfg, 4, 2))

    @pytest.mark.parametrize("bad", [dict(k=0), dict(beta=-1.0), dict(policy_family="mixture")])
    def test_invalid_config(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)
