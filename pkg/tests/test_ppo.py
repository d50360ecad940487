"""From-scratch PPO tests: gradient oracles, GAE equivalence, Adam, training."""

import math

import numpy as np
import pytest

from dsppo.ppo import (
    AdamState,
    GaussianPolicy,
    Mlp,
    PpoHyperParams,
    RolloutBuffer,
    adam_step,
    clipped_surrogate,
    flatten_grads,
    flatten_learner,
    gae,
    learner_params,
    total_loss,
    train_iteration,
)


def gae_oracle(rewards, values, bootstrap, gamma, lam):
    """Explicit O(T^2) power-series sum of discounted TD residuals."""
    T = len(rewards)
    vs = list(values) + [bootstrap]
    deltas = [rewards[t] + gamma * vs[t + 1] - vs[t] for t in range(T)]
    out = np.zeros(T)
    for t in range(T):
        out[t] = sum((gamma * lam) ** (i - t) * deltas[i] for i in range(t, T))
    return out


def make_batch(rng, state_dim, action_dim, size):
    return {
        "states": rng.standard_normal((size, state_dim)),
        "actions": rng.standard_normal((size, action_dim)),
        "log_probs": rng.standard_normal(size) * 0.1,
        "advantages": rng.standard_normal(size),
        "returns": rng.standard_normal(size),
    }


class TestMlp:
    def test_zero_parameters_zero_output(self):
        net = Mlp([3, 4, 2])
        for W in net.weights:
            W[:] = 0.0
        x = np.ones((5, 3))
        assert np.array_equal(net.forward(x), np.zeros((5, 2)))

    def test_single_linear_identity(self):
        net = Mlp([3, 3])
        net.weights[0][:] = np.eye(3)
        net.biases[0][:] = 0.0
        x = np.random.default_rng(0).standard_normal((4, 3))
        assert np.allclose(net.forward(x), x)

    def test_matches_hand_rolled_forward(self):
        rng = np.random.default_rng(2)
        net = Mlp([4, 5, 3], rng=rng)
        x = rng.standard_normal((2, 4))
        # independent evaluation of the affine/tanh chain
        h = np.tanh(x @ net.weights[0] + net.biases[0])
        want = h @ net.weights[1] + net.biases[1]
        assert np.allclose(net.forward(x), want, atol=1e-12)

    def test_dim_mismatch(self):
        net = Mlp([3, 2])
        with pytest.raises(ValueError):
            net.forward(np.ones((1, 4)))


class TestGaussianPolicy:
    def test_tiny_std_collapses_to_mean(self):
        rng = np.random.default_rng(3)
        pol = GaussianPolicy(4, 2, hidden=(8,), rng=rng)
        pol.log_std[:] = -20.0
        s = rng.standard_normal(4)
        mu = pol.mean(s)[0]
        a, _ = pol.sample(s, rng)
        assert np.allclose(a, mu, atol=1e-7)

    def test_log_prob_closed_form(self):
        rng = np.random.default_rng(4)
        pol = GaussianPolicy(3, 1, hidden=(4,), rng=rng)
        pol.log_std[:] = 0.0
        s = rng.standard_normal(3)
        mu = pol.mean(s)[0]
        lp = pol.log_prob(s, mu[None, :])[0]
        assert lp == pytest.approx(-0.5 * math.log(2 * math.pi), rel=1e-12)

    def test_entropy_against_monte_carlo(self):
        rng = np.random.default_rng(5)
        pol = GaussianPolicy(2, 3, hidden=(4,), rng=rng)
        pol.log_std[:] = np.array([0.2, -0.3, 0.5])
        s = rng.standard_normal(2)
        mu = pol.mean(s)[0]
        n = 200_000
        sigma = pol.std()
        samples = mu + sigma * rng.standard_normal((n, 3))
        lp = pol.log_prob(np.tile(s, (1, 1)), samples[:1])  # shape check
        logps = (
            -0.5 * ((samples - mu) / sigma) ** 2
            - np.log(sigma)
            - 0.5 * math.log(2 * math.pi)
        ).sum(axis=1)
        mc_entropy = -logps.mean()
        assert pol.entropy() == pytest.approx(mc_entropy, rel=5e-3)


class TestGae:
    def test_single_step(self):
        adv = gae([2.0], [1.0], 0.5, 0.9, 0.95)
        assert adv[0] == pytest.approx(2.0 + 0.9 * 0.5 - 1.0)

    def test_lambda_zero_is_td_residual(self):
        rng = np.random.default_rng(6)
        r = rng.standard_normal(10)
        v = rng.standard_normal(10)
        adv = gae(r, v, 0.3, 0.95, 0.0)
        deltas = r + 0.95 * np.append(v[1:], 0.3) - v
        assert np.allclose(adv, deltas, atol=1e-12)

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            T = int(rng.integers(1, 65))
            r = rng.standard_normal(T)
            v = rng.standard_normal(T)
            boot = float(rng.standard_normal())
            gamma = float(rng.uniform(0.5, 0.999))
            lam = float(rng.uniform(0.1, 1.0))
            assert np.max(np.abs(gae(r, v, boot, gamma, lam) - gae_oracle(r, v, boot, gamma, lam))) < 1e-12


class TestClippedSurrogate:
    def test_unit_ratio_unclipped(self):
        assert clipped_surrogate(np.array([1.0]), np.array([1.0]), 0.1)[0] == pytest.approx(1.0)

    def test_upper_clip_binds(self):
        assert clipped_surrogate(np.array([1.5]), np.array([1.0]), 0.1)[0] == pytest.approx(1.1)

    def test_negative_advantage_clip(self):
        assert clipped_surrogate(np.array([0.5]), np.array([-1.0]), 0.1)[0] == pytest.approx(-0.9)

    def test_identity_at_old_policy(self):
        rng = np.random.default_rng(8)
        adv = rng.standard_normal(100)
        assert np.allclose(clipped_surrogate(np.ones(100), adv, 0.2), adv)

    def test_never_exceeds_unclipped(self):
        rng = np.random.default_rng(9)
        r = rng.uniform(0.0, 3.0, size=500)
        a = rng.standard_normal(500)
        assert np.all(clipped_surrogate(r, a, 0.15) <= r * a + 1e-15)


def flat_param_list(policy, critic):
    return learner_params(policy, critic)


def numeric_gradient(batch, policy, critic, c1, c2, eps_clip, h=1e-5):
    """Central finite differences of the scalar loss over every parameter."""
    params = flat_param_list(policy, critic)
    grads = []
    for p in params:
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            lp, _, _ = total_loss(batch, policy, critic, c1, c2, eps_clip)
            p[idx] = orig - h
            lm, _, _ = total_loss(batch, policy, critic, c1, c2, eps_clip)
            p[idx] = orig
            g[idx] = (lp - lm) / (2 * h)
        grads.append(g)
    return grads


class TestTotalLossGradients:
    def test_perfect_critic_zero_value_loss(self):
        rng = np.random.default_rng(10)
        policy = GaussianPolicy(3, 2, hidden=(4,), rng=rng)
        critic = Mlp([3, 4, 1], rng=rng)
        batch = make_batch(rng, 3, 2, 6)
        batch["log_probs"] = policy.log_prob(batch["states"], batch["actions"])
        batch["returns"] = critic.forward(batch["states"])[:, 0]
        _, _, stats = total_loss(batch, policy, critic, 0.5, 0.0, 0.2)
        assert stats["value_loss"] == pytest.approx(0.0, abs=1e-24)

    def test_vanilla_policy_gradient_reduction(self):
        # c1=c2=0 and ratios=1: the loss gradient equals the score-function
        # gradient of -(1/B) sum A * log pi, checked by finite differences of
        # that independent objective
        rng = np.random.default_rng(11)
        policy = GaussianPolicy(3, 2, hidden=(4,), rng=rng)
        critic = Mlp([3, 4, 1], rng=rng)
        batch = make_batch(rng, 3, 2, 5)
        batch["log_probs"] = policy.log_prob(batch["states"], batch["actions"])
        _, grads, _ = total_loss(batch, policy, critic, 0.0, 0.0, 0.2)

        def pg_objective():
            lp = policy.log_prob(batch["states"], batch["actions"])
            return -float(np.mean(batch["advantages"] * lp))

        h = 1e-6
        params = policy.params()
        analytic = flatten_grads(grads)[: len(params)]
        for p, g in zip(params, analytic):
            flat, gflat = p.ravel(), g.ravel()
            for i in range(0, flat.size, max(1, flat.size // 5)):
                orig = flat[i]
                flat[i] = orig + h
                up = pg_objective()
                flat[i] = orig - h
                down = pg_objective()
                flat[i] = orig
                want = (up - down) / (2 * h)
                assert gflat[i] == pytest.approx(want, rel=1e-4, abs=1e-8)

    @pytest.mark.parametrize("seed", range(6))
    def test_gradients_match_finite_differences(self, seed):
        rng = np.random.default_rng(100 + seed)
        sd, ad = int(rng.integers(2, 6)), int(rng.integers(1, 4))
        policy = GaussianPolicy(sd, ad, hidden=(5,), rng=rng)
        policy.log_std[:] = rng.uniform(-1.0, 0.5, size=ad)
        critic = Mlp([sd, 4, 1], rng=rng)
        batch = make_batch(rng, sd, ad, 8)
        batch["log_probs"] = policy.log_prob(batch["states"], batch["actions"]) + rng.uniform(
            -0.05, 0.05, size=8
        )
        c1, c2, eps = 0.37, 0.013, 0.2
        _, grads, _ = total_loss(batch, policy, critic, c1, c2, eps)
        analytic = flatten_grads(grads)
        numeric = numeric_gradient(batch, policy, critic, c1, c2, eps)
        for a, n in zip(analytic, numeric):
            denom = np.maximum(np.abs(n), 1e-6)
            assert np.max(np.abs(a - n) / denom) < 1e-4

    def test_nan_raises_training_error(self):
        from dsppo.ppo import TrainingDivergenceError

        rng = np.random.default_rng(12)
        policy = GaussianPolicy(3, 2, hidden=(4,), rng=rng)
        critic = Mlp([3, 4, 1], rng=rng)
        policy.mean_net.weights[0][0, 0] = np.nan
        batch = make_batch(rng, 3, 2, 4)
        with pytest.raises(TrainingDivergenceError):
            total_loss(batch, policy, critic, 0.1, 0.1, 0.2)


class TestAdam:
    def test_zero_gradient_no_change(self):
        p = np.array([1.0, -2.0])
        state = AdamState.for_params([p])
        adam_step([p], [np.zeros(2)], state, lr=0.1)
        assert np.array_equal(p, [1.0, -2.0])

    def test_first_step_closed_form(self):
        # bias-corrected first step with g=1: delta = lr * 1 / (1 + eps) ~ lr
        p = np.array([0.0])
        state = AdamState.for_params([p])
        adam_step([p], [np.array([1.0])], state, lr=0.1)
        assert p[0] == pytest.approx(-0.1, rel=1e-7)

    def test_global_norm_clipping(self):
        # gradient norm 10 with cap 1: effective gradient scaled by 0.1,
        # verified against an unclipped step on the pre-scaled gradient
        p1 = np.array([0.0, 0.0])
        s1 = AdamState.for_params([p1])
        g = np.array([6.0, 8.0])  # norm 10
        adam_step([p1], [g], s1, lr=0.05, max_grad_norm=1.0)
        p2 = np.array([0.0, 0.0])
        s2 = AdamState.for_params([p2])
        adam_step([p2], [g * 0.1], s2, lr=0.05)
        assert np.allclose(p1, p2, atol=1e-15)


def fill_buffer(buf, rng):
    for _ in range(buf.capacity):
        buf.add(
            rng.standard_normal(buf.state_dim if hasattr(buf, "state_dim") else buf.states.shape[1]),
            rng.standard_normal(buf.actions.shape[1]),
            float(rng.standard_normal() * 0.1),
            float(rng.standard_normal()),
            float(rng.standard_normal()),
        )


class TestTrainIteration:
    def _setup(self, seed=0, T=32):
        rng = np.random.default_rng(seed)
        hp = PpoHyperParams(
            learning_rate=1e-3, minibatches=4, epochs=2, rollout_length=T,
            clip_eps=0.2, max_grad_norm=0.5, vf_coef=0.5, entropy_coef=0.01,
        )
        policy = GaussianPolicy(3, 2, hidden=(8,), rng=rng)
        critic = Mlp([3, 8, 1], rng=rng)
        buf = RolloutBuffer(T, 3, 2)
        fill_buffer(buf, rng)
        buf.finalize(0.0, hp.gamma, hp.gae_lambda)
        return policy, critic, buf, hp, rng

    def test_zero_epochs_no_update(self):
        policy, critic, buf, hp, rng = self._setup()
        hp.epochs = 0
        before = [p.copy() for p in learner_params(policy, critic)]
        train_iteration(buf, policy, critic, hp, rng)
        for b, p in zip(before, learner_params(policy, critic)):
            assert np.array_equal(b, p)

    def test_same_seed_identical_result(self):
        outs = []
        for _ in range(2):
            policy, critic, buf, hp, rng = self._setup(seed=5)
            train_iteration(buf, policy, critic, hp, rng)
            outs.append(np.concatenate([p.ravel() for p in learner_params(policy, critic)]))
        assert np.array_equal(outs[0], outs[1])

    def test_flat_and_list_paths_agree(self):
        policy1, critic1, buf1, hp, rng1 = self._setup(seed=9)
        train_iteration(buf1, policy1, critic1, hp, rng1)
        want = np.concatenate([p.ravel() for p in learner_params(policy1, critic1)])

        policy2, critic2, buf2, hp2, rng2 = self._setup(seed=9)
        flat = flatten_learner(policy2, critic2)
        adam = AdamState.for_params([flat])
        train_iteration(buf2, policy2, critic2, hp2, rng2, adam, flat_params=flat)
        assert np.allclose(flat, want, atol=1e-12)

    def test_advantage_normalization_property(self):
        rng = np.random.default_rng(30)
        adv = rng.standard_normal(64) * 5 + 3
        norm = (adv - adv.mean()) / (adv.std() + 1e-8)
        assert abs(norm.mean()) < 1e-6
        assert abs(norm.std() - 1.0) < 1e-6

    def test_bandit_convergence(self):
        # one-state bandit, reward = -||a - a*||^2: the policy mean must
        # approach the known optimum within 200 iterations
        rng = np.random.default_rng(42)
        target = np.array([0.5, -0.3])
        hp = PpoHyperParams(
            gamma=0.9, gae_lambda=0.95, learning_rate=3e-3, minibatches=4,
            epochs=6, rollout_length=64, clip_eps=0.2, max_grad_norm=1.0,
            vf_coef=0.5, entropy_coef=0.0,
        )
        policy = GaussianPolicy(1, 2, hidden=(16,), rng=rng)
        critic = Mlp([1, 16, 1], rng=rng)
        flat = flatten_learner(policy, critic)
        adam = AdamState.for_params([flat])
        state = np.zeros(1)
        start_err = np.linalg.norm(policy.mean(state)[0] - target)
        buf = RolloutBuffer(64, 1, 2)
        for _ in range(200):
            for _ in range(64):
                a, lp = policy.sample(state, rng)
                v = float(critic.forward(state)[0, 0])
                r = -float(np.sum((a - target) ** 2))
                buf.add(state, a, lp, v, r)
            buf.finalize(float(critic.forward(state)[0, 0]), hp.gamma, hp.gae_lambda)
            train_iteration(buf, policy, critic, hp, rng, adam, flat_params=flat)
            buf.reset()
        final_err = np.linalg.norm(policy.mean(state)[0] - target)
        assert final_err < 0.15
        assert final_err < start_err
