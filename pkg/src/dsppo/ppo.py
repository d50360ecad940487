"""From-scratch PPO: numpy MLPs with hand-written reverse-mode gradients.

The actor is a diagonal-Gaussian policy (MLP mean, state-independent
log-std); the critic a scalar MLP.  The training loop implements the
standard clipped-surrogate objective

    L = L_clip - c1 * L_VF + c2 * H

maximised via Adam on its negation, with generalized advantage estimation
over fixed-length rollouts and per-minibatch advantage normalisation.
Every gradient is accumulated analytically; tests check them against central
finite differences.
"""

from dataclasses import dataclass, field
import math

import numpy as np

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class TrainingDivergenceError(RuntimeError):
    """Raised when a non-finite value appears in a forward or backward pass."""


@dataclass
class PpoHyperParams:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    learning_rate: float = 3e-3
    minibatches: int = 32
    clip_eps: float = 0.1
    max_grad_norm: float = 1.0
    vf_coef: float = 0.1
    entropy_coef: float = 0.001
    epochs: int = 30
    rollout_length: int = 512
    normalize_advantages: bool = True

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0 and 0.0 < self.gae_lambda <= 1.0):
            raise ValueError("gamma and gae_lambda must lie in (0, 1]")
        if self.clip_eps <= 0:
            raise ValueError("clip epsilon must be positive")
        if self.minibatches <= 0 or self.minibatches > self.rollout_length:
            raise ValueError("minibatches must be in [1, rollout_length]")


def stage1_defaults() -> PpoHyperParams:
    return PpoHyperParams(
        gamma=0.99, gae_lambda=0.95, learning_rate=3e-3, minibatches=32,
        clip_eps=0.1, max_grad_norm=1.0, vf_coef=0.1, entropy_coef=0.001,
        epochs=30, rollout_length=512,
    )


def stage2_defaults() -> PpoHyperParams:
    return PpoHyperParams(
        gamma=0.95, gae_lambda=0.9, learning_rate=4e-3, minibatches=6,
        clip_eps=0.01, max_grad_norm=0.6, vf_coef=0.01, entropy_coef=0.1,
        epochs=10, rollout_length=512,
    )


def _orthogonal(rng: np.random.Generator, shape: tuple[int, int], gain: float) -> np.ndarray:
    a = rng.standard_normal(shape)
    q, r = np.linalg.qr(a if shape[0] >= shape[1] else a.T)
    q = q * np.sign(np.diag(r))
    if shape[0] < shape[1]:
        q = q.T
    return np.ascontiguousarray(gain * q[: shape[0], : shape[1]])


class Mlp:
    """Fully-connected net with tanh hidden activations and a linear head.

    Parameters live in ``weights``/``biases``; ``forward`` caches the
    activations needed by ``backward``, which returns parameter gradients
    (and optionally the gradient w.r.t. the input batch).
    """

    def __init__(
        self,
        sizes: list[int],
        rng: np.random.Generator | None = None,
        out_gain: float = 1.0,
    ):
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output dims")
        self.sizes = list(sizes)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        rng = rng or np.random.default_rng(0)
        for i in range(len(sizes) - 1):
            gain = math.sqrt(2.0) if i < len(sizes) - 2 else out_gain
            self.weights.append(_orthogonal(rng, (sizes[i], sizes[i + 1]), gain))
            self.biases.append(np.zeros(sizes[i + 1]))
        self._cache: list[np.ndarray] | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.sizes[0]:
            raise ValueError(f"expected input dim {self.sizes[0]}, got {x.shape[1]}")
        acts = [x]
        h = x
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if i < len(self.weights) - 1:
                h = np.tanh(h)
            acts.append(h)
        self._cache = acts
        if not np.all(np.isfinite(h)):
            raise TrainingDivergenceError(
                f"non-finite MLP output (input range [{x.min():.3g}, {x.max():.3g}])"
            )
        return h

    def backward(self, grad_out: np.ndarray, need_input_grad: bool = False):
        """Backprop ``grad_out`` (d loss / d output) through the cached pass."""
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        acts = self._cache
        g = np.atleast_2d(grad_out)
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)
        for i in reversed(range(len(self.weights))):
            grads_w[i] = acts[i].T @ g
            grads_b[i] = g.sum(axis=0)
            if i > 0:
                g = (g @ self.weights[i].T) * (1.0 - acts[i] ** 2)
            elif need_input_grad:
                g = g @ self.weights[i].T
        in_grad = g if need_input_grad else None
        return grads_w, grads_b, in_grad

    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend([W, b])
        return out


class GaussianPolicy:
    """Diagonal-Gaussian policy: MLP mean plus a state-independent log-std.

    ``log_std`` is clamped to [-20, 2] wherever it is consumed, matching the
    usual numerical-stability convention.
    """

    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        hidden: tuple[int, ...] = (64, 64, 64),
        rng: np.random.Generator | None = None,
    ):
        self.mean_net = Mlp([state_dim] + list(hidden) + [action_dim], rng, out_gain=0.01)
        self.log_std = np.zeros(action_dim)
        self.action_dim = action_dim

    def std(self) -> np.ndarray:
        return np.exp(np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX))

    def mean(self, state: np.ndarray) -> np.ndarray:
        return self.mean_net.forward(state)

    def sample(self, state: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, float]:
        """Draw an action and its log-probability for one state."""
        mu = self.mean_net.forward(state)[0]
        sigma = self.std()
        action = mu + sigma * rng.standard_normal(self.action_dim)
        return action, self.log_prob(state, action[None, :])[0]

    def log_prob(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        mu = self.mean_net.forward(states)
        sigma = self.std()
        z = (np.atleast_2d(actions) - mu) / sigma
        return (-0.5 * z**2 - np.log(sigma) - _HALF_LOG_2PI).sum(axis=1)

    def entropy(self) -> float:
        """Exact differential entropy of the (state-independent-std) Gaussian."""
        log_sigma = np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX)
        return float(log_sigma.sum() + self.action_dim * (0.5 + _HALF_LOG_2PI))

    def params(self) -> list[np.ndarray]:
        return self.mean_net.params() + [self.log_std]


@dataclass
class RolloutBuffer:
    """Fixed-length per-agent trajectory store for one training iteration."""

    capacity: int
    state_dim: int
    action_dim: int
    states: np.ndarray = field(init=False)
    actions: np.ndarray = field(init=False)
    log_probs: np.ndarray = field(init=False)
    values: np.ndarray = field(init=False)
    rewards: np.ndarray = field(init=False)
    dones: np.ndarray = field(init=False)
    advantages: np.ndarray | None = field(init=False, default=None)
    returns: np.ndarray | None = field(init=False, default=None)
    size: int = field(init=False, default=0)

    def __post_init__(self):
        self.states = np.zeros((self.capacity, self.state_dim))
        self.actions = np.zeros((self.capacity, self.action_dim))
        self.log_probs = np.zeros(self.capacity)
        self.values = np.zeros(self.capacity)
        self.rewards = np.zeros(self.capacity)
        self.dones = np.zeros(self.capacity, dtype=bool)

    def add(self, state, action, log_prob, value, reward, done=False):
        if self.size >= self.capacity:
            raise RuntimeError("rollout buffer full")
        i = self.size
        self.states[i] = state
        self.actions[i] = action
        self.log_probs[i] = log_prob
        self.values[i] = value
        self.rewards[i] = reward
        self.dones[i] = done
        self.size += 1

    def finalize(self, bootstrap_value: float, gamma: float, lam: float) -> None:
        if self.size != self.capacity:
            raise RuntimeError(f"buffer holds {self.size}/{self.capacity} steps")
        self.advantages = gae(self.rewards, self.values, bootstrap_value, gamma, lam)
        self.returns = self.advantages + self.values

    def reset(self) -> None:
        self.size = 0
        self.advantages = None
        self.returns = None


def gae(
    rewards: np.ndarray,
    values: np.ndarray,
    bootstrap_value: float,
    gamma: float,
    lam: float,
) -> np.ndarray:
    """Generalized advantage estimation over a fixed-length rollout.

    A_t = sum_{i >= t} (gamma * lam)^(i - t) * delta_i with
    delta_i = r_i + gamma * V_{i+1} - V_i and V_T the bootstrap value,
    evaluated by the standard reverse recursion.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    T = len(rewards)
    next_values = np.append(values[1:], bootstrap_value)
    deltas = rewards + gamma * next_values - values
    adv = np.zeros(T)
    acc = 0.0
    for t in reversed(range(T)):
        acc = deltas[t] + gamma * lam * acc
        adv[t] = acc
    return adv


def clipped_surrogate(ratio: np.ndarray, advantage: np.ndarray, eps: float) -> np.ndarray:
    """Per-sample clipped objective min(r * A, clip(r, 1-eps, 1+eps) * A)."""
    if eps <= 0:
        raise ValueError("clip epsilon must be positive")
    ratio = np.asarray(ratio, dtype=float)
    advantage = np.asarray(advantage, dtype=float)
    return np.minimum(ratio * advantage, np.clip(ratio, 1.0 - eps, 1.0 + eps) * advantage)


def total_loss(
    batch: dict,
    policy: GaussianPolicy,
    critic: Mlp,
    c1: float,
    c2: float,
    clip_eps: float,
) -> tuple[float, dict]:
    """PPO composite loss and analytic gradients for every parameter.

    The returned scalar is the negated objective -(L_clip - c1*L_VF + c2*H),
    i.e. the quantity Adam minimises.  Gradients come back as
    {"actor_w", "actor_b", "log_std", "critic_w", "critic_b"} matching the
    parameter layout of ``policy`` and ``critic``.  Value targets are
    advantage + old value, per the standard GAE return definition.
    """
    states = batch["states"]
    actions = batch["actions"]
    logp_old = batch["log_probs"]
    adv = batch["advantages"]
    v_targets = batch["returns"]
    B = len(states)
    if B == 0:
        raise ValueError("empty batch")

    mu = policy.mean_net.forward(states)
    log_sigma = np.clip(policy.log_std, LOG_STD_MIN, LOG_STD_MAX)
    sigma = np.exp(log_sigma)
    diff = actions - mu
    z2 = (diff / sigma) ** 2
    logp_new = (-0.5 * z2 - log_sigma - _HALF_LOG_2PI).sum(axis=1)
    ratio = np.exp(logp_new - logp_old)
    if not np.all(np.isfinite(ratio)):
        raise TrainingDivergenceError(
            f"non-finite ratio: logp range [{logp_new.min():.3g}, {logp_new.max():.3g}]"
        )

    surr_unclipped = ratio * adv
    surr_clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    surr = np.minimum(surr_unclipped, surr_clipped)
    l_clip = surr.mean()

    values = critic.forward(states)[:, 0]
    v_err = values - v_targets
    l_vf = float(np.mean(v_err**2))

    entropy = policy.entropy()
    loss = -(l_clip - c1 * l_vf + c2 * entropy)

    # d(-L_clip)/d logp_new: the min picks the unclipped branch (ties included);
    # when the clipped branch is strictly smaller the ratio sits outside the
    # clip interval, where the clipped term is constant in theta.
    active = (surr_unclipped <= surr_clipped).astype(float)
    dsurr_dlogp = active * ratio * adv / B
    g_logp = -dsurr_dlogp

    # chain into the Gaussian: dlogp/dmu = diff/sigma^2, dlogp/dlogstd = z^2 - 1
    g_mu = g_logp[:, None] * (diff / sigma**2)
    actor_w, actor_b, _ = policy.mean_net.backward(g_mu)
    g_log_std = (g_logp[:, None] * (z2 - 1.0)).sum(axis=0)
    # entropy bonus: dH/dlog_std = 1 wherever the clamp is inactive
    unclamped = (policy.log_std > LOG_STD_MIN) & (policy.log_std < LOG_STD_MAX)
    g_log_std = g_log_std - c2 * unclamped.astype(float)

    g_values = c1 * 2.0 * v_err[:, None] / B
    critic_w, critic_b, _ = critic.backward(g_values)

    grads = {
        "actor_w": actor_w,
        "actor_b": actor_b,
        "log_std": g_log_std,
        "critic_w": critic_w,
        "critic_b": critic_b,
    }
    stats = {
        "policy_loss": float(-l_clip),
        "value_loss": l_vf,
        "entropy": entropy,
        "approx_kl": float(np.mean(logp_old - logp_new)),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > clip_eps)),
    }
    return float(loss), grads, stats


def flatten_grads(grads: dict) -> list[np.ndarray]:
    out = []
    for w, b in zip(grads["actor_w"], grads["actor_b"]):
        out.extend([w, b])
    out.append(grads["log_std"])
    for w, b in zip(grads["critic_w"], grads["critic_b"]):
        out.extend([w, b])
    return out


def learner_params(policy: GaussianPolicy, critic: Mlp) -> list[np.ndarray]:
    """All trainable arrays of one PPO learner, in a fixed order."""
    return policy.params() + critic.params()


def flatten_learner(policy: GaussianPolicy, critic: Mlp) -> np.ndarray:
    """Re-home all learner parameters into one flat vector.

    The networks' weight/bias arrays (and log_std) are rebound to views of
    the returned vector, so a single in-place Adam update on the flat vector
    is visible to every forward pass.  Callers must keep mutating the views
    in place (never rebind them).
    """
    params = learner_params(policy, critic)
    flat = np.concatenate([p.ravel() for p in params])
    views = []
    offset = 0
    for p in params:
        views.append(flat[offset : offset + p.size].reshape(p.shape))
        offset += p.size
    n_actor = len(policy.mean_net.weights)
    for i in range(n_actor):
        policy.mean_net.weights[i] = views[2 * i]
        policy.mean_net.biases[i] = views[2 * i + 1]
    policy.log_std = views[2 * n_actor]
    for i in range(len(critic.weights)):
        critic.weights[i] = views[2 * n_actor + 1 + 2 * i]
        critic.biases[i] = views[2 * n_actor + 2 + 2 * i]
    return flat


@dataclass
class AdamState:
    """First/second-moment accumulators for one list of parameter arrays."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: list[np.ndarray]) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])


def adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float,
    max_grad_norm: float | None = None,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """In-place Adam update with optional global-L2 gradient clipping."""
    if len(params) != len(grads):
        raise ValueError("parameter/gradient count mismatch")
    if max_grad_norm is not None:
        total = math.sqrt(sum(float(np.sum(g**2)) for g in grads))
        if total > max_grad_norm and total > 0:
            scale = max_grad_norm / total
            grads = [g * scale for g in grads]
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g**2
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


class PpoLearner:
    """One actor-critic pair with its rollout buffer and optimizer state.

    Parameters are re-homed into a single flat vector so an update is one
    Adam step on one array instead of a few dozen small ones.
    """

    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        hp: PpoHyperParams,
        rng: np.random.Generator,
        actor_hidden: tuple[int, ...] = (64, 64, 64),
        critic_hidden: tuple[int, ...] = (128, 64, 64),
    ):
        self.hp = hp
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.policy = GaussianPolicy(state_dim, action_dim, actor_hidden, rng)
        self.critic = Mlp([state_dim] + list(critic_hidden) + [1], rng, out_gain=1.0)
        self.flat_params = flatten_learner(self.policy, self.critic)
        self.buffer = RolloutBuffer(hp.rollout_length, state_dim, action_dim)
        self.adam = AdamState.for_params([self.flat_params])
        self.rng = rng

    def act(self, state: np.ndarray) -> tuple[np.ndarray, float, float]:
        action, logp = self.policy.sample(state, self.rng)
        value = float(self.critic.forward(state)[0, 0])
        return action, logp, value

    def value(self, state: np.ndarray) -> float:
        return float(self.critic.forward(state)[0, 0])

    def train(self) -> dict:
        stats = train_iteration(
            self.buffer, self.policy, self.critic, self.hp, self.rng,
            self.adam, flat_params=self.flat_params,
        )
        self.buffer.reset()
        return stats


def train_iteration(
    buffer: RolloutBuffer,
    policy: GaussianPolicy,
    critic: Mlp,
    hp: PpoHyperParams,
    rng: np.random.Generator,
    adam: AdamState | None = None,
    flat_params: np.ndarray | None = None,
) -> dict:
    """One PPO update: ``hp.epochs`` shuffled passes over the finalized buffer.

    The buffer is split into ``hp.minibatches`` nearly-equal minibatches per
    epoch; advantages are normalised per minibatch when enabled.  Returns
    aggregate statistics of the last epoch.  When ``flat_params`` is given it
    must be the learner's flattened parameter vector (see
    :func:`flatten_learner`); both paths perform identical updates.
    """
    if buffer.advantages is None:
        raise RuntimeError("buffer must be finalized before training")
    if flat_params is None:
        params = learner_params(policy, critic)
    else:
        params = [flat_params]
    if adam is None:
        adam = AdamState.for_params(params)
    stats = {
        "policy_loss": 0.0, "value_loss": 0.0, "entropy": policy.entropy(),
        "approx_kl": 0.0, "clip_fraction": 0.0, "mean_reward": float(buffer.rewards.mean()),
    }
    n = buffer.capacity
    for _ in range(hp.epochs):
        perm = rng.permutation(n)
        epoch_stats = []
        for idx in np.array_split(perm, hp.minibatches):
            adv = buffer.advantages[idx]
            if hp.normalize_advantages and len(idx) > 1:
                adv = (adv - adv.mean()) / (adv.std() + 1e-8)
            batch = {
                "states": buffer.states[idx],
                "actions": buffer.actions[idx],
                "log_probs": buffer.log_probs[idx],
                "advantages": adv,
                "returns": buffer.returns[idx],
            }
            _, grads, mb_stats = total_loss(
                batch, policy, critic, hp.vf_coef, hp.entropy_coef, hp.clip_eps
            )
            grad_list = flatten_grads(grads)
            if flat_params is not None:
                grad_list = [np.concatenate([g.ravel() for g in grad_list])]
            adam_step(params, grad_list, adam, hp.learning_rate, hp.max_grad_norm)
            np.clip(policy.log_std, LOG_STD_MIN, LOG_STD_MAX, out=policy.log_std)
            epoch_stats.append(mb_stats)
        for key in ("policy_loss", "value_loss", "entropy", "approx_kl", "clip_fraction"):
            stats[key] = float(np.mean([s[key] for s in epoch_stats]))
    return stats
