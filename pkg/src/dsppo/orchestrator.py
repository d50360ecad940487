"""Per-step two-stage pipeline and the training/evaluation drivers.

At every step each agent slot runs its stage-1 policy on the delayed CSI,
the projected stage-1 TPMs are reduced to singular values and exchanged, the
stage-2 policies refine the TPMs from (own stage-1 TPM, shared values), and
the environment applies the projected stage-2 TPMs.  Both rollout buffers
are trained once per episode with their stage-specific hyperparameters.

The IPPO baseline uses the same machinery with a single learner per agent:
state = stage-1 state, reward = the shared cooperative reward, no singular
value exchange.
"""

from dataclasses import dataclass
import csv
import json
import math
import os

import numpy as np

from .config import ExperimentConfig
from .env import AgentAction, MarlEnv, StepRecord
from .ppo import (
    PpoLearner,
    TrainingDivergenceError,
    clipped_surrogate,
)

CHECKPOINT_VERSION = 1


class DivergenceAbort(RuntimeError):
    """Training diverged; the last healthy checkpoint path is attached."""

    def __init__(self, message: str, checkpoint_path: str | None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass
class AgentBundle:
    """One cluster slot's learners (stage2 is None in IPPO mode)."""

    slot: int
    stage1: PpoLearner
    stage2: PpoLearner | None

    @property
    def learners(self) -> list[PpoLearner]:
        return [self.stage1] + ([self.stage2] if self.stage2 else [])


def make_agents(cfg: ExperimentConfig, env: MarlEnv, seed_seq: np.random.SeedSequence) -> list[AgentBundle]:
    agents = []
    children = seed_seq.spawn(2 * cfg.env.cluster_size)
    for slot in range(cfg.env.cluster_size):
        rng1 = np.random.default_rng(children[2 * slot])
        stage1 = PpoLearner(env.state1_dim, env.action_dim, cfg.ppo_stage1, rng1)
        stage2 = None
        if cfg.mode == "dsppo":
            rng2 = np.random.default_rng(children[2 * slot + 1])
            stage2 = PpoLearner(env.state2_dim, env.action_dim, cfg.ppo_stage2, rng2)
        agents.append(AgentBundle(slot=slot, stage1=stage1, stage2=stage2))
    return agents


def dsppo_step(agents: list[AgentBundle], env: MarlEnv, states1) -> tuple[list, StepRecord]:
    """One synchronized two-stage step; appends to both buffers per agent."""
    enc1, acts1, raw1, proj1 = [], [], [], []
    for agent, s1 in zip(agents, states1):
        e1 = env.encode_stage1(s1)
        action, logp, value = agent.stage1.act(e1)
        V = env.decode_action(action)
        enc1.append(e1)
        acts1.append((action, logp, value))
        raw1.append(V)
        proj1.append(env.project(V))

    enc2, acts2, raw2, proj2 = [], [], [], []
    for agent in agents:
        s2 = env.build_stage2_state(agent.slot, proj1)
        e2 = env.encode_stage2(s2)
        action, logp, value = agent.stage2.act(e2)
        V = env.decode_action(action)
        enc2.append(e2)
        acts2.append((action, logp, value))
        raw2.append(V)
        proj2.append(env.project(V))

    next_states, record = env.step(
        stage2_actions=[AgentAction(r, p) for r, p in zip(raw2, proj2)],
        stage1_actions=[AgentAction(r, p) for r, p in zip(raw1, proj1)],
    )
    for slot, agent in enumerate(agents):
        a1, lp1, v1 = acts1[slot]
        agent.stage1.buffer.add(enc1[slot], a1, lp1, v1, record.rewards_stage1[slot])
        a2, lp2, v2 = acts2[slot]
        agent.stage2.buffer.add(enc2[slot], a2, lp2, v2, record.rewards_stage2[slot])
    return next_states, record


def ippo_step(agents: list[AgentBundle], env: MarlEnv, states1) -> tuple[list, StepRecord]:
    """Single-stage step: agents share only the cooperative reward."""
    enc, acts, raw, proj = [], [], [], []
    for agent, s1 in zip(agents, states1):
        e = env.encode_stage1(s1)
        action, logp, value = agent.stage1.act(e)
        V = env.decode_action(action)
        enc.append(e)
        acts.append((action, logp, value))
        raw.append(V)
        proj.append(env.project(V))
    next_states, record = env.step(
        stage2_actions=[AgentAction(r, p) for r, p in zip(raw, proj)],
        stage1_actions=None,
    )
    for slot, agent in enumerate(agents):
        a, lp, v = acts[slot]
        agent.stage1.buffer.add(enc[slot], a, lp, v, record.rewards_stage2[slot])
    return next_states, record


def _bootstrap_stage2_state(agent: AgentBundle, env: MarlEnv, agents, states1) -> np.ndarray:
    """Stage-2 state at the rollout horizon, built from fresh stage-1 samples."""
    proj1 = []
    for other, s1 in zip(agents, states1):
        action, _, _ = other.stage1.act(env.encode_stage1(s1))
        proj1.append(env.project(env.decode_action(action)))
    return env.encode_stage2(env.build_stage2_state(agent.slot, proj1))


def batch_surrogate(learner: PpoLearner, clip_eps: float) -> float:
    """Mean clipped surrogate of the finalized buffer under current params.

    Evaluated before and after each stage-2 update as improvement telemetry;
    monitored, not asserted.
    """
    buf = learner.buffer
    logp_new = learner.policy.log_prob(buf.states, buf.actions)
    ratio = np.exp(logp_new - buf.log_probs)
    return float(clipped_surrogate(ratio, buf.advantages, clip_eps).mean())


class _AtomicCsv:
    """CSV writer that lands atomically: rows go to a temp file that is
    renamed into place on close (also via context manager / finalize)."""

    def __init__(self, path: str, header: list[str]):
        self.path = path
        self.tmp = path + ".tmp"
        self._fh = open(self.tmp, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(header)

    def row(self, values) -> None:
        self._writer.writerow(
            [repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in values]
        )

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            os.replace(self.tmp, self.path)
            self._fh = None


def save_checkpoint(path: str, agents: list[AgentBundle], episode: int, mode: str) -> None:
    """Versioned binary checkpoint: every parameter tensor, optimizer state
    and learner RNG state; round-trips bit-exactly."""
    arrays: dict[str, np.ndarray] = {}
    rng_states = {}
    for agent in agents:
        stages = [("s1", agent.stage1)] + ([("s2", agent.stage2)] if agent.stage2 else [])
        for tag, learner in stages:
            key = f"a{agent.slot}_{tag}"
            arrays[f"{key}_params"] = learner.flat_params
            arrays[f"{key}_adam_m"] = learner.adam.m[0]
            arrays[f"{key}_adam_v"] = learner.adam.v[0]
            arrays[f"{key}_adam_t"] = np.array(learner.adam.t)
            rng_states[key] = learner.rng.bit_generator.state
    meta = {
        "version": CHECKPOINT_VERSION,
        "mode": mode,
        "episode": episode,
        "rng_states": rng_states,
    }
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
    os.replace(tmp, path)


def load_checkpoint(path: str, agents: list[AgentBundle]) -> dict:
    """Restore parameters, optimizer and RNG state into existing agents."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        for agent in agents:
            stages = [("s1", agent.stage1)] + ([("s2", agent.stage2)] if agent.stage2 else [])
            for tag, learner in stages:
                key = f"a{agent.slot}_{tag}"
                learner.flat_params[:] = data[f"{key}_params"]
                learner.adam.m[0][:] = data[f"{key}_adam_m"]
                learner.adam.v[0][:] = data[f"{key}_adam_v"]
                learner.adam.t = int(data[f"{key}_adam_t"])
                state = meta["rng_states"][key]
                state["state"] = {k: int(v) for k, v in state["state"].items()}
                learner.rng.bit_generator.state = state
    return meta


def _step_header(L: int) -> list[str]:
    return (
        ["episode", "step", "c_prime"]
        + [f"c_{i+1}" for i in range(L)]
        + [f"r1_{i+1}" for i in range(L)]
        + [f"r2_{i+1}" for i in range(L)]
        + ["handover_flag"]
    )


def run_training(cfg: ExperimentConfig, run_dir: str) -> dict:
    """Full training run (dsppo or ippo): rollouts, per-episode PPO updates,
    CSV/checkpoint artifacts.  Returns a summary with the episodic rates."""
    os.makedirs(run_dir, exist_ok=True)
    ckpt_dir = os.path.join(run_dir, "checkpoints")
    stats_dir = os.path.join(run_dir, "stats")
    os.makedirs(ckpt_dir, exist_ok=True)
    os.makedirs(stats_dir, exist_ok=True)

    env = MarlEnv(cfg.env)
    master = np.random.SeedSequence(cfg.seed)
    env_seed, agent_seed = master.spawn(2)
    states = env.reset(env_seed)
    agents = make_agents(cfg, env, agent_seed)
    L = cfg.env.cluster_size
    T = cfg.rollout_length
    is_dsppo = cfg.mode == "dsppo"

    episodic = _AtomicCsv(
        os.path.join(run_dir, "episodic_rate.csv"),
        ["episode", "mean_rate_mbps", "std_rate_mbps", "handover_count"],
    )
    steps_csv = (
        _AtomicCsv(os.path.join(run_dir, "steps.csv"), _step_header(L))
        if cfg.log_steps
        else None
    )
    cluster_csv = (
        _AtomicCsv(
            os.path.join(run_dir, "cluster_membership.csv"),
            ["epoch"] + [f"sat_id_{i+1}" for i in range(L)],
        )
        if cfg.cluster_dump
        else None
    )
    stat_files = {}
    for agent in agents:
        tags = ["s1", "s2"] if is_dsppo else ["s1"]
        for tag in tags:
            header = [
                "iter", "mean_reward", "policy_loss", "value_loss",
                "entropy", "approx_kl", "clip_fraction",
            ]
            if tag == "s2":
                header += ["surrogate_before", "surrogate_after"]
            stat_files[(agent.slot, tag)] = _AtomicCsv(
                os.path.join(stats_dir, f"agent{agent.slot}_{tag}.csv"), header
            )

    mean_rates: list[float] = []
    last_ckpt: str | None = None
    try:
        for episode in range(cfg.episodes):
            env.new_episode()
            rates = np.zeros(T)
            handovers = 0
            chan_dump = (
                open(os.path.join(run_dir, f"channels_ep{episode}.bin.tmp"), "wb")
                if cfg.channel_dump
                else None
            )
            for t in range(T):
                if cluster_csv is not None:
                    cluster_csv.row([env.epoch, *env.cluster.members])
                if chan_dump is not None:
                    _dump_channels(chan_dump, env)
                if is_dsppo:
                    states, record = dsppo_step(agents, env, states)
                else:
                    states, record = ippo_step(agents, env, states)
                rates[t] = record.cluster_rate
                handovers += len(record.handover_events)
                if steps_csv is not None:
                    c_l = record.individual_rates if record.individual_rates is not None else np.zeros(L)
                    r1 = record.rewards_stage1 if record.rewards_stage1 is not None else np.zeros(L)
                    steps_csv.row(
                        [episode, t, record.cluster_rate, *c_l, *r1, *record.rewards_stage2, 1 if record.handover else 0]
                    )
            if chan_dump is not None:
                chan_dump.close()
                base = os.path.join(run_dir, f"channels_ep{episode}.bin")
                os.replace(base + ".tmp", base)

            for agent in agents:
                boot1 = agent.stage1.value(env.encode_stage1(states[agent.slot]))
                agent.stage1.buffer.finalize(boot1, cfg.ppo_stage1.gamma, cfg.ppo_stage1.gae_lambda)
                if is_dsppo:
                    e2 = _bootstrap_stage2_state(agent, env, agents, states)
                    boot2 = agent.stage2.value(e2)
                    agent.stage2.buffer.finalize(boot2, cfg.ppo_stage2.gamma, cfg.ppo_stage2.gae_lambda)

            for agent in agents:
                s1_stats = agent.stage1.train()
                stat_files[(agent.slot, "s1")].row(
                    [episode] + [s1_stats[k] for k in (
                        "mean_reward", "policy_loss", "value_loss", "entropy", "approx_kl", "clip_fraction")]
                )
                if is_dsppo:
                    before = batch_surrogate(agent.stage2, cfg.ppo_stage2.clip_eps)
                    s2_stats = train_iteration_keepbuf(agent.stage2)
                    after = batch_surrogate(agent.stage2, cfg.ppo_stage2.clip_eps)
                    agent.stage2.buffer.reset()
                    stat_files[(agent.slot, "s2")].row(
                        [episode] + [s2_stats[k] for k in (
                            "mean_reward", "policy_loss", "value_loss", "entropy", "approx_kl", "clip_fraction")]
                        + [before, after]
                    )

            mean_rate = float(rates.mean())
            mean_rates.append(mean_rate)
            episodic.row([episode, mean_rate, float(rates.std()), handovers])
            if not math.isfinite(mean_rate):
                raise TrainingDivergenceError(f"episode {episode}: non-finite episodic rate")
            if cfg.checkpoint_every > 0 and (episode + 1) % cfg.checkpoint_every == 0:
                last_ckpt = os.path.join(ckpt_dir, f"checkpoint_ep{episode+1}.npz")
                save_checkpoint(last_ckpt, agents, episode + 1, cfg.mode)
        final = os.path.join(ckpt_dir, "checkpoint_final.npz")
        save_checkpoint(final, agents, cfg.episodes, cfg.mode)
        last_ckpt = final
    except TrainingDivergenceError as exc:
        emergency = os.path.join(ckpt_dir, "checkpoint_diverged.npz")
        save_checkpoint(emergency, agents, len(mean_rates), cfg.mode)
        raise DivergenceAbort(str(exc), emergency) from exc
    finally:
        episodic.close()
        if steps_csv is not None:
            steps_csv.close()
        if cluster_csv is not None:
            cluster_csv.close()
        for f in stat_files.values():
            f.close()

    return {
        "mean_rates": mean_rates,
        "episodic_csv": os.path.join(run_dir, "episodic_rate.csv"),
        "checkpoint": last_ckpt,
        "run_dir": run_dir,
    }


def _dump_channels(fh, env: MarlEnv) -> None:
    """Append current cluster CSI, little-endian f64 interleaved re/im,
    row-major M x K per satellite in cluster order."""
    for sid in env.cluster.members:
        H = env._current_obs[sid].H
        inter = np.empty(H.size * 2)
        inter[0::2] = H.real.ravel()
        inter[1::2] = H.imag.ravel()
        inter.astype("<f8").tofile(fh)


def train_iteration_keepbuf(learner: PpoLearner) -> dict:
    """Run one PPO update without resetting the buffer (telemetry needs it)."""
    from .ppo import train_iteration

    return train_iteration(
        learner.buffer, learner.policy, learner.critic, learner.hp,
        learner.rng, learner.adam, flat_params=learner.flat_params,
    )


# -- evaluation and baselines -------------------------------------------------


def run_eval(cfg: ExperimentConfig, checkpoint_path: str, episodes: int, run_dir: str) -> dict:
    """Deterministic evaluation: roll episodes with the policy means."""
    os.makedirs(run_dir, exist_ok=True)
    env = MarlEnv(cfg.env)
    master = np.random.SeedSequence(cfg.seed)
    env_seed, agent_seed = master.spawn(2)
    states = env.reset(env_seed)
    agents = make_agents(cfg, env, agent_seed)
    meta = load_checkpoint(checkpoint_path, agents)
    if meta["mode"] != cfg.mode:
        raise ValueError(f"checkpoint was trained in mode {meta['mode']!r}, config says {cfg.mode!r}")
    T = cfg.rollout_length
    is_dsppo = cfg.mode == "dsppo"
    episodic = _AtomicCsv(
        os.path.join(run_dir, "episodic_rate.csv"),
        ["episode", "mean_rate_mbps", "std_rate_mbps", "handover_count"],
    )
    means = []
    try:
        for episode in range(episodes):
            env.new_episode()
            rates = np.zeros(T)
            handovers = 0
            for t in range(T):
                proj1 = []
                for agent, s1 in zip(agents, states):
                    mu = agent.stage1.policy.mean(env.encode_stage1(s1))[0]
                    proj1.append(env.project(env.decode_action(mu)))
                if is_dsppo:
                    actions = []
                    for agent in agents:
                        s2 = env.build_stage2_state(agent.slot, proj1)
                        mu2 = agent.stage2.policy.mean(env.encode_stage2(s2))[0]
                        V = env.decode_action(mu2)
                        actions.append(AgentAction(V, env.project(V)))
                else:
                    actions = [AgentAction(v, v) for v in proj1]
                states, record = env.step(actions, None)
                rates[t] = record.cluster_rate
                handovers += len(record.handover_events)
            means.append(float(rates.mean()))
            episodic.row([episode, float(rates.mean()), float(rates.std()), handovers])
    finally:
        episodic.close()
    return {
        "mean_rate": float(np.mean(means)),
        "std_rate": float(np.std(means)),
        "episode_means": means,
        "run_dir": run_dir,
    }


def run_baseline(cfg: ExperimentConfig, kind: str, episodes: int, run_dir: str) -> dict:
    """Sanity baselines: ``random`` TPMs or a delayed-CSI matched filter."""
    if kind not in ("random", "mf"):
        raise ValueError(f"unknown baseline {kind!r}")
    os.makedirs(run_dir, exist_ok=True)
    env = MarlEnv(cfg.env)
    master = np.random.SeedSequence(cfg.seed)
    env_seed, agent_seed = master.spawn(2)
    states = env.reset(env_seed)
    rng = np.random.default_rng(agent_seed)
    T = cfg.rollout_length
    P = cfg.env.radio.per_sat_power_w
    K = cfg.env.n_users
    episodic = _AtomicCsv(
        os.path.join(run_dir, "episodic_rate.csv"),
        ["episode", "mean_rate_mbps", "std_rate_mbps", "handover_count"],
    )
    means = []
    try:
        for episode in range(episodes):
            env.new_episode()
            rates = np.zeros(T)
            handovers = 0
            for t in range(T):
                actions = []
                for s1 in states:
                    if kind == "random":
                        V = env.decode_action(rng.standard_normal(env.action_dim))
                    else:
                        H = s1.H_delayed
                        cols = [
                            math.sqrt(P / K) * H[:, k] / max(np.linalg.norm(H[:, k]), 1e-30)
                            for k in range(K)
                        ]
                        V = np.stack(cols, axis=1)
                    actions.append(AgentAction(V, env.project(V)))
                states, record = env.step(actions, None)
                rates[t] = record.cluster_rate
                handovers += len(record.handover_events)
            means.append(float(rates.mean()))
            episodic.row([episode, float(rates.mean()), float(rates.std()), handovers])
    finally:
        episodic.close()
    return {
        "mean_rate": float(np.mean(means)),
        "std_rate": float(np.std(means)),
        "episode_means": means,
        "run_dir": run_dir,
    }
