"""Multi-agent delayed-CSI precoding environment.

Each step, every agent slot (one per cluster position) receives the delayed
CSI of the satellite it currently controls plus its own previously applied
TPM, acts in two stages, and the world then advances: satellites and users
move, fresh CSI is generated into the delay buffer, and the serving cluster
is reselected (possibly producing a handover).  The realised cluster
sum-rate is always evaluated on the *current* channel while agents only ever
observed the channel ``delay_steps`` epochs ago.

Per-satellite channels are phase-referenced to the coverage center by
default (each satellite pre-compensates the nominal carrier phase of its
center path), which removes the fast bulk phase rotation that would
otherwise make any delayed observation useless at 2 GHz; the residual
user-offset phase still ages with geometry.  Disable with
``phase_ref_center=False`` for the raw absolute-phase channel.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from .channel import (
    ChannelObservation,
    ChannelSampler,
    DelayBuffer,
    RadioConfig,
    SPEED_OF_LIGHT,
)
from .constellation import (
    Cluster,
    ConstellationPropagator,
    CoverageGapError,
    UserField,
    build_constellation,
    default_shell_specs,
    detect_handover,
    latlon_to_ecef,
)
from .precoding import project_power, singular_values, sum_rate, trace_power

POWER_PENALTY_COEF = 0.3
RATE_FLOOR_MBPS = 1e-6


@dataclass(frozen=True)
class RewardThresholds:
    """Quantizer thresholds (Mbps) of the stage-1 rate reward."""

    xi1: float = 120.0
    xi2: float = 150.0
    xi3: float = 210.0
    xi4: float = 270.0
    xi5: float = 360.0

    def __post_init__(self):
        xs = (self.xi1, self.xi2, self.xi3, self.xi4, self.xi5)
        if not all(a < b for a, b in zip(xs, xs[1:])):
            raise ValueError(f"thresholds must be strictly increasing, got {xs}")

    def as_tuple(self) -> tuple[float, ...]:
        return (self.xi1, self.xi2, self.xi3, self.xi4, self.xi5)


def quantized_rate_reward(c_t: float, thresholds: RewardThresholds) -> float:
    """Six-branch quantizer f(c): -2 .. 2 below the top threshold, then
    2 + ceil(c) - xi5 above it (unbounded, rewarding every extra Mbps)."""
    t = thresholds
    if c_t <= t.xi1:
        return -2.0
    if c_t <= t.xi2:
        return -1.0
    if c_t <= t.xi3:
        return 0.0
    if c_t <= t.xi4:
        return 1.0
    if c_t <= t.xi5:
        return 2.0
    return 2.0 + math.ceil(c_t) - t.xi5


def power_penalty(V: np.ndarray, budget: float) -> float:
    """p = 0.3 * |tr(V V^H) - P|: deviation from the exact power budget."""
    return POWER_PENALTY_COEF * abs(trace_power(V) - budget)


def stage1_reward(
    c_t: float,
    c_prev: float,
    V: np.ndarray,
    thresholds: RewardThresholds,
    budget: float,
) -> float:
    """Individual-rate reward f(c_t) + g(c_t, c_prev) - p.

    g = sign(c_t - c_prev) * 1.5 - 0.5 with sign(0) = 0, so improvement earns
    +1.0, regression -2.0 and a tie -0.5.
    """
    if c_t < 0 or c_prev < 0:
        raise ValueError("sum-rates must be nonnegative")
    f = quantized_rate_reward(c_t, thresholds)
    g = float(np.sign(c_t - c_prev)) * 1.5 - 0.5
    return f + g - power_penalty(V, budget)


def stage2_reward(c_t: float, c_prev: float, V: np.ndarray, budget: float) -> float:
    """Cooperative reward ln(c'_t) - p +/- 1 by rate trend.

    The rate is floored at 1e-6 Mbps before the log; a non-increasing rate
    takes the -1 branch.
    """
    c = max(c_t, RATE_FLOOR_MBPS)
    trend = 1.0 if c_prev < c_t else -1.0
    return math.log(c) - power_penalty(V, budget) + trend


@dataclass
class Stage1State:
    """Delayed own-satellite CSI plus the previously applied TPM."""

    sat_id: int
    H_delayed: np.ndarray  # (M, K) complex
    V_prev: np.ndarray  # (M, K) complex


@dataclass
class Stage2State:
    """Own stage-1 TPM plus the other agents' shared singular values."""

    sat_id: int
    V_stage1: np.ndarray  # (M, K) complex
    lambdas: np.ndarray  # ((L-1) * min(M, K),) nonnegative


@dataclass
class AgentAction:
    """A policy's TPM proposal: the raw network output and its projection
    onto the power sphere (the projected matrix is what gets transmitted)."""

    tpm_raw: np.ndarray
    tpm: np.ndarray


@dataclass
class StepRecord:
    """Everything observable about one synchronized environment step."""

    epoch: int
    cluster: tuple[int, ...]
    cluster_rate: float
    individual_rates: np.ndarray | None
    rewards_stage1: np.ndarray | None
    rewards_stage2: np.ndarray
    handover: bool
    handover_events: list
    stage1_actions: list | None = None
    stage2_actions: list | None = None


@dataclass
class EnvParams:
    """Physical and protocol parameters of the environment."""

    radio: RadioConfig = field(default_factory=RadioConfig)
    thresholds: RewardThresholds = field(default_factory=RewardThresholds)
    cluster_size: int = 4
    n_users: int = 2
    delay_steps: int = 3
    dt: float = 1e-3
    coverage_lat_deg: float = 54.526
    coverage_lon_deg: float = -3.3
    coverage_radius_m: float = 50e3
    min_elevation_deg: float = 30.0
    candidate_extra: int = 6
    candidate_margin_deg: float = 2.0
    csi_scale: float = 1e6
    phase_ref_center: bool = True
    shell_specs: list | None = None


class MarlEnv:
    """Synchronized multi-agent environment over the simulated constellation.

    ``step`` is a barrier: all agents' projected TPMs are applied in one
    atomic world update.  A single driver owns the instance.
    """

    def __init__(self, params: EnvParams):
        self.p = params
        self.center = latlon_to_ecef(params.coverage_lat_deg, params.coverage_lon_deg)
        self.min_elevation = math.radians(params.min_elevation_deg)
        self.candidate_elevation = math.radians(
            params.min_elevation_deg - params.candidate_margin_deg
        )
        m = params.radio.m_antennas
        self.state1_dim = 4 * m * params.n_users
        self.n_lambdas = (params.cluster_size - 1) * min(m, params.n_users)
        self.state2_dim = 2 * m * params.n_users + self.n_lambdas
        self.action_dim = 2 * m * params.n_users
        self.sqrt_budget = math.sqrt(params.radio.per_sat_power_w)
        self._epoch = -1

    # -- lifecycle ---------------------------------------------------------

    def reset(self, seed: int) -> list[Stage1State]:
        """Place the constellation and users, warm-fill the delay buffer with
        epoch-0 CSI and return the initial per-agent states (V_prev = 0)."""
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        user_seed, channel_seed = ss.spawn(2)
        self.user_rng = np.random.default_rng(user_seed)
        self.channel_seed = int(channel_seed.generate_state(1)[0])
        self.sampler = ChannelSampler(self.p.radio, self.channel_seed)

        specs = self.p.shell_specs if self.p.shell_specs is not None else default_shell_specs()
        self.prop = ConstellationPropagator(build_constellation(specs))
        self.users = UserField(
            self.p.n_users, self.center, self.p.coverage_radius_m, self.user_rng
        )
        self._epoch = 0
        self.buffer = DelayBuffer(self.p.delay_steps)
        candidates, self.cluster = self._survey_epoch(0)
        self._current_obs = self._generate_observations(0, candidates)
        self.buffer.push(0, self._current_obs)
        history_span = max(self.p.delay_steps, 1) + 1
        m, k = self.p.radio.m_antennas, self.p.n_users
        self._applied = [
            [np.zeros((m, k), dtype=complex)] * history_span
            for _ in range(self.p.cluster_size)
        ]
        self.c_prev = np.zeros(self.p.cluster_size)
        self.cprime_prev = 0.0
        return self._build_stage1_states()

    def new_episode(self) -> None:
        """Episode boundary: orbital time continues, reward-trend memory
        resets and users pick fresh headings/speeds."""
        self.c_prev = np.zeros(self.p.cluster_size)
        self.cprime_prev = 0.0
        self.users.new_episode(self.user_rng)

    @property
    def epoch(self) -> int:
        return self._epoch

    # -- CSI generation ----------------------------------------------------

    def _survey_epoch(self, epoch: int) -> tuple[list[int], Cluster]:
        """One visibility/distance pass: CSI candidates (slightly below the
        service elevation, so just-about-to-join satellites already have
        delayed history) and the serving cluster itself."""
        elev, dist = self.prop.survey(self.center)
        ids = self.prop.ids
        cand_idx = sorted(
            np.flatnonzero(elev >= self.candidate_elevation),
            key=lambda i: (dist[i], ids[i]),
        )
        candidates = [int(ids[i]) for i in cand_idx[: self.p.cluster_size + self.p.candidate_extra]]
        members = [i for i in cand_idx if elev[i] >= self.min_elevation][: self.p.cluster_size]
        if len(members) < self.p.cluster_size:
            raise CoverageGapError(
                f"epoch {epoch}: only {len(members)} satellites visible, "
                f"cluster needs {self.p.cluster_size}"
            )
        cluster = Cluster(epoch=epoch, members=tuple(int(ids[i]) for i in members))
        return candidates, cluster

    def _generate_observations(
        self, epoch: int, candidates: list[int]
    ) -> dict[int, ChannelObservation]:
        """Fresh CSI for the cluster candidates, optionally phase-referenced
        to the coverage center."""
        users = self.users.states()
        out = {}
        for sat_id in candidates:
            sat = self.prop.state_of(sat_id)
            H = self.sampler.channel_block(sat, users, epoch)
            if self.p.phase_ref_center:
                d_center = float(np.linalg.norm(sat.position - self.center))
                H = H * np.exp(
                    2j * math.pi * self.p.radio.f_hz * d_center / SPEED_OF_LIGHT
                )
            out[sat_id] = ChannelObservation(sat_id=sat_id, epoch=epoch, H=H)
        return out

    def _delayed_H(self, epoch: int, sat_id: int) -> np.ndarray:
        obs = self.buffer.query(epoch)
        if sat_id not in obs:
            raise RuntimeError(
                f"delay buffer contract violated: no observation for satellite "
                f"{sat_id} at the delayed epoch serving t={epoch}"
            )
        return obs[sat_id].H

    # -- state construction -------------------------------------------------

    def _prev_applied(self, slot: int) -> np.ndarray:
        lag = max(self.p.delay_steps, 1)
        want = self._epoch - lag
        if want < 0:
            m, k = self.p.radio.m_antennas, self.p.n_users
            return np.zeros((m, k), dtype=complex)
        return self._applied[slot][want % len(self._applied[slot])]

    def _build_stage1_states(self) -> list[Stage1State]:
        states = []
        for slot, sat_id in enumerate(self.cluster.members):
            states.append(
                Stage1State(
                    sat_id=sat_id,
                    H_delayed=self._delayed_H(self._epoch, sat_id),
                    V_prev=self._prev_applied(slot),
                )
            )
        return states

    def build_stage2_state(self, slot: int, stage1_tpms: list[np.ndarray]) -> Stage2State:
        """Assemble agent ``slot``'s cooperative state from every agent's
        stage-1 TPM: own TPM verbatim, others reduced to their descending
        singular values in cluster order."""
        if len(stage1_tpms) != self.p.cluster_size:
            raise ValueError("need one stage-1 TPM per cluster member")
        blocks = [
            singular_values(v) for i, v in enumerate(stage1_tpms) if i != slot
        ]
        lambdas = np.concatenate(blocks) if blocks else np.zeros(0)
        return Stage2State(
            sat_id=self.cluster.members[slot],
            V_stage1=stage1_tpms[slot],
            lambdas=lambdas,
        )

    def encode_stage1(self, state: Stage1State) -> np.ndarray:
        """Flat real encoding of length 4MK: scaled re/im of the delayed CSI
        followed by re/im of the previous TPM (row-major)."""
        s = self.p.csi_scale
        return np.concatenate(
            [
                (state.H_delayed.real * s).ravel(),
                (state.H_delayed.imag * s).ravel(),
                state.V_prev.real.ravel(),
                state.V_prev.imag.ravel(),
            ]
        )

    def encode_stage2(self, state: Stage2State) -> np.ndarray:
        return np.concatenate(
            [state.V_stage1.real.ravel(), state.V_stage1.imag.ravel(), state.lambdas]
        )

    def decode_action(self, action: np.ndarray) -> np.ndarray:
        """2MK action vector -> complex M x K TPM (first half real parts)."""
        m, k = self.p.radio.m_antennas, self.p.n_users
        n = m * k
        if action.shape != (2 * n,):
            raise ValueError(f"expected action of length {2*n}, got {action.shape}")
        return (action[:n] + 1j * action[n:]).reshape(m, k)

    def project(self, V: np.ndarray) -> np.ndarray:
        """Project a raw TPM onto the per-satellite power sphere."""
        return project_power(V, self.sqrt_budget)

    # -- stepping ------------------------------------------------------------

    def _check_budget(self, actions: list[AgentAction]) -> None:
        cap = self.p.radio.per_sat_power_w + 1e-9
        for slot, a in enumerate(actions):
            if trace_power(a.tpm) > cap:
                raise ValueError(
                    f"slot {slot}: applied TPM power {trace_power(a.tpm):.6g} exceeds "
                    f"budget {self.p.radio.per_sat_power_w}"
                )

    def step(
        self,
        stage2_actions: list[AgentAction],
        stage1_actions: list[AgentAction] | None = None,
    ) -> tuple[list[Stage1State], StepRecord]:
        """Apply one synchronized action set and advance the world by dt.

        The cluster rate is computed on the current true channel; stage-1
        rewards (when stage-1 actions are supplied) use each satellite's
        *delayed* CSI, the information actually available on board.
        """
        if self._epoch < 0:
            raise RuntimeError("reset() must be called before step()")
        if len(stage2_actions) != self.p.cluster_size:
            raise ValueError("need one stage-2 action per cluster member")
        self._check_budget(stage2_actions)
        t = self._epoch
        radio = self.p.radio
        members = self.cluster.members

        H_now = np.vstack([self._current_obs[sid].H for sid in members])
        V_global = np.vstack([a.tpm for a in stage2_actions])
        cluster_rate = sum_rate(H_now, V_global, radio.noise_power_w, radio.bw_hz)

        rewards2 = np.array(
            [
                stage2_reward(cluster_rate, self.cprime_prev, a.tpm_raw, radio.per_sat_power_w)
                for a in stage2_actions
            ]
        )

        individual = None
        rewards1 = None
        if stage1_actions is not None:
            if len(stage1_actions) != self.p.cluster_size:
                raise ValueError("need one stage-1 action per cluster member")
            individual = np.zeros(self.p.cluster_size)
            rewards1 = np.zeros(self.p.cluster_size)
            for slot, (sid, act) in enumerate(zip(members, stage1_actions)):
                H_delayed = self._delayed_H(t, sid)
                individual[slot] = sum_rate(
                    H_delayed, act.tpm, radio.noise_power_w, radio.bw_hz
                )
                rewards1[slot] = stage1_reward(
                    individual[slot],
                    self.c_prev[slot],
                    act.tpm_raw,
                    self.p.thresholds,
                    radio.per_sat_power_w,
                )
            self.c_prev = individual.copy()
        self.cprime_prev = cluster_rate

        span = len(self._applied[0])
        for slot, a in enumerate(stage2_actions):
            self._applied[slot][t % span] = a.tpm

        # advance the world
        self._epoch = t + 1
        self.prop.step(self.p.dt)
        self.users.step(self.p.dt)
        candidates, new_cluster = self._survey_epoch(self._epoch)
        self._current_obs = self._generate_observations(self._epoch, candidates)
        self.buffer.push(self._epoch, self._current_obs)
        events = detect_handover(self.cluster, new_cluster)
        self.cluster = new_cluster

        record = StepRecord(
            epoch=t,
            cluster=members,
            cluster_rate=cluster_rate,
            individual_rates=individual,
            rewards_stage1=rewards1,
            rewards_stage2=rewards2,
            handover=bool(events),
            handover_events=events,
            stage1_actions=[a.tpm for a in stage1_actions] if stage1_actions else None,
            stage2_actions=[a.tpm for a in stage2_actions],
        )
        return self._build_stage1_states(), record
