"""LOS-dominant satellite downlink channel and the delayed-CSI buffer.

The channel of one (satellite, user) pair at carrier f is

    h = sqrt(G_t G_r) * (c / (4 pi d f)) * a(direction) * exp(-j 2 pi f d / c) * s

with a(.) the UPA steering vector and s a per-antenna Rician small-scale
term.  Small-scale fading is drawn from a counter-based random stream keyed
by (seed, satellite, user, epoch), so channel generation is a pure function
of seed and geometry and can be replayed for any past epoch.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from .constellation import SatelliteState, UserState

SPEED_OF_LIGHT = 299792458.0
BOLTZMANN = 1.380649e-23


@dataclass
class RadioConfig:
    """Link parameters shared by all satellites in the cluster.

    Defaults: f = 2 GHz with BW = 0.02 f, a 3x3 UPA, thermal noise at
    T_sys = 290 K, and a 10 dB Rician factor.  ``tx_gain_dbi`` and
    ``per_sat_power_w`` are calibration knobs for the link budget; the
    shipped values put converged sum-rates in the hundreds-of-Mbps band.
    """

    f_hz: float = 2e9
    bw_hz: float | None = None
    m_x: int = 3
    m_y: int = 3
    tx_gain_dbi: float = 30.0
    rx_gain_dbi: float = 0.0
    system_temp_k: float = 290.0
    noise_power_w: float | None = None
    per_sat_power_w: float = 10.0
    rician_k_db: float | None = 10.0

    def __post_init__(self):
        if self.bw_hz is None:
            self.bw_hz = 0.02 * self.f_hz
        if self.noise_power_w is None:
            self.noise_power_w = BOLTZMANN * self.system_temp_k * self.bw_hz
        if self.noise_power_w <= 0:
            raise ValueError("noise power must be positive")
        if self.per_sat_power_w <= 0:
            raise ValueError("per-satellite power budget must be positive")
        if self.m_x <= 0 or self.m_y <= 0:
            raise ValueError("antenna counts must be positive")

    @property
    def m_antennas(self) -> int:
        return self.m_x * self.m_y

    @property
    def rician_k_linear(self) -> float:
        """Linear Rician factor; None in dB means pure LOS (K -> inf)."""
        if self.rician_k_db is None:
            return math.inf
        return 10.0 ** (self.rician_k_db / 10.0)

    @property
    def amplitude_gain(self) -> float:
        return math.sqrt(10.0 ** (self.tx_gain_dbi / 10.0) * 10.0 ** (self.rx_gain_dbi / 10.0))


@dataclass
class ChannelObservation:
    """Per-satellite CSI snapshot: complex M x K, column k = user k."""

    sat_id: int
    epoch: int
    H: np.ndarray

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=complex)
        if not np.all(np.isfinite(self.H.view(float))):
            raise ValueError("channel observation contains non-finite entries")


def steering_vector(config: RadioConfig, direction: np.ndarray) -> np.ndarray:
    """UPA response for a unit direction in the satellite body frame.

    Half-wavelength element spacing gives entries exp(-j pi (m_x u + m_y v))
    where (u, v) are the direction cosines along the array axes; all entries
    have unit modulus.  Element order is row-major over (m_y, m_x).
    """
    direction = np.asarray(direction, dtype=float)
    if abs(float(direction @ direction) - 1.0) > 1e-6:
        raise ValueError("steering direction must be a unit vector")
    u, v = direction[0], direction[1]
    mx = np.arange(config.m_x)
    my = np.arange(config.m_y)
    phase = mx[None, :] * u + my[:, None] * v
    return np.exp(-1j * math.pi * phase).ravel()


def body_frame(sat: SatelliteState) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Satellite body axes: z toward nadir, x along-track, y completes."""
    z = -sat.position / np.linalg.norm(sat.position)
    v = sat.velocity - (sat.velocity @ z) * z
    x = v / np.linalg.norm(v)
    y = np.cross(z, x)
    return x, y, z


def _stream_counter(sat_id: int, user_id: int, epoch: int) -> list[int]:
    """256-bit Philox counter for one (satellite, user, epoch) stream.

    Word 0 is the low word that increments as values are drawn, so it stays
    zero in the label; distinct streams can never overlap.
    """
    return [0, epoch, sat_id, user_id]


def _small_scale(
    config: RadioConfig, seed: int, sat_id: int, user_id: int, epoch: int
) -> np.ndarray:
    """Rician per-antenna fading from a Philox stream counted by
    (epoch, satellite, user)."""
    kappa = config.rician_k_linear
    m = config.m_antennas
    if math.isinf(kappa):
        return np.ones(m, dtype=complex)
    bitgen = np.random.Philox(key=seed, counter=_stream_counter(sat_id, user_id, epoch))
    g = np.random.Generator(bitgen).standard_normal(2 * m)
    scatter = (g[:m] + 1j * g[m:]) / math.sqrt(2.0)
    return math.sqrt(kappa / (kappa + 1.0)) + math.sqrt(1.0 / (kappa + 1.0)) * scatter


def generate_channel(
    sat: SatelliteState,
    user: UserState,
    config: RadioConfig,
    epoch: int,
    seed: int = 0,
) -> np.ndarray:
    """Complex length-M channel vector of one (satellite, user) link."""
    los = user.position - sat.position
    d = float(np.linalg.norm(los))
    up = user.position / np.linalg.norm(user.position)
    if (-los) @ up <= 0:
        raise ValueError(
            f"satellite {sat.id} below the horizon of user {user.id}; no LOS channel"
        )
    x, y, z = body_frame(sat)
    dir_body = np.array([los @ x, los @ y, los @ z]) / d
    a = steering_vector(config, dir_body)
    fspl_amplitude = SPEED_OF_LIGHT / (4.0 * math.pi * d * config.f_hz)
    carrier = np.exp(-2j * math.pi * config.f_hz * d / SPEED_OF_LIGHT)
    s = _small_scale(config, seed, sat.id, user.id, epoch)
    return config.amplitude_gain * fspl_amplitude * carrier * a * s


class ChannelSampler:
    """Fast per-satellite channel blocks for a single-driver environment.

    Bit-identical to :func:`generate_channel` on every link; the speedup
    comes from resetting one persistent Philox stream instead of building a
    fresh bit generator per draw, which is why an instance must not be
    shared across threads.
    """

    def __init__(self, config: RadioConfig, seed: int):
        self.config = config
        self.seed = seed
        self._bitgen = np.random.Philox(key=seed)
        self._gen = np.random.Generator(self._bitgen)
        self._template = self._bitgen.state
        self._mx = np.arange(config.m_x)
        self._my = np.arange(config.m_y)

    def _small_scale(self, sat_id: int, user_id: int, epoch: int) -> np.ndarray:
        kappa = self.config.rician_k_linear
        m = self.config.m_antennas
        if math.isinf(kappa):
            return np.ones(m, dtype=complex)
        st = self._template
        st["state"]["counter"] = np.array(
            _stream_counter(sat_id, user_id, epoch), dtype=np.uint64
        )
        st["buffer_pos"] = 4
        st["has_uint32"] = 0
        st["uinteger"] = 0
        self._bitgen.state = st
        g = self._gen.standard_normal(2 * m)
        scatter = (g[:m] + 1j * g[m:]) / math.sqrt(2.0)
        return math.sqrt(kappa / (kappa + 1.0)) + math.sqrt(1.0 / (kappa + 1.0)) * scatter

    def channel_block(
        self, sat: SatelliteState, users: list[UserState], epoch: int
    ) -> np.ndarray:
        """M x K channel of one satellite to all users at one epoch."""
        cfg = self.config
        pos = sat.position
        z = -pos / math.sqrt(pos @ pos)
        v = sat.velocity - (sat.velocity @ z) * z
        x = v / math.sqrt(v @ v)
        y = np.array(
            [
                z[1] * x[2] - z[2] * x[1],
                z[2] * x[0] - z[0] * x[2],
                z[0] * x[1] - z[1] * x[0],
            ]
        )
        cols = []
        for user in users:
            los = user.position - pos
            d = math.sqrt(los @ los)
            if (-los) @ user.position <= 0:
                raise ValueError(
                    f"satellite {sat.id} below the horizon of user {user.id}; no LOS channel"
                )
            u = (los @ x) / d
            w = (los @ y) / d
            phase = self._mx[None, :] * u + self._my[:, None] * w
            a = np.exp(-1j * math.pi * phase).ravel()
            fspl_amplitude = SPEED_OF_LIGHT / (4.0 * math.pi * d * cfg.f_hz)
            carrier = np.exp(-2j * math.pi * cfg.f_hz * d / SPEED_OF_LIGHT)
            s = self._small_scale(sat.id, user.id, epoch)
            cols.append(cfg.amplitude_gain * fspl_amplitude * carrier * a * s)
        return np.stack(cols, axis=1)


def propagation_delay(distance_m: float) -> float:
    """One-way propagation delay d / c in seconds."""
    if distance_m <= 0:
        raise ValueError("distance must be positive")
    return distance_m / SPEED_OF_LIGHT


def discretize_delay(tau_s: float, dt_s: float) -> int:
    """Delay in whole time steps: ceil(tau / dt).

    Ratios within 1e-9 of an integer are snapped to it first so that an
    exactly representable tau = n * dt never rounds up to n + 1.
    """
    if dt_s <= 0:
        raise ValueError("time step must be positive")
    ratio = tau_s / dt_s
    nearest = round(ratio)
    if abs(ratio - nearest) < 1e-9:
        ratio = nearest
    return int(math.ceil(ratio))


def cluster_delay(delays: np.ndarray) -> int:
    """Cluster-wide delay: the maximum per-link discrete delay."""
    delays = np.asarray(delays)
    if delays.size == 0:
        raise ValueError("delay matrix must be nonempty")
    return int(delays.max())


class DelayBuffer:
    """Ring buffer serving CSI with a constant delay of ``delay_steps``.

    Epochs must be pushed consecutively starting at 0.  A query at epoch t
    returns the observations stamped t - T_d; during warm-up (t < T_d) it
    returns the epoch-0 snapshot so early states are never all-zero.
    """

    def __init__(self, delay_steps: int):
        if delay_steps < 0:
            raise ValueError("delay must be nonnegative")
        self.delay_steps = delay_steps
        self.capacity = delay_steps + 1
        self._slots: list[tuple[int, dict[int, ChannelObservation]] | None] = [
            None
        ] * self.capacity
        self._latest_epoch = -1

    def push(self, epoch: int, observations: dict[int, ChannelObservation]) -> None:
        if epoch != self._latest_epoch + 1:
            raise RuntimeError(
                f"delay buffer expects consecutive epochs, got {epoch} after {self._latest_epoch}"
            )
        self._slots[epoch % self.capacity] = (epoch, observations)
        self._latest_epoch = epoch

    def query(self, epoch: int) -> dict[int, ChannelObservation]:
        """Observations as seen at ``epoch`` (i.e. stamped epoch - T_d)."""
        if epoch > self._latest_epoch:
            raise RuntimeError(f"epoch {epoch} not yet pushed (latest {self._latest_epoch})")
        want = max(0, epoch - self.delay_steps)
        slot = self._slots[want % self.capacity]
        if slot is None or slot[0] != want:
            raise RuntimeError(
                f"delay buffer contract violated: epoch {want} not stored"
            )
        return slot[1]


def delayed_observation(buffer: DelayBuffer, epoch: int, delay_steps: int) -> dict:
    """Functional wrapper over DelayBuffer.query, validating the delay."""
    if delay_steps != buffer.delay_steps:
        raise ValueError(
            f"buffer is configured for delay {buffer.delay_steps}, asked for {delay_steps}"
        )
    return buffer.query(epoch)
