"""Circular-orbit LEO constellation propagation, visibility and clustering.

Orbits are ideal circular Keplerian arcs around a spherical Earth
(R_e = 6371 km, mu = 3.986e14 m^3/s^2, no J2).  Earth rotation is neglected,
so the inertial frame and the Earth-fixed frame coincide and ground points
are constants; orbital speeds (~7.6 km/s) dominate the neglected surface
speed by more than an order of magnitude.
"""

from dataclasses import dataclass
import math

import numpy as np

EARTH_RADIUS_M = 6371e3
EARTH_MU = 3.986e14


class CoverageGapError(RuntimeError):
    """Raised when fewer satellites are visible than a cluster requires."""


class ConfigurationError(ValueError):
    """Raised for invalid constellation or experiment configuration."""


@dataclass
class SatelliteState:
    """One satellite on a circular orbit.

    ``phase`` is the in-plane argument of latitude; ``plane_p`` / ``plane_q``
    are the orthonormal in-plane basis vectors fixed by (raan, inclination),
    cached so propagation only has to advance the phase.
    """

    id: int
    shell: int
    altitude: float
    inclination: float
    raan: float
    phase: float
    position: np.ndarray = None
    velocity: np.ndarray = None
    plane_p: np.ndarray = None
    plane_q: np.ndarray = None

    def __post_init__(self):
        if self.plane_p is None:
            self.plane_p, self.plane_q = _plane_basis(self.raan, self.inclination)
        if self.position is None:
            self._recompute()

    @property
    def orbit_radius(self) -> float:
        return EARTH_RADIUS_M + self.altitude

    @property
    def angular_rate(self) -> float:
        return math.sqrt(EARTH_MU / self.orbit_radius**3)

    def _recompute(self):
        r = self.orbit_radius
        speed = math.sqrt(EARTH_MU / r)
        c, s = math.cos(self.phase), math.sin(self.phase)
        self.position = r * (c * self.plane_p + s * self.plane_q)
        self.velocity = speed * (-s * self.plane_p + c * self.plane_q)


def _plane_basis(raan: float, inclination: float) -> tuple[np.ndarray, np.ndarray]:
    """In-plane basis: p points at the ascending node, q 90 deg ahead."""
    cr, sr = math.cos(raan), math.sin(raan)
    ci, si = math.cos(inclination), math.sin(inclination)
    p = np.array([cr, sr, 0.0])
    q = np.array([-sr * ci, cr * ci, si])
    return p, q


@dataclass
class UserState:
    """A mobile ground user confined to the coverage disc.

    Position lives on the Earth sphere; velocity is tangent to the surface
    with speed at most 3 m/s.
    """

    id: int
    position: np.ndarray
    velocity: np.ndarray


@dataclass(frozen=True)
class Cluster:
    """The serving cluster at one epoch: L visible satellites ordered by
    ascending distance to the coverage center (ties broken by id)."""

    epoch: int
    members: tuple[int, ...]


def build_constellation(shell_specs: list[dict]) -> list[SatelliteState]:
    """Instantiate a multi-shell constellation.

    Each spec needs ``count``, ``altitude`` (m), ``inclination`` (rad) and
    ``planes``.  Satellites are spread evenly over the planes of a shell
    (RAAN uniform over 2*pi) and evenly in phase within each plane, with a
    per-plane phase stagger to avoid global conjunctions.
    """
    sats: list[SatelliteState] = []
    sat_id = 0
    for shell_idx, spec in enumerate(shell_specs):
        try:
            count = int(spec["count"])
            altitude = float(spec["altitude"])
            inclination = float(spec["inclination"])
            planes = int(spec["planes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigurationError(f"invalid shell spec {spec!r}: {exc}") from exc
        if count <= 0 or planes <= 0:
            raise ConfigurationError(f"shell {shell_idx}: count and planes must be positive")
        if not (300e3 < altitude < 1500e3):
            raise ConfigurationError(
                f"shell {shell_idx}: altitude {altitude/1e3:.0f} km outside (300, 1500) km"
            )
        per_plane = count // planes
        remainder = count % planes
        for plane in range(planes):
            n_here = per_plane + (1 if plane < remainder else 0)
            raan = 2.0 * math.pi * plane / planes
            for slot in range(n_here):
                phase = 2.0 * math.pi * slot / n_here + 2.0 * math.pi * plane / (planes * max(n_here, 1))
                sats.append(
                    SatelliteState(
                        id=sat_id,
                        shell=shell_idx,
                        altitude=altitude,
                        inclination=inclination,
                        raan=raan,
                        phase=phase % (2.0 * math.pi),
                    )
                )
                sat_id += 1
    return sats


def propagate(sat: SatelliteState, dt: float) -> SatelliteState:
    """Advance a satellite by dt seconds along its circular orbit."""
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    return SatelliteState(
        id=sat.id,
        shell=sat.shell,
        altitude=sat.altitude,
        inclination=sat.inclination,
        raan=sat.raan,
        phase=(sat.phase + sat.angular_rate * dt) % (2.0 * math.pi),
        plane_p=sat.plane_p,
        plane_q=sat.plane_q,
    )


def elevation_angle(sat: SatelliteState, ground: np.ndarray) -> float:
    """Elevation of the satellite above the local horizon plane at ``ground``.

    arcsin of the line-of-sight component along the local vertical; in
    [-pi/2, pi/2].
    """
    ground = np.asarray(ground, dtype=float)
    los = sat.position - ground
    up = ground / np.linalg.norm(ground)
    s = float(los @ up / np.linalg.norm(los))
    return math.asin(min(1.0, max(-1.0, s)))


def visible_ids(
    sats: list[SatelliteState], center: np.ndarray, min_elevation: float
) -> list[int]:
    """Ids of satellites at or above ``min_elevation`` as seen from center."""
    return [s.id for s in sats if elevation_angle(s, center) >= min_elevation]


def select_cluster(
    sats: list[SatelliteState],
    center: np.ndarray,
    L: int,
    epoch: int,
    min_elevation: float = math.radians(30.0),
) -> Cluster:
    """The L visible satellites nearest the coverage center.

    Raises CoverageGapError when fewer than L satellites are visible; the
    caller is expected to abort the run with this diagnostic.
    """
    center = np.asarray(center, dtype=float)
    candidates = []
    for s in sats:
        if elevation_angle(s, center) >= min_elevation:
            candidates.append((float(np.linalg.norm(s.position - center)), s.id))
    if len(candidates) < L:
        raise CoverageGapError(
            f"epoch {epoch}: only {len(candidates)} satellites visible, cluster needs {L}"
        )
    candidates.sort()
    return Cluster(epoch=epoch, members=tuple(sid for _, sid in candidates[:L]))


def detect_handover(prev: Cluster, next_: Cluster) -> list[dict]:
    """Membership changes between consecutive clusters.

    Returns one {left, joined} event per swapped slot; departures and
    arrivals are paired in ascending-id order, which makes the pairing
    deterministic (the pairing itself carries no physical meaning).
    """
    if prev.epoch >= next_.epoch:
        raise ValueError("handover detection requires prev.epoch < next.epoch")
    left = sorted(set(prev.members) - set(next_.members))
    joined = sorted(set(next_.members) - set(prev.members))
    return [{"left": l, "joined": j} for l, j in zip(left, joined)]


class ConstellationPropagator:
    """Vectorised propagation of a whole constellation.

    Keeps id-aligned arrays of orbital elements so a time step is a handful
    of numpy operations over the full constellation instead of a Python loop;
    results are identical to per-satellite :func:`propagate`.
    """

    def __init__(self, sats: list[SatelliteState]):
        self.ids = np.array([s.id for s in sats])
        self.radius = np.array([s.orbit_radius for s in sats])
        self.rate = np.array([s.angular_rate for s in sats])
        self.speed = np.sqrt(EARTH_MU / self.radius)
        self.phase = np.array([s.phase for s in sats])
        self.plane_p = np.stack([s.plane_p for s in sats])
        self.plane_q = np.stack([s.plane_q for s in sats])
        self._sats = sats
        self._index_of = {int(s.id): i for i, s in enumerate(sats)}
        self._pos_cache: np.ndarray | None = None

    def step(self, dt: float) -> None:
        if dt < 0:
            raise ValueError("dt must be nonnegative")
        self.phase = (self.phase + self.rate * dt) % (2.0 * math.pi)
        self._pos_cache = None

    def positions(self) -> np.ndarray:
        if self._pos_cache is None:
            c = np.cos(self.phase)[:, None]
            s = np.sin(self.phase)[:, None]
            self._pos_cache = self.radius[:, None] * (c * self.plane_p + s * self.plane_q)
        return self._pos_cache

    def velocities(self) -> np.ndarray:
        c = np.cos(self.phase)[:, None]
        s = np.sin(self.phase)[:, None]
        return self.speed[:, None] * (-s * self.plane_p + c * self.plane_q)

    def survey(self, center: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Elevations and distances of every satellite w.r.t. a ground point,
        from a single pass over the cached positions."""
        center = np.asarray(center, dtype=float)
        los = self.positions() - center
        dist = np.linalg.norm(los, axis=1)
        up = center / np.linalg.norm(center)
        sin_el = (los @ up) / dist
        return np.arcsin(np.clip(sin_el, -1.0, 1.0)), dist

    def elevations(self, ground: np.ndarray) -> np.ndarray:
        return self.survey(ground)[0]

    def distances(self, point: np.ndarray) -> np.ndarray:
        return self.survey(point)[1]

    def select_cluster(
        self, center: np.ndarray, L: int, epoch: int, min_elevation: float = math.radians(30.0)
    ) -> Cluster:
        elev, dist = self.survey(center)
        mask = elev >= min_elevation
        n_vis = int(mask.sum())
        if n_vis < L:
            raise CoverageGapError(
                f"epoch {epoch}: only {n_vis} satellites visible, cluster needs {L}"
            )
        order = sorted(np.flatnonzero(mask), key=lambda i: (dist[i], self.ids[i]))
        return Cluster(epoch=epoch, members=tuple(int(self.ids[i]) for i in order[:L]))

    def nearest_visible(
        self, center: np.ndarray, n: int, min_elevation: float
    ) -> list[int]:
        """Ids of up to n nearest satellites above min_elevation."""
        elev, dist = self.survey(center)
        mask = elev >= min_elevation
        order = sorted(np.flatnonzero(mask), key=lambda i: (dist[i], self.ids[i]))
        return [int(self.ids[i]) for i in order[:n]]

    def state_of(self, sat_id: int) -> SatelliteState:
        """Materialise the current SatelliteState for one satellite."""
        i = self._index_of[int(sat_id)]
        base = self._sats[i]
        return SatelliteState(
            id=base.id,
            shell=base.shell,
            altitude=base.altitude,
            inclination=base.inclination,
            raan=base.raan,
            phase=float(self.phase[i]),
            plane_p=base.plane_p,
            plane_q=base.plane_q,
        )


def latlon_to_ecef(lat_deg: float, lon_deg: float) -> np.ndarray:
    """Ground point on the spherical Earth surface."""
    lat = math.radians(lat_deg)
    lon = math.radians(lon_deg)
    return EARTH_RADIUS_M * np.array(
        [math.cos(lat) * math.cos(lon), math.cos(lat) * math.sin(lon), math.sin(lat)]
    )


def tangent_basis(center: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Local orthonormal frame at a ground point: (east-ish, north-ish, up)."""
    up = center / np.linalg.norm(center)
    ref = np.array([0.0, 0.0, 1.0])
    if abs(up @ ref) > 0.99:
        ref = np.array([1.0, 0.0, 0.0])
    e1 = np.cross(ref, up)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(up, e1)
    return e1, e2, up


class UserField:
    """K mobile users on the coverage disc around a ground center.

    Each user keeps planar coordinates in the tangent space of the center and
    is mapped to the sphere through the exponential map, so positions stay
    exactly on the surface and velocities exactly tangent.  Headings are
    re-randomised per episode; speed is uniform in [0, max_speed] and held
    constant within an episode.  Users reflect off the disc boundary.
    """

    def __init__(
        self,
        n_users: int,
        center: np.ndarray,
        radius_m: float,
        rng: np.random.Generator,
        max_speed: float = 3.0,
    ):
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius_m)
        self.max_speed = float(max_speed)
        self.e1, self.e2, self.up = tangent_basis(self.center)
        rho = self.radius * np.sqrt(rng.uniform(0.0, 1.0, size=n_users))
        ang = rng.uniform(0.0, 2.0 * math.pi, size=n_users)
        self.xy = np.stack([rho * np.cos(ang), rho * np.sin(ang)], axis=1)
        self.heading = np.zeros((n_users, 2))
        self.speed = np.zeros(n_users)
        self.new_episode(rng)

    @property
    def n_users(self) -> int:
        return len(self.speed)

    def new_episode(self, rng: np.random.Generator) -> None:
        ang = rng.uniform(0.0, 2.0 * math.pi, size=self.n_users)
        self.heading = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        self.speed = rng.uniform(0.0, self.max_speed, size=self.n_users)

    def step(self, dt: float) -> None:
        self.xy = self.xy + self.heading * (self.speed * dt)[:, None]
        for i in range(self.n_users):
            r = float(np.linalg.norm(self.xy[i]))
            if r > self.radius:
                n = self.xy[i] / r
                self.heading[i] = self.heading[i] - 2.0 * (self.heading[i] @ n) * n
                self.xy[i] = n * (2.0 * self.radius - r)

    def states(self) -> list[UserState]:
        out = []
        R = EARTH_RADIUS_M
        for i in range(self.n_users):
            x, y = self.xy[i]
            rho = math.hypot(x, y)
            theta = rho / R
            if rho < 1e-9:
                u_rad = self.e1
                pos = R * self.up
            else:
                u_rad = (x * self.e1 + y * self.e2) / rho
                pos = R * (math.cos(theta) * self.up + math.sin(theta) * u_rad)
            # exact tangent directions at the mapped point
            e_rad = -math.sin(theta) * self.up + math.cos(theta) * u_rad
            u_perp = np.cross(self.up, u_rad)
            if rho < 1e-9:
                h3 = self.heading[i, 0] * self.e1 + self.heading[i, 1] * self.e2
                vel = self.speed[i] * h3
            else:
                cos_b = self.heading[i] @ np.array([x, y]) / rho
                sin_b = self.heading[i] @ np.array([-y, x]) / rho
                vel = self.speed[i] * (cos_b * e_rad + sin_b * u_perp)
            out.append(UserState(id=i, position=pos, velocity=vel))
        return out


def default_shell_specs() -> list[dict]:
    """Four-shell layout totalling 4236 satellites.

    Approximates public parameters of a well-known mega-constellation; the
    exact split is a configuration choice, not a claim of fidelity.
    """
    return [
        {"count": 1584, "altitude": 550e3, "inclination": math.radians(53.0), "planes": 72},
        {"count": 1584, "altitude": 540e3, "inclination": math.radians(53.2), "planes": 72},
        {"count": 720, "altitude": 570e3, "inclination": math.radians(70.0), "planes": 36},
        {"count": 348, "altitude": 560e3, "inclination": math.radians(97.6), "planes": 6},
    ]
