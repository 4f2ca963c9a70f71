"""Correlated multi-user uplink channel generator.

The model is a Rician clustered-scatterer surrogate on a half-wavelength
uniform linear array.  Column ``k`` of a frame is

    h_k = sqrt(K/(K+1)) a(theta_k)
          + sqrt(1/(K+1)) / sqrt(L) * sum_l g_{k,l} a(theta_k + delta_l)

Users assigned to the same cluster share the scatterer offsets ``delta_l``
and a common component of the path gains, which is what makes co-located
users highly correlated.  Mobile sequences are first-order Gauss-Markov
with the Jakes correlation coefficient applied to the scattered part.

Every random draw comes from a Philox counter-based stream keyed by
``(master_seed, stream, frame_index, unit)`` so any frame can be produced
out of order, in any worker, with identical bits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

SPEED_OF_LIGHT = 2.99792458e8
ANTENNA_SPACING = 0.5  # wavelengths

PROPAGATIONS = ("los", "nlos")
MODES = ("uncorrelated", "one_cluster", "two_clusters", "random_placement")
MOBILITIES = ("static", "mobile")

# RNG stream tags
_GEOMETRY = 0
_CLUSTER = 1
_USER = 2


class ConfigError(ValueError):
    """Invalid scenario, link or model configuration."""


def keyed_rng(master_seed: int, *key: int) -> np.random.Generator:
    """Philox generator for the stream identified by ``key``."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class ScenarioConfig:
    propagation: str = "nlos"
    mode: str = "uncorrelated"
    mobility: str = "static"
    speed_mps: float = 0.0
    carrier_hz: float = 3.6e9
    frame_s: float = 1e-3
    cell_radius_m: float = 100.0
    n_scatterers: int = 8
    cluster_spread_rad: float = 0.05
    rician_k_db: float = 10.0
    master_seed: int = 0
    n_bs: int = 32
    n_ue: int = 4
    # angular jitter of users around their cluster centre
    user_spread_rad: float = 0.005
    # share of path-gain power common to all users of a cluster
    cluster_coherence: float = 0.9

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.propagation not in PROPAGATIONS:
            raise ConfigError(f"propagation must be one of {PROPAGATIONS}, got {self.propagation!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mobility not in MOBILITIES:
            raise ConfigError(f"mobility must be one of {MOBILITIES}, got {self.mobility!r}")
        if self.speed_mps < 0:
            raise ConfigError("speed_mps must be >= 0")
        if self.mobility == "static" and self.speed_mps != 0:
            raise ConfigError("static scenarios require speed_mps == 0")
        if self.n_scatterers < 1:
            raise ConfigError("n_scatterers must be >= 1")
        if not 0 < self.cluster_spread_rad < math.pi:
            raise ConfigError("cluster_spread_rad must lie in (0, pi)")
        if not 0 <= self.user_spread_rad <= self.cluster_spread_rad:
            raise ConfigError("user_spread_rad must lie in [0, cluster_spread_rad]")
        if not 0 <= self.cluster_coherence <= 1:
            raise ConfigError("cluster_coherence must lie in [0, 1]")
        if self.n_bs < 1 or self.n_ue < 1:
            raise ConfigError("n_bs and n_ue must be >= 1")
        if self.mode == "two_clusters" and self.n_ue % 2:
            raise ConfigError("two_clusters mode needs an even number of users")
        if self.carrier_hz < 0 or self.frame_s < 0 or self.cell_radius_m <= 0:
            raise ConfigError("carrier_hz, frame_s must be >= 0 and cell_radius_m > 0")

    @property
    def k_factor(self) -> float:
        return 10.0 ** (self.rician_k_db / 10.0) if self.propagation == "los" else 0.0

    @property
    def tag(self) -> str:
        if self.mobility == "mobile":
            start = "colocated" if self.mode == "one_cluster" else "random"
            return f"{self.propagation}_mobile_{start}"
        return f"{self.propagation}_static_{self.mode}"


@dataclass
class UserGeometry:
    azimuth: np.ndarray  # rad, wrapped to [-pi, pi)
    distance: np.ndarray  # m
    heading: np.ndarray  # rad, velocity direction
    cluster: np.ndarray  # cluster id per user

    @property
    def n_clusters(self) -> int:
        return int(self.cluster.max()) + 1

    def advanced(self, dt: float, speed_mps: float, cell_radius_m: float) -> "UserGeometry":
        """Geometry after every user moved ``speed_mps * dt`` along its heading."""
        if speed_mps == 0 or dt == 0:
            return self
        x = self.distance * np.cos(self.azimuth) + speed_mps * dt * np.cos(self.heading)
        y = self.distance * np.sin(self.azimuth) + speed_mps * dt * np.sin(self.heading)
        dist = np.clip(np.hypot(x, y), 1e-3, cell_radius_m)
        return replace(self, azimuth=wrap_angle(np.arctan2(y, x)), distance=dist)


@dataclass
class ChannelFrame:
    re: np.ndarray
    im: np.ndarray
    frame_index: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.re.shape != self.im.shape or self.re.ndim != 2:
            raise ValueError("re and im must be matching 2-D planes")
        if self.frame_index < 0:
            raise ValueError("frame_index must be >= 0")
        if not (np.all(np.isfinite(self.re)) and np.all(np.isfinite(self.im))):
            raise ValueError("channel entries must be finite")

    @property
    def n_bs(self) -> int:
        return self.re.shape[0]

    @property
    def n_ue(self) -> int:
        return self.re.shape[1]

    @property
    def h(self) -> np.ndarray:
        return self.re + 1j * self.im

    @classmethod
    def from_complex(cls, h: np.ndarray, frame_index: int = 0, seed: int = 0) -> "ChannelFrame":
        h = np.asarray(h, dtype=complex)
        if h.ndim == 1:
            h = h[:, None]
        return cls(np.ascontiguousarray(h.real), np.ascontiguousarray(h.imag), frame_index, seed)


def wrap_angle(theta):
    return (np.asarray(theta) + math.pi) % (2 * math.pi) - math.pi


def steering_vector(n_bs: int, azimuth, spacing_wavelengths: float = ANTENNA_SPACING) -> np.ndarray:
    """ULA response ``exp(j 2 pi d m sin(azimuth))`` for m = 0..n_bs-1.

    ``azimuth`` may be an array; the antenna axis is then the first one.
    """
    m = np.arange(n_bs, dtype=float)
    az = np.asarray(azimuth, dtype=float)
    phase = 2 * math.pi * spacing_wavelengths * np.multiply.outer(m, np.sin(az))
    return np.exp(1j * phase)


def place_users(cfg: ScenarioConfig, seed: int) -> UserGeometry:
    """Draw user positions for the scenario's placement mode.

    Clustered and uncorrelated placements keep users inside the broadside
    sector |theta| <= pi/3, where a ULA separates angles well.  Uncorrelated
    users sit on an evenly spaced grid in sin(theta) with small jitter.
    """
    rng = keyed_rng(seed, _GEOMETRY)
    n = cfg.n_ue
    spread = cfg.cluster_spread_rad
    jitter = cfg.user_spread_rad
    sector = math.pi / 3

    if cfg.mode == "uncorrelated":
        u = np.linspace(-0.75, 0.75, n) if n > 1 else np.zeros(1)
        step = 1.5 / max(n - 1, 1)
        u = u + rng.uniform(-0.2 * step, 0.2 * step, n)
        az = np.arcsin(np.clip(u, -1, 1))
        cluster = np.arange(n)
    elif cfg.mode == "one_cluster":
        centre = rng.uniform(-sector, sector)
        az = centre + rng.uniform(-jitter, jitter, n)
        cluster = np.zeros(n, dtype=int)
    elif cfg.mode == "two_clusters":
        # centres at least 4*spread apart, same broadside sector
        while True:
            c = rng.uniform(-sector, sector, 2)
            if abs(np.sin(c[0]) - np.sin(c[1])) >= 0.3 and abs(c[0] - c[1]) >= 4 * spread:
                break
        cluster = np.repeat([0, 1], n // 2)
        az = c[cluster] + rng.uniform(-jitter, jitter, n)
    else:
        az = rng.uniform(-math.pi, math.pi, n)
        cluster = np.arange(n)

    # uniform in area, away from the BS mast
    r = cfg.cell_radius_m
    dist = r * np.sqrt(rng.uniform(0.01, 0.9, n))
    heading = rng.uniform(-math.pi, math.pi, n)
    return UserGeometry(wrap_angle(az), dist, wrap_angle(heading), np.asarray(cluster, dtype=int))


def los_component(cfg: ScenarioConfig, geom: UserGeometry) -> np.ndarray:
    return math.sqrt(cfg.k_factor / (cfg.k_factor + 1)) * steering_vector(cfg.n_bs, geom.azimuth)


def scattered_component(cfg: ScenarioConfig, geom: UserGeometry, frame_index: int) -> np.ndarray:
    """Unit-power clustered scattering term (without the Rician weight)."""
    L = cfg.n_scatterers
    n_clusters = geom.n_clusters
    offsets = np.empty((n_clusters, L))
    shared = np.empty((n_clusters, L), dtype=complex)
    for c in range(n_clusters):
        rng = keyed_rng(cfg.master_seed, _CLUSTER, frame_index, c)
        offsets[c] = rng.uniform(-cfg.cluster_spread_rad, cfg.cluster_spread_rad, L)
        shared[c] = _complex_normal(rng, L)

    beta = cfg.cluster_coherence
    h = np.empty((cfg.n_bs, cfg.n_ue), dtype=complex)
    for k in range(cfg.n_ue):
        c = geom.cluster[k]
        rng = keyed_rng(cfg.master_seed, _USER, frame_index, k)
        gains = math.sqrt(beta) * shared[c] + math.sqrt(1 - beta) * _complex_normal(rng, L)
        a = steering_vector(cfg.n_bs, geom.azimuth[k] + offsets[c])  # n_bs x L
        h[:, k] = a @ gains / math.sqrt(L)
    return h


def _complex_normal(rng: np.random.Generator, n: int) -> np.ndarray:
    z = rng.standard_normal((n, 2))
    return (z[:, 0] + 1j * z[:, 1]) / math.sqrt(2)


def gen_static_frame(cfg: ScenarioConfig, geom: UserGeometry, frame_index: int) -> ChannelFrame:
    if len(geom.azimuth) != cfg.n_ue:
        raise ConfigError("geometry user count does not match cfg.n_ue")
    k = cfg.k_factor
    h = los_component(cfg, geom) + math.sqrt(1 / (k + 1)) * scattered_component(cfg, geom, frame_index)
    return ChannelFrame.from_complex(h, frame_index, cfg.master_seed)


def bessel_j0(x: float) -> float:
    """Bessel function of the first kind, order zero.

    Power series for |x| <= 12 (absolute error ~1e-13 there), Hankel
    asymptotic expansion beyond.
    """
    x = abs(float(x))
    if x <= 12.0:
        q = -(x * x) / 4.0
        term, total, k = 1.0, 1.0, 0
        while True:
            k += 1
            term *= q / (k * k)
            total += term
            if abs(term) < 1e-17 * max(1.0, abs(total)) and k > 5:
                return total
    # Hankel asymptotic expansion: a_k = a_{k-1} * -(2k-1)^2 / (8k)
    p, q, a = 0.0, 0.0, 1.0
    for k in range(0, 20):
        if k:
            a *= -((2 * k - 1) ** 2) / (8.0 * k)
        t = a / x**k
        if k % 2 == 0:
            p += (-1) ** (k // 2) * t
        else:
            q += (-1) ** ((k - 1) // 2) * t
    chi = x - math.pi / 4
    return math.sqrt(2 / (math.pi * x)) * (p * math.cos(chi) - q * math.sin(chi))


def doppler_rho(speed_mps: float, carrier_hz: float, frame_s: float) -> float:
    """Jakes frame-to-frame correlation ``J0(2 pi f_d T)``."""
    if speed_mps < 0 or carrier_hz < 0 or frame_s < 0:
        raise ValueError("speed, carrier and frame duration must be >= 0")
    f_d = speed_mps * carrier_hz / SPEED_OF_LIGHT
    return bessel_j0(2 * math.pi * f_d * frame_s)


def geometry_at(cfg: ScenarioConfig, geom: UserGeometry, frame_index: int) -> UserGeometry:
    """Geometry ``frame_index`` frames after ``geom`` (which is frame 0)."""
    return geom.advanced(frame_index * cfg.frame_s, cfg.speed_mps, cfg.cell_radius_m)


def evolve_frame(prev: ChannelFrame, rho: float, cfg: ScenarioConfig, geom: UserGeometry,
                 frame_index: int) -> ChannelFrame:
    """One Gauss-Markov step.

    ``geom`` is the base (frame 0) geometry.  The deterministic LoS part
    follows the moving users; the scattered part evolves as
    ``S_t = rho S_{t-1} + sqrt(1 - rho^2) W_t`` so the marginal law of each
    entry is the one produced by :func:`gen_static_frame`.
    """
    if abs(rho) > 1:
        raise ValueError(f"|rho| must be <= 1, got {rho}")
    if rho == 1.0:
        return ChannelFrame(prev.re.copy(), prev.im.copy(), frame_index, prev.seed)
    g_prev = geometry_at(cfg, geom, prev.frame_index)
    g_now = geometry_at(cfg, geom, frame_index)
    k = cfg.k_factor
    w = math.sqrt(1 / (k + 1)) * scattered_component(cfg, g_now, frame_index)
    s_prev = prev.h - los_component(cfg, g_prev)
    h = los_component(cfg, g_now) + rho * s_prev + math.sqrt(1 - rho * rho) * w
    return ChannelFrame.from_complex(h, frame_index, cfg.master_seed)


def gen_sequence(cfg: ScenarioConfig, t_len: int, start_index: int = 0) -> list[ChannelFrame]:
    if t_len < 1:
        raise ValueError("t_len must be >= 1")
    geom = place_users(cfg, cfg.master_seed)
    if cfg.mobility == "static":
        return [gen_static_frame(cfg, geom, start_index + t) for t in range(t_len)]
    rho = doppler_rho(cfg.speed_mps, cfg.carrier_hz, cfg.frame_s)
    frames = [gen_static_frame(cfg, geometry_at(cfg, geom, start_index), start_index)]
    for t in range(1, t_len):
        frames.append(evolve_frame(frames[-1], rho, cfg, geom, start_index + t))
    return frames


def pairwise_correlation(frame: ChannelFrame) -> float:
    """Mean of |h_i^H h_j| / (|h_i| |h_j|) over user pairs."""
    h = frame.h
    n = h.shape[1]
    if n < 2:
        return 0.0
    g = h.conj().T @ h
    norms = np.sqrt(np.real(np.diag(g)))
    c = np.abs(g) / np.outer(norms, norms)
    iu = np.triu_indices(n, 1)
    return float(c[iu].mean())
