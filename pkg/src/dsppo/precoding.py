"""Physical-layer metrics for multi-satellite downlink precoding.

All functions operate on complex channel/precoder matrices where column k
belongs to user k.  The global channel of user k is the vertical stack of the
per-satellite M-antenna blocks, so every routine here works unchanged on a
single satellite's M x K slice or on the cluster-wide ML x K stack.
"""

from dataclasses import dataclass

import numpy as np


@dataclass
class Tpm:
    """Transmit precoding matrix of one satellite with its power budget.

    ``V`` is complex M x K; column k precodes user k's symbol.  The trace
    constraint tr(V V^H) <= ``budget`` is enforced by :func:`project_power`.
    """

    sat_id: int
    V: np.ndarray
    budget: float

    def __post_init__(self):
        self.V = np.asarray(self.V, dtype=complex)
        if self.V.ndim != 2:
            raise ValueError(f"TPM must be a 2-D matrix, got shape {self.V.shape}")
        if not np.all(np.isfinite(self.V.view(float))):
            raise ValueError("TPM contains non-finite entries")


def sinr(k: int, H: np.ndarray, V: np.ndarray, noise_power: float) -> float:
    """SINR of user k for channel stack H and precoder stack V (both N x K).

    |h_k^H v_k|^2 / (sum_{i != k} |h_k^H v_i|^2 + noise_power).
    """
    H = np.asarray(H, dtype=complex)
    V = np.asarray(V, dtype=complex)
    if H.shape != V.shape:
        raise ValueError(f"channel/precoder shape mismatch: {H.shape} vs {V.shape}")
    if not 0 <= k < H.shape[1]:
        raise ValueError(f"user index {k} out of range for K={H.shape[1]}")
    if noise_power <= 0:
        raise ValueError("noise power must be positive")
    gains = np.abs(H[:, k].conj() @ V) ** 2  # |h_k^H v_i|^2 for all i
    signal = gains[k]
    interference = gains.sum() - signal
    return float(signal / (interference + noise_power))


def sum_rate(H: np.ndarray, V: np.ndarray, noise_power: float, bandwidth_hz: float) -> float:
    """Bandwidth-scaled sum-rate in Mbps: (BW/1e6) * sum_k log2(1 + SINR_k)."""
    H = np.asarray(H, dtype=complex)
    K = H.shape[1]
    bits_per_hz = sum(np.log2(1.0 + sinr(k, H, V, noise_power)) for k in range(K))
    return float(bandwidth_hz / 1e6 * bits_per_hz)


def trace_power(V: np.ndarray) -> float:
    """tr(V V^H) = squared Frobenius norm, the radiated power of a TPM."""
    V = np.asarray(V)
    return float(np.sum(np.abs(V) ** 2))


def project_power(V: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean projection of V onto the Frobenius ball of the given radius.

    Computed as radius * V / (||V|| + max(0, radius - ||V||)): the identity
    inside the ball, radial rescaling to the sphere outside.  To satisfy
    tr(V V^H) <= P the caller passes radius = sqrt(P).
    """
    if radius <= 0:
        raise ValueError("projection radius must be positive")
    V = np.asarray(V, dtype=complex)
    norm = float(np.linalg.norm(V))
    if norm <= radius:
        # the closed form reduces to V * radius / radius; branch to keep the
        # inside-the-ball case bit-exact
        return V.copy()
    return radius * V / (norm + max(0.0, radius - norm))


def singular_values(V: np.ndarray) -> np.ndarray:
    """Singular values of V in descending order.

    SVD failures are surfaced as numpy.linalg.LinAlgError; they are never
    silently replaced by zeros.
    """
    V = np.asarray(V, dtype=complex)
    return np.linalg.svd(V, compute_uv=False)
