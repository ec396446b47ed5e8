"""Differential-privacy core: normal CDF, noise calibration, clipping, dpsign.

The noise scale is calibrated through the exact Gaussian-mechanism
feasibility condition

    Phi(D/(2*sigma) - eps*sigma/D) - exp(eps) * Phi(-D/(2*sigma) - eps*sigma/D) <= delta

where D is the L2 sensitivity. The left-hand side is continuous and strictly
decreasing in sigma, so the smallest feasible sigma is found by bisection.
The ``dpsign`` compressor then emits +1 on coordinate i with probability
Phi(g_i / sigma), which is realised by adding N(0, sigma^2) noise and taking
the sign.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "CalibrationError",
    "PrivacyParams",
    "normal_cdf",
    "agm_condition",
    "calibrate_sigma",
    "clip_per_example",
    "deterministic_sign",
    "dpsign",
    "sign_wire_bytes",
    "pack_signs",
    "unpack_signs",
]

_SQRT2 = math.sqrt(2.0)

# Relative width at which the calibration bisection stops.
CALIBRATION_RTOL = 1e-9


class CalibrationError(RuntimeError):
    """No noise scale satisfying the privacy condition could be bracketed."""


def normal_cdf(x: float) -> float:
    """Standard normal CDF Phi(x).

    The negative half-line goes through erfc so lower-tail values keep full
    relative precision; as a consequence Phi(-x) == 1 - Phi(x) holds to a
    few ulp instead of degrading with |x|.
    """
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"normal_cdf requires a finite argument, got {x!r}")
    if x < 0.0:
        return 0.5 * math.erfc(-x / _SQRT2)
    return 0.5 * (1.0 + math.erf(x / _SQRT2))


def _check_privacy_args(epsilon: float, delta: float, sensitivity: float) -> None:
    if not (math.isfinite(epsilon) and epsilon > 0.0):
        raise ValueError(f"epsilon must be a positive finite real, got {epsilon!r}")
    if not (0.0 < delta < 1.0):
        raise ValueError(f"delta must lie in (0, 1), got {delta!r}")
    if not (math.isfinite(sensitivity) and sensitivity > 0.0):
        raise ValueError(f"sensitivity must be a positive finite real, got {sensitivity!r}")


def agm_condition(epsilon: float, delta: float, sensitivity: float, sigma: float) -> float:
    """Left-hand side of the Gaussian-mechanism feasibility condition.

    Adding N(0, sigma^2 I) noise to a release with L2 sensitivity
    ``sensitivity`` is (epsilon, delta)-DP iff the returned value is
    <= delta. The value depends on the inputs only through epsilon and
    sensitivity/sigma, and decreases monotonically to 0 as sigma grows.
    """
    _check_privacy_args(epsilon, delta, sensitivity)
    if not (math.isfinite(sigma) and sigma > 0.0):
        raise ValueError(f"sigma must be a positive finite real, got {sigma!r}")
    half_ratio = sensitivity / (2.0 * sigma)
    shift = epsilon * sigma / sensitivity
    return normal_cdf(half_ratio - shift) - math.exp(epsilon) * normal_cdf(-half_ratio - shift)


def calibrate_sigma(epsilon: float, delta: float, sensitivity: float) -> float:
    """Smallest sigma for which ``agm_condition`` holds, by bisection.

    Starts from the bracket [sensitivity*1e-6, sensitivity*1e+6], growing
    either end geometrically if the crossing lies outside, then bisects to
    relative width ``CALIBRATION_RTOL`` and returns the feasible endpoint.
    The result scales linearly in ``sensitivity``.
    """
    _check_privacy_args(epsilon, delta, sensitivity)
    lo = sensitivity * 1e-6
    hi = sensitivity * 1e6

    grow = 0
    while agm_condition(epsilon, delta, sensitivity, hi) > delta:
        hi *= 16.0
        grow += 1
        if grow > 64 or not math.isfinite(hi):
            raise CalibrationError(
                f"no feasible sigma below {hi:g} for eps={epsilon}, delta={delta}"
            )
    while agm_condition(epsilon, delta, sensitivity, lo) <= delta:
        lo /= 16.0
        grow += 1
        if grow > 64 or lo <= 0.0:
            raise CalibrationError(
                f"condition already satisfied at sigma={lo:g}; cannot bracket the "
                f"minimum for eps={epsilon}, delta={delta}"
            )

    while hi - lo > CALIBRATION_RTOL * hi:
        mid = 0.5 * (lo + hi)
        if agm_condition(epsilon, delta, sensitivity, mid) <= delta:
            hi = mid
        else:
            lo = mid
    return hi


@dataclass(frozen=True)
class PrivacyParams:
    """Per-round privacy budget and the noise scale calibrated to it.

    ``sigma`` must be the minimal feasible noise scale: construction fails
    both when the condition is violated and when sigma is visibly larger
    than necessary (shrinking it by 1e-6 relative must break the condition).
    Use :meth:`calibrated` to build a compliant instance.
    """

    epsilon: float
    delta: float
    sensitivity: float
    sigma: float

    def __post_init__(self) -> None:
        _check_privacy_args(self.epsilon, self.delta, self.sensitivity)
        if not (math.isfinite(self.sigma) and self.sigma > 0.0):
            raise ValueError(f"sigma must be a positive finite real, got {self.sigma!r}")
        if agm_condition(self.epsilon, self.delta, self.sensitivity, self.sigma) > self.delta:
            raise ValueError(
                f"sigma={self.sigma!r} is too small for "
                f"(eps={self.epsilon}, delta={self.delta}, sensitivity={self.sensitivity})"
            )
        shrunk = self.sigma * (1.0 - 1e-6)
        if agm_condition(self.epsilon, self.delta, self.sensitivity, shrunk) <= self.delta:
            raise ValueError(
                f"sigma={self.sigma!r} is not minimal; use PrivacyParams.calibrated()"
            )

    @classmethod
    def calibrated(cls, epsilon: float, delta: float, sensitivity: float) -> "PrivacyParams":
        """Calibrate sigma for the given budget and return the full parameter set."""
        return cls(epsilon, delta, sensitivity, calibrate_sigma(epsilon, delta, sensitivity))


def clip_per_example(grad: np.ndarray, bound: float) -> np.ndarray:
    """Project a gradient onto the L2 ball of radius ``bound``.

    Vectors already inside the ball are returned unchanged; longer ones are
    rescaled so their norm equals ``bound``. The zero vector passes through.
    """
    if not (math.isfinite(bound) and bound > 0.0):
        raise ValueError(f"clip bound must be a positive finite real, got {bound!r}")
    grad = np.asarray(grad, dtype=np.float64)
    norm = float(np.linalg.norm(grad))
    if norm <= bound:
        return grad
    return grad * (bound / norm)


def deterministic_sign(values: np.ndarray) -> np.ndarray:
    """Coordinate-wise sign with the zero tie resolved to +1."""
    return np.where(np.asarray(values) >= 0.0, 1.0, -1.0)


def dpsign(grad: np.ndarray, params: PrivacyParams, rng: np.random.Generator) -> np.ndarray:
    """Privatising 1-bit compressor.

    Coordinate i is +1 with probability Phi(g_i / sigma), independently
    across coordinates, realised as sign(g_i + N(0, sigma^2)). Deterministic
    given (grad, sigma, rng state).
    """
    grad = np.asarray(grad, dtype=np.float64)
    noised = grad + params.sigma * rng.standard_normal(grad.shape)
    return deterministic_sign(noised)


def sign_wire_bytes(d: int) -> int:
    """Bytes needed to ship a length-d sign vector at one bit per coordinate."""
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    return (d + 7) // 8


def pack_signs(signs: np.ndarray) -> bytes:
    """Pack a {-1,+1} vector into ceil(d/8) bytes (+1 -> bit 1, MSB first)."""
    arr = np.asarray(signs)
    if arr.ndim != 1 or not np.all(np.abs(arr) == 1):
        raise ValueError("sign vector entries must all be -1 or +1")
    return np.packbits(arr > 0).tobytes()


def unpack_signs(blob: bytes, d: int) -> np.ndarray:
    """Inverse of :func:`pack_signs` for a vector of known length d."""
    if len(blob) != sign_wire_bytes(d):
        raise ValueError(f"expected {sign_wire_bytes(d)} bytes for d={d}, got {len(blob)}")
    bits = np.unpackbits(np.frombuffer(blob, dtype=np.uint8), count=d)
    return np.where(bits == 1, 1.0, -1.0)
