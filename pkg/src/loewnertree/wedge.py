"""Two straight slits from a common base point: exact driving data.

A wedge with slit angles 0 < theta1 < theta2 < pi (measured from the
positive real axis) is generated by square-root drivers zeta_j * sqrt(t).
Writing theta1 = a*pi and theta2 = (1-b)*pi, the constants come from
evaluating two ratios at the unique negative root of a cubic.

Normalization caveat: the raw ratio values (psi1, psi2) reproduce the
requested slit angles when each driver atom carries unit mass in the
Loewner equation.  Hull tracing in this package drives genealogy embeddings
with mass 1/2 per atom (see loewner.EMBEDDING_ATOM_MASS), under which the
correct constants are the raw values divided by sqrt(2); both are exposed
and `psi_calibration_report` measures the winner from traced hulls.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class WedgeSpec:
    """Angles, exponents, cubic root and driving constants of a wedge."""

    theta1: float
    theta2: float
    a: float
    b: float
    x: float
    psi1: float
    psi2: float
    zeta1: float          # raw, unit-mass normalization: psi1 - psi2
    zeta2: float          # raw, unit-mass normalization: psi1 + psi2
    zeta1_embedding: float  # mass-1/2 normalization: zeta1 / sqrt(2)
    zeta2_embedding: float

    def as_dict(self) -> dict:
        return {
            "theta1": self.theta1, "theta2": self.theta2,
            "a": self.a, "b": self.b, "x": self.x,
            "psi1": self.psi1, "psi2": self.psi2,
            "zeta1": self.zeta1, "zeta2": self.zeta2,
            "zeta1_embedding": self.zeta1_embedding,
            "zeta2_embedding": self.zeta2_embedding,
        }


def cubic_coefficients(a: float, b: float) -> np.ndarray:
    """Coefficients (descending powers) of the angle cubic Q(x)."""
    c3 = -b + b**3
    c2 = 3 * b - 3 * a * b - 3 * b**2 + 3 * a * b**2
    c1 = 3 * a - 3 * a**2 - 3 * a * b + 3 * a**2 * b
    c0 = -a + a**3
    return np.array([c3, c2, c1, c0])


def cubic_value(a: float, b: float, x) -> np.ndarray:
    c3, c2, c1, c0 = cubic_coefficients(a, b)
    x = np.asarray(x, dtype=float)
    return ((c3 * x + c2) * x + c1) * x + c0


def _check_ab(a: float, b: float) -> None:
    if not (0 < a and 0 < b and a + b < 1):
        raise ValueError(f"require a, b > 0 and a + b < 1, got a={a}, b={b}")


def negative_root(a: float, b: float, *, rtol: float = 1e-15) -> float:
    """Unique negative root of Q, by bracketed bisection.

    Q(0) = -a(1-a^2) < 0 and Q -> +inf as x -> -inf, so doubling from -1
    brackets the root; bisection is robust arbitrarily close to the
    admissibility boundary where roots nearly merge.
    """
    _check_ab(a, b)
    lo = -1.0
    for _ in range(200):
        if cubic_value(a, b, lo) > 0:
            break
        lo *= 2.0
    else:
        raise ArithmeticError("failed to bracket the negative root")
    hi = 0.0
    scale = max(abs(cubic_value(a, b, lo)), abs(cubic_value(a, b, hi)))
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        q = cubic_value(a, b, mid)
        if abs(q) <= 1e-14 * scale and (hi - lo) <= rtol * max(1.0, abs(mid)):
            return float(mid)
        if q > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= np.finfo(float).eps * max(1.0, abs(mid)):
            break
    return float(0.5 * (lo + hi))


def psi_values(theta1: float, theta2: float) -> tuple[float, float, float, float, float]:
    """(a, b, x, psi1, psi2) for slit angles theta1 < theta2."""
    if not (0 < theta1 < theta2 < math.pi):
        raise ValueError("require 0 < theta1 < theta2 < pi")
    a = theta1 / math.pi
    b = 1.0 - theta2 / math.pi
    _check_ab(a, b)
    x = negative_root(a, b)
    den = math.sqrt(a * (1 - a) - 2 * a * b * x + b * (1 - b) * x * x)
    psi1 = (1 + x - 3 * a - 3 * b * x) / den
    rad = (1 - a) ** 2 + 2 * x * (a + b + a * b - 1) + x * x * (1 - b) ** 2
    psi2 = math.sqrt(rad) / den
    return a, b, x, psi1, psi2


def wedge_constants(theta1: float, theta2: float) -> tuple[float, float]:
    """Raw driving constants (zeta1, zeta2) = (psi1 - psi2, psi1 + psi2)."""
    _, _, _, psi1, psi2 = psi_values(theta1, theta2)
    return psi1 - psi2, psi1 + psi2


def wedge_spec(theta1: float, theta2: float) -> WedgeSpec:
    a, b, x, psi1, psi2 = psi_values(theta1, theta2)
    z1, z2 = psi1 - psi2, psi1 + psi2
    return WedgeSpec(
        theta1=theta1, theta2=theta2, a=a, b=b, x=x, psi1=psi1, psi2=psi2,
        zeta1=z1, zeta2=z2,
        zeta1_embedding=z1 / SQRT2, zeta2_embedding=z2 / SQRT2,
    )


def balanced_constants(theta: float) -> tuple[float, float]:
    """Drivers (-c, c) with c = sqrt((pi - 2 theta)/theta) for a symmetric wedge.

    This is the embedding-mass normalization: tracing these drivers with atom
    mass 1/2 yields slit angles (theta, pi - theta).  It equals the raw
    psi-value divided by sqrt(2).
    """
    if not (0 < theta < math.pi / 2):
        raise ValueError("require 0 < theta < pi/2")
    c = math.sqrt((math.pi - 2 * theta) / theta)
    return -c, c


def folding_map(a: float, b: float, x: float, z) -> np.ndarray:
    """f(z) = (z-1)^a z^(1-a-b) (z-x)^b with principal upper-half-plane branches.

    Maps x, 0, 1 to the base point 0 and folds [x, 0] and [0, 1] onto the two
    slits; real arguments are treated as limits from above (arg in [0, pi]).
    """
    _check_ab(a, b)
    z = np.asarray(z, dtype=complex)

    def power(w, p):
        r = np.abs(w)
        ang = np.angle(w)
        ang = np.where((w.imag == 0) & (w.real < 0), math.pi, ang)
        out = np.zeros_like(w)
        nz = r > 0
        out[nz] = np.exp(p * (np.log(r[nz]) + 1j * ang[nz]))
        return out

    return power(z - 1, a) * power(z, 1 - a - b) * power(z - x, b)


def angle_from_alpha(alpha: float) -> float:
    """Slit base angle produced by repulsion strength alpha: theta = pi/(alpha+2)."""
    if not (np.isfinite(alpha) and alpha > 0):
        raise ValueError("alpha must be a positive real")
    return math.pi / (alpha + 2.0)


def alpha_from_angle(theta: float) -> float:
    """Inverse of angle_from_alpha: alpha = pi/theta - 2."""
    if not (0 < theta < math.pi / 2):
        raise ValueError("theta must lie in (0, pi/2)")
    return math.pi / theta - 2.0
