"""Green's-function kernels and polarizability laws for the coupled-dipole model.

All quantities use the ``exp(-i omega t)`` convention, so outgoing waves are
``H0^(1)`` in the plane and ``exp(ikr)`` in free space.  Inside the cavity the
kernel is the dimensionless 2D scalar Green's function ``(i/4) H0^(1)(kr)``;
polarizabilities are dimensionless in the same normalization, so that the
interaction matrix reads ``diag(1/alpha) - G``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Union

import numpy as np
from scipy.constants import c as SPEED_OF_LIGHT
from scipy.special import hankel1, y0

ArrayLike = Union[float, np.ndarray]

#: Separations below this are treated as coincident points.
COINCIDENCE_TOL = 1e-12

#: Largest passive polarizability magnitude, reached at ``alpha = 4i``.
UNITARY_LIMIT = 4.0


class SelfInteractionError(ValueError):
    """Raised when a Green's function is evaluated at zero separation."""


@dataclass(frozen=True)
class PhysicsContext:
    """Operating frequency and the derived wavelength / wavenumber."""

    frequency: float

    def __post_init__(self):
        if not self.frequency > 0:
            raise ValueError(f"frequency must be positive, got {self.frequency!r}")

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.frequency

    @property
    def wavenumber(self) -> float:
        return 2 * np.pi / self.wavelength

    def to_dict(self) -> dict:
        return {"frequency": self.frequency}

    @classmethod
    def from_dict(cls, d: dict) -> "PhysicsContext":
        return cls(frequency=float(d["frequency"]))


def _separation(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    r = np.linalg.norm(a - b, axis=-1)
    if np.any(r < COINCIDENCE_TOL):
        raise SelfInteractionError("self-interaction undefined: coincident points")
    return r


def greens_2d(k: float, a, b):
    """Outgoing 2D scalar Green's function ``(i/4) H0^(1)(k |a - b|)``.

    ``a`` and ``b`` may be single points of shape ``(2,)`` or broadcastable
    stacks of points of shape ``(..., 2)``.
    """
    r = _separation(a, b)
    g = 0.25j * hankel1(0, k * r)
    return g[()] if np.ndim(g) == 0 else g


def greens_3d(k: float, a, b):
    """Free-space scalar Green's function ``exp(ikr) / (4 pi r)``."""
    r = _separation(a, b)
    g = np.exp(1j * k * r) / (4 * np.pi * r)
    return g[()] if np.ndim(g) == 0 else g


def pairwise_greens_2d(k: float, points: np.ndarray) -> np.ndarray:
    """Symmetric matrix of ``greens_2d`` between all point pairs, zero diagonal."""
    points = np.asarray(points, dtype=float)
    n = len(points)
    out = np.zeros((n, n), dtype=complex)
    if n < 2:
        return out
    iu = np.triu_indices(n, k=1)
    r = np.linalg.norm(points[iu[0]] - points[iu[1]], axis=-1)
    if np.any(r < COINCIDENCE_TOL):
        raise SelfInteractionError("self-interaction undefined: coincident scatterers")
    vals = 0.25j * hankel1(0, k * r)
    out[iu] = vals
    out[(iu[1], iu[0])] = vals
    return out


@dataclass(frozen=True)
class LorentzianModel:
    """Tunable single-resonance polarizability.

    ``alpha(c) = F / (f0(c)^2 - f^2 - i gamma f)`` with the resonance swept
    linearly, ``f0(c) = f_min + c (f_max - f_min)``.
    """

    oscillator_strength: float
    f_min: float
    f_max: float
    damping: float

    def __post_init__(self):
        if not self.f_min < self.f_max:
            raise ValueError("f_min must be below f_max")
        if not self.damping > 0:
            raise ValueError("damping must be positive")
        if not self.oscillator_strength > 0:
            raise ValueError("oscillator_strength must be positive")

    @classmethod
    def default(cls, frequency: float = 10e9, strength_ratio: float = 0.95,
                damping: float = 800e6) -> "LorentzianModel":
        """Resonance tunable over 9.8-10.2 GHz with 800 MHz damping.

        ``F`` is set so the on-resonance magnitude ``F / (gamma f)`` is
        ``strength_ratio`` times the unitary limit 4.  Since
        ``-Im(1/alpha) = gamma f / F`` for every tuning value, the fraction of
        extinguished power scattered back into the cavity is
        ``strength_ratio`` and the remainder leaks out to free space.
        """
        F = strength_ratio * UNITARY_LIMIT * damping * frequency
        return cls(oscillator_strength=F, f_min=9.8e9, f_max=10.2e9, damping=damping)

    @property
    def strength_ratio(self) -> float:
        """Scattered / extinguished power per interaction, at ``f = f_center``."""
        return self.oscillator_strength / (UNITARY_LIMIT * self.damping * 0.5 * (self.f_min + self.f_max))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LorentzianModel":
        return cls(**{k: float(d[k]) for k in ("oscillator_strength", "f_min", "f_max", "damping")})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LorentzianModel":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class Polarizability:
    value: ArrayLike
    derivative: ArrayLike


def meta_atom_polarizability(c: ArrayLike, model: LorentzianModel, f: float) -> Polarizability:
    """Polarizability and its analytic derivative with respect to tuning ``c``.

    Accepts scalar or array ``c``.
    """
    c_arr = np.asarray(c, dtype=float)
    if np.any(~np.isfinite(c_arr)) or np.any(c_arr < 0) or np.any(c_arr > 1):
        raise ValueError("tuning values must lie in [0, 1]")
    if not f > 0:
        raise ValueError("frequency must be positive")
    span = model.f_max - model.f_min
    f0 = model.f_min + c_arr * span
    denom = f0**2 - f**2 - 1j * model.damping * f
    alpha = model.oscillator_strength / denom
    # d(alpha)/dc = -F * 2 f0 * span / denom^2
    dalpha = -model.oscillator_strength * 2 * f0 * span / denom**2
    if np.ndim(c) == 0:
        return Polarizability(complex(alpha), complex(dalpha))
    return Polarizability(alpha, dalpha)


#: Radius of a plated via (1.2 mm drill), well below the densest fence pitch.
VIA_RADIUS = 0.6e-3


def via_polarizability(k: float, radius: float = VIA_RADIUS) -> complex:
    """Polarizability of a thin conducting via between the plates.

    Power balance for an isolated point scatterer excited by a unit field:
    extinction is ``Im(alpha)`` and scattering is ``|alpha|^2 Im G(0)`` with
    ``Im G(r -> 0) = J0(0)/4 = 1/4``.  Passivity is therefore
    ``Im(1/alpha) <= -1/4``; a lossless scatterer sits on the unitary circle
    ``Im(1/alpha) = -1/4``, where scattered and extinguished power are equal.

    The real part follows from the conducting-post boundary condition: the
    total field vanishes on the post surface, ``E_inc + p G(a) = 0``, so
    ``1/alpha = -Re G(a) = Y0(ka)/4`` (radiation reaction kept exact at
    ``-i/4`` so the via is exactly lossless).  The result depends on
    frequency through ``ka``; ``|alpha| <= 4`` with equality only when
    ``Y0(ka) = 0``.
    """
    if not k > 0:
        raise ValueError("wavenumber must be positive")
    if not radius > 0:
        raise ValueError("via radius must be positive")
    return 1.0 / (y0(k * radius) / 4 - 0.25j)


def extinction_and_scattering(alpha: complex) -> tuple:
    """Extinguished and scattered power (common units) for unit incident field.

    Used to check passivity: a passive scatterer has scattering <= extinction.
    """
    return float(np.imag(alpha)), float(abs(alpha) ** 2 * 0.25)
