"""Per-coordinate moment estimation and the coefficient solves behind the
moment-elimination maps.

A MomentProfile carries the per-coordinate third and fourth moments of the
feature distribution (kappa and phi), either estimated from a batch or
supplied analytically for a known distribution. The invertibility margin
tau_j = |phi_j - 1 - kappa_j^2| is the determinant magnitude of the
per-coordinate 2x2 system

    [[1, kappa_j], [kappa_j, phi_j - 1]]

whose solves produce the coefficient tables g (matrix map) and h (weight
map). Coordinates with tau_j below a threshold make those solves explode,
so they are rejected loudly instead of producing garbage coefficients.

Features are assumed standardized (zero mean, unit variance per
coordinate); estimate_moments warns when a batch clearly is not.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import SingularMomentSystemError, ValidationError

TAU_MIN_DEFAULT = 1e-3

SOURCE_ESTIMATED = "estimated-from-batch"
SOURCE_ANALYTIC = "analytic"

# (E x^3, E x^4) for the supported unit-variance feature distributions.
ANALYTIC_MOMENTS = {
    "gaussian": (0.0, 3.0),
    "rademacher": (0.0, 1.0),
    "uniform-unit-variance": (0.0, 1.8),
}

MEAN_TOL = 0.1
VAR_TOL = 0.3


@dataclass
class MomentProfile:
    """Per-coordinate third/fourth moments and derived elimination tables.

    ``g`` and ``h`` are (d, 2) coefficient tables; they stay ``None`` until
    :func:`elimination_coefficients` succeeds (the invertibility gate).
    """

    kappa: np.ndarray
    phi: np.ndarray
    source: str = SOURCE_ESTIMATED
    g: np.ndarray | None = None
    h: np.ndarray | None = None

    def __post_init__(self):
        self.kappa = np.asarray(self.kappa, dtype=float)
        self.phi = np.asarray(self.phi, dtype=float)
        if self.kappa.ndim != 1 or self.phi.shape != self.kappa.shape or self.kappa.size < 1:
            raise ValidationError(
                f"kappa and phi must be equal-length 1-D arrays, got {self.kappa.shape} and {self.phi.shape}"
            )
        if not (np.all(np.isfinite(self.kappa)) and np.all(np.isfinite(self.phi))):
            raise ValidationError("moment profile contains non-finite entries")

    @property
    def d(self):
        return self.kappa.size

    @property
    def tau(self):
        """Invertibility margin |phi - 1 - kappa^2| per coordinate."""
        return np.abs(self.phi - 1.0 - self.kappa**2)

    @property
    def p(self):
        """max{1, ||kappa||_inf, ||phi - 3||_inf, ||phi - 1||_inf}."""
        return float(
            max(
                1.0,
                np.abs(self.kappa).max(),
                np.abs(self.phi - 3.0).max(),
                np.abs(self.phi - 1.0).max(),
            )
        )

    def has_coefficients(self):
        return self.g is not None and self.h is not None


def estimate_moments(x):
    """Estimate per-coordinate third/fourth moments from a feature batch.

    ``x`` is (d, n) with one instance per column. Warns when the batch does
    not look standardized (|mean| > 0.1 or |var - 1| > 0.3 per coordinate).
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValidationError(f"features must be a (d, n) array, got shape {x.shape}")
    d, n = x.shape
    if n == 0:
        raise ValidationError("empty batch: no instances to estimate moments from")
    if n < 2:
        raise ValidationError(f"need at least 2 instances to estimate moments, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("feature batch contains non-finite entries")

    mean = x.mean(axis=1)
    var = x.var(axis=1)
    if np.abs(mean).max() > MEAN_TOL or np.abs(var - 1.0).max() > VAR_TOL:
        warnings.warn(
            "feature batch does not look standardized "
            f"(max |mean| = {np.abs(mean).max():.3g}, max |var - 1| = {np.abs(var - 1.0).max():.3g}); "
            "moment estimates assume zero mean and unit variance per coordinate",
            stacklevel=2,
        )

    x2 = x * x
    kappa = (x2 * x).mean(axis=1)
    phi = (x2 * x2).mean(axis=1)
    return MomentProfile(kappa=kappa, phi=phi, source=SOURCE_ESTIMATED)


def mip_gate(profile, tau_min):
    """True when every coordinate's invertibility margin is at least tau_min."""
    if tau_min <= 0:
        raise ValidationError(f"tau_min must be positive, got {tau_min}")
    return bool(profile.tau.min() >= tau_min)


def elimination_coefficients(profile, tau_min=TAU_MIN_DEFAULT):
    """Solve the per-coordinate 2x2 systems for the elimination tables.

    Returns (g, h), both (d, 2), where row j solves

        [[1, kappa_j], [kappa_j, phi_j - 1]] g_j = [kappa_j, phi_j - 3]
        [[1, kappa_j], [kappa_j, phi_j - 1]] h_j = [1, 0]

    Raises SingularMomentSystemError naming the first coordinate whose
    determinant magnitude falls below tau_min.
    """
    if tau_min <= 0:
        raise ValidationError(f"tau_min must be positive, got {tau_min}")
    kappa = profile.kappa
    phi = profile.phi
    det = phi - 1.0 - kappa**2
    bad = np.abs(det) < tau_min
    if np.any(bad):
        j = int(np.argmax(bad))
        raise SingularMomentSystemError(
            f"moment system singular at coordinate {j}: "
            f"|phi - 1 - kappa^2| = {abs(det[j]):.3e} < tau_min = {tau_min:.3e}"
        )
    g = np.empty((profile.d, 2))
    h = np.empty((profile.d, 2))
    g[:, 0] = 2.0 * kappa / det
    g[:, 1] = (phi - 3.0 - kappa**2) / det
    h[:, 0] = (phi - 1.0) / det
    h[:, 1] = -kappa / det
    return g, h


def with_coefficients(profile, tau_min=TAU_MIN_DEFAULT):
    """Copy of ``profile`` with the elimination tables attached."""
    g, h = elimination_coefficients(profile, tau_min)
    return dataclasses.replace(profile, g=g, h=h)


def analytic_profile(dist, d, tau_min=TAU_MIN_DEFAULT):
    """Analytic moment profile for a named unit-variance distribution.

    Coefficient tables are attached when the distribution passes the
    invertibility gate at ``tau_min``; otherwise they stay absent (the
    rademacher case, where the margin is exactly zero).
    """
    if dist not in ANALYTIC_MOMENTS:
        raise ValidationError(f"unknown distribution {dist!r}; choose from {sorted(ANALYTIC_MOMENTS)}")
    if d < 1:
        raise ValidationError(f"d must be >= 1, got {d}")
    kappa, phi = ANALYTIC_MOMENTS[dist]
    profile = MomentProfile(
        kappa=np.full(d, kappa), phi=np.full(d, phi), source=SOURCE_ANALYTIC
    )
    if mip_gate(profile, tau_min):
        profile = with_coefficients(profile, tau_min)
    return profile
