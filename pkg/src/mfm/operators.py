"""Measurement operators on feature batches.

A Batch holds features X (d x n, one instance per column) and labels y (n).
apply_A evaluates the per-instance quadratic form x_i^T M x_i; apply_A_adjoint
is its adjoint under the trace inner product, sum_i z_i x_i x_i^T. p0/p1/p2
are the batch statistics whose expectations isolate the trace, diagonal, and
first-order components of the model error; m_operator and w_operator combine
them with a moment profile's coefficient tables so that, in expectation over
a fresh batch, they return the current matrix and weight errors themselves.
The *_ifm variants are the diagonal-free forms: projecting out the diagonal
removes everything the moment corrections would have cancelled, so they need
no moment profile at all.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass
class Batch:
    """Features (d, n) with one instance per column, plus n labels."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.x.ndim != 2:
            raise ValidationError(f"features must be a (d, n) array, got shape {self.x.shape}")
        if self.y.ndim != 1 or self.y.size != self.x.shape[1]:
            raise ValidationError(
                f"labels must be 1-D with one entry per instance, got {self.y.shape} for {self.x.shape[1]} instances"
            )
        if self.x.shape[1] < 1:
            raise ValidationError("batch must contain at least one instance")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise ValidationError("batch contains non-finite entries")

    @property
    def d(self):
        return self.x.shape[0]

    @property
    def n(self):
        return self.x.shape[1]


def offdiag(m):
    """Copy of a square matrix with its diagonal zeroed."""
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValidationError(f"offdiag needs a square matrix, got shape {m.shape}")
    out = m.copy()
    np.fill_diagonal(out, 0.0)
    return out


def _check_features(x):
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValidationError(f"features must be a (d, n) array, got shape {x.shape}")
    return x


def _check_vector(x, z, name="z"):
    z = np.asarray(z, dtype=float)
    if z.ndim != 1 or z.size != x.shape[1]:
        raise ValidationError(
            f"{name} must be 1-D with one entry per instance, got shape {z.shape} for {x.shape[1]} instances"
        )
    return z


def apply_A(x, m):
    """Per-instance quadratic forms: entry i is x_i^T m x_i."""
    x = _check_features(x)
    m = np.asarray(m, dtype=float)
    d = x.shape[0]
    if m.shape != (d, d):
        raise ValidationError(f"matrix must be ({d}, {d}) to match the features, got {m.shape}")
    return np.einsum("ij,ij->j", x, m @ x)


def apply_A_adjoint(x, z):
    """Adjoint of apply_A: sum_i z_i x_i x_i^T, returned exactly symmetric."""
    x = _check_features(x)
    z = _check_vector(x, z)
    out = (x * z) @ x.T
    # One gemm is symmetric only up to rounding; averaging makes it exact.
    return (out + out.T) / 2.0


def p0(z):
    """Mean of z."""
    z = np.asarray(z, dtype=float)
    if z.ndim != 1 or z.size < 1:
        raise ValidationError(f"p0 needs a nonempty vector, got shape {z.shape}")
    return float(z.mean())


def p1(x, z):
    """Feature average X z / n."""
    x = _check_features(x)
    z = _check_vector(x, z)
    return x @ z / x.shape[1]


def p2(x, z):
    """Squared-feature average (X o X) z / n minus the mean of z."""
    x = _check_features(x)
    z = _check_vector(x, z)
    return (x * x) @ z / x.shape[1] - p0(z)


def _require_table(profile, table, name):
    if table is None:
        raise ValidationError(
            f"moment profile has no {name} coefficients; run elimination_coefficients "
            "(the invertibility gate) before using the elimination maps"
        )
    table = np.asarray(table, dtype=float)
    if table.shape != (profile.d, 2):
        raise ValidationError(f"{name} table must be ({profile.d}, 2), got {table.shape}")
    return table


def m_operator(batch, residual, profile, corrected=True):
    """Per-batch estimate of the matrix error of the model that produced ``residual``.

    Returns A'(r)/(2n) minus the diagonal corrections built from the
    profile's g table. With ``corrected=True`` (default) the mean-residual
    term mean(r)/2 * I is also subtracted, removing a bias proportional to
    the trace of the matrix error; ``corrected=False`` keeps that bias and
    exists so the difference is demonstrable.
    """
    r = _check_vector(batch.x, residual, "residual")
    if batch.x.shape[0] != profile.d:
        raise ValidationError(f"profile dimension {profile.d} != batch dimension {batch.x.shape[0]}")
    g = _require_table(profile, profile.g, "g")
    out = apply_A_adjoint(batch.x, r) / (2.0 * batch.n)
    diag_term = 0.5 * (g[:, 0] * p1(batch.x, r) + g[:, 1] * p2(batch.x, r))
    if corrected:
        diag_term = diag_term + 0.5 * p0(r)
    idx = np.arange(batch.d)
    out[idx, idx] -= diag_term
    return out


def w_operator(batch, residual, profile):
    """Per-batch estimate of the weight error of the model that produced ``residual``."""
    r = _check_vector(batch.x, residual, "residual")
    if batch.x.shape[0] != profile.d:
        raise ValidationError(f"profile dimension {profile.d} != batch dimension {batch.x.shape[0]}")
    h = _require_table(profile, profile.h, "h")
    return h[:, 0] * p1(batch.x, r) + h[:, 1] * p2(batch.x, r)


def m_operator_ifm(batch, residual):
    """Diagonal-free matrix-error estimate: offdiag(A'(r) / (2n)).

    Zeroing the diagonal removes every term the moment corrections would
    have cancelled, so no moment profile is needed.
    """
    r = _check_vector(batch.x, residual, "residual")
    out = apply_A_adjoint(batch.x, r) / (2.0 * batch.n)
    np.fill_diagonal(out, 0.0)
    return out


def w_operator_ifm(batch, residual):
    """Diagonal-free weight-error estimate: the feature average X r / n."""
    r = _check_vector(batch.x, residual, "residual")
    return p1(batch.x, r)
