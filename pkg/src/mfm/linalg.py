"""Dense small-matrix primitives: thin QR, truncated SVD, spectral norm,
and canonical angles between subspaces.

The truncated SVD runs a blocked randomized subspace iteration (fixed
oversampling, power steps until the Ritz residual is small). The block is
started from a generator with a fixed internal seed, so every routine here
is a deterministic function of its input. Sign conventions -- nonnegative R
diagonal for QR, largest-magnitude entry positive for singular vectors --
make outputs reproducible bit for bit across runs.
"""

from __future__ import annotations

import numpy as np

from .errors import ConvergenceError, DegenerateFactorError, ValidationError

RANK_TOL = 1e-12        # sigma_min below RANK_TOL * sigma_max counts as rank deficient
SUBSPACE_TOL = 1e-9     # relative Ritz residual required of the truncated SVD
OVERSAMPLE = 5
MAX_POWER_ITERS = 500
ORTHONORMAL_TOL = 1e-8  # ||Q^T Q - I||_F allowed for "orthonormal" inputs

_START_SEED = 0x5EED    # fixed start block: output depends on the input matrix only


def _as_matrix(a, name="matrix"):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValidationError(f"{name} must be a 2-D array with positive shape, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} contains non-finite entries")
    return a


def qr_thin(a):
    """Thin QR factorization with the diagonal of R forced nonnegative.

    Parameters
    ----------
    a : (d, k) array with d >= k and full column rank.

    Returns
    -------
    q : (d, k) array with orthonormal columns.
    r : (k, k) upper-triangular array, diagonal >= 0.

    Raises
    ------
    DegenerateFactorError
        If ``a`` is numerically rank deficient (smallest singular value
        below ``RANK_TOL`` times the largest).
    """
    a = _as_matrix(a, "a")
    d, k = a.shape
    if d < k:
        raise ValidationError(f"thin QR needs at least as many rows as columns, got {a.shape}")
    q, r = np.linalg.qr(a, mode="reduced")
    signs = np.sign(np.diagonal(r)).copy()
    signs[signs == 0] = 1.0
    q = q * signs
    r = signs[:, None] * r
    sv = np.linalg.svd(r, compute_uv=False)
    if sv[0] == 0.0 or sv[-1] < RANK_TOL * sv[0]:
        ratio = 0.0 if sv[0] == 0.0 else sv[-1] / sv[0]
        raise DegenerateFactorError(
            f"rank-deficient factor: sigma_min/sigma_max = {ratio:.3e} < {RANK_TOL:.0e}"
        )
    return q, r


def _orthonormal_basis(y):
    return np.linalg.qr(y, mode="reduced")[0]


def _fix_column_signs(u, v=None):
    """Flip column signs so the largest-magnitude entry of each column of u is positive."""
    idx = np.abs(u).argmax(axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    if v is None:
        return u * signs
    return u * signs, v * signs


def _top_singular_triplets(m, k, oversample=OVERSAMPLE, tol=SUBSPACE_TOL, max_iter=MAX_POWER_ITERS):
    """Top-k singular triplets (u, s, v) of m by blocked subspace iteration.

    Power steps continue until every kept Ritz triplet satisfies
    ||m v_i - s_i u_i|| <= tol * s_1. The other residual is zero by
    construction: the small projected matrix is factored exactly.
    """
    d_out, d_in = m.shape
    block = min(k + oversample, d_out, d_in)
    rng = np.random.default_rng(_START_SEED)
    q = _orthonormal_basis(m @ rng.standard_normal((d_in, block)))
    worst = np.inf
    for _ in range(max_iter):
        q = _orthonormal_basis(m.T @ q)
        q = _orthonormal_basis(m @ q)
        small = q.T @ m
        u_small, s, vt = np.linalg.svd(small, full_matrices=False)
        u = q @ u_small[:, :k]
        v = vt[:k].T
        if s[0] == 0.0:
            return u, s[:k].copy(), v
        resid = m @ v - u * s[:k]
        worst = np.sqrt(np.einsum("ij,ij->j", resid, resid)).max()
        if worst <= tol * s[0]:
            return u, s[:k].copy(), v
    raise ConvergenceError(
        f"subspace iteration stalled: relative residual {worst / s[0]:.3e} "
        f"after {max_iter} iterations (target {tol:.1e})"
    )


def top_k_singvecs(m, k, tol=SUBSPACE_TOL, max_iter=MAX_POWER_ITERS):
    """Orthonormal basis of the top-k left singular subspace of m.

    Column signs follow the largest-magnitude-entry-positive rule. Requires
    sigma_k well separated from zero; a spectrum that is degenerate at rank
    k (e.g. the zero matrix) raises DegenerateFactorError, and failure to
    reach the residual target raises ConvergenceError.
    """
    m = _as_matrix(m, "m")
    if not 1 <= k <= min(m.shape):
        raise ValidationError(f"k must be in [1, {min(m.shape)}], got {k}")
    if not m.any():
        raise DegenerateFactorError("zero matrix has no top-k singular subspace")
    u, s, _ = _top_singular_triplets(m, k, tol=tol, max_iter=max_iter)
    if s[0] == 0.0 or s[k - 1] < RANK_TOL * s[0]:
        raise DegenerateFactorError(
            f"spectrum degenerate at rank {k}: sigma_{k} = {s[k - 1]:.3e}, sigma_1 = {s[0]:.3e}"
        )
    return _fix_column_signs(u)


# The Ritz value underestimates sigma_1 by at most (residual/sigma_1)^2 / 2,
# so a 1e-5 residual already gives ~5e-11 relative value accuracy. Flat
# spectra (e.g. c*I + noise) stall the residual near its floor but leave the
# value exact, so the looser target also keeps those inputs convergent.
VALUE_TOL = 1e-5


def spectral_norm(m, tol=VALUE_TOL, max_iter=MAX_POWER_ITERS):
    """Largest singular value of m (relative accuracy ~1e-8 or better)."""
    m = _as_matrix(m, "m")
    if not m.any():
        return 0.0
    _, s, _ = _top_singular_triplets(m, 1, tol=tol, max_iter=max_iter)
    return float(s[0])


def sin_canonical_angle(u, w):
    """Sine of the largest canonical angle between two orthonormal bases.

    Both inputs must be (d, k) with orthonormal columns (checked to
    ``ORTHONORMAL_TOL``). Computed as the largest singular value of the
    projection of w onto the orthogonal complement of span(u), which stays
    accurate for nearly identical subspaces, where the equivalent
    sqrt(1 - sigma_min(u^T w)^2) form loses half the digits. Symmetric in
    its arguments and invariant to right-rotation of either basis.
    """
    u = _as_matrix(u, "u")
    w = _as_matrix(w, "w")
    if u.shape != w.shape:
        raise ValidationError(f"bases must have identical shapes, got {u.shape} and {w.shape}")
    eye = np.eye(u.shape[1])
    for name, q in (("u", u), ("w", w)):
        defect = np.linalg.norm(q.T @ q - eye)
        if defect > ORTHONORMAL_TOL:
            raise ValidationError(f"{name} is not column-orthonormal (defect {defect:.3e})")
    resid = w - u @ (u.T @ w)
    s = np.linalg.svd(resid, compute_uv=False)
    return float(min(s[0], 1.0))
