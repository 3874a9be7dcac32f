"""Tests for the dense linear-algebra primitives.

Oracles are written first and kept independent of the code under test:
modified Gram-Schmidt for QR, a full dense SVD for truncated subspaces and
spectral norms.
"""

import numpy as np
import pytest

from mfm.errors import ConvergenceError, DegenerateFactorError, ValidationError
from mfm.linalg import qr_thin, sin_canonical_angle, spectral_norm, top_k_singvecs


# --- oracles -----------------------------------------------------------------


def mgs_qr(a):
    """Modified Gram-Schmidt QR; R diagonal is positive by construction."""
    a = np.array(a, dtype=float)
    d, k = a.shape
    q = np.zeros((d, k))
    r = np.zeros((k, k))
    for j in range(k):
        v = a[:, j].copy()
        for i in range(j):
            r[i, j] = q[:, i] @ v
            v = v - r[i, j] * q[:, i]
        r[j, j] = np.linalg.norm(v)
        q[:, j] = v / r[j, j]
    return q, r


def dense_top_subspace(m, k):
    """Top-k left singular subspace from a full dense SVD."""
    u, _, _ = np.linalg.svd(np.asarray(m, dtype=float))
    return u[:, :k]


def dense_spectral_norm(m):
    return float(np.linalg.svd(np.asarray(m, dtype=float), compute_uv=False)[0])


def subspace_sine(u, w):
    """Largest canonical-angle sine via the complement projection of w."""
    s = np.linalg.svd(w - u @ (u.T @ w), compute_uv=False)
    return float(min(s[0], 1.0))


# --- qr_thin -----------------------------------------------------------------


def test_qr_identity():
    q, r = qr_thin(np.eye(3))
    np.testing.assert_allclose(q, np.eye(3), atol=1e-14)
    np.testing.assert_allclose(r, np.eye(3), atol=1e-14)


def test_qr_pythagorean_column():
    q, r = qr_thin(np.array([[3.0], [4.0]]))
    np.testing.assert_allclose(q, [[0.6], [0.8]], atol=1e-14)
    np.testing.assert_allclose(r, [[5.0]], atol=1e-14)


def test_qr_random_against_mgs_oracle():
    rng = np.random.default_rng(7)
    a = rng.standard_normal((6, 3))
    q, r = qr_thin(a)
    assert np.linalg.norm(a - q @ r) <= 1e-10 * np.linalg.norm(a)
    assert np.linalg.norm(q.T @ q - np.eye(3)) <= 1e-10
    q_oracle, r_oracle = mgs_qr(a)
    np.testing.assert_allclose(q, q_oracle, atol=1e-9)
    np.testing.assert_allclose(r, r_oracle, atol=1e-9)


@pytest.mark.parametrize("seed,shape", [(0, (5, 2)), (1, (8, 8)), (2, (12, 4)), (3, (6, 1))])
def test_qr_reconstruction_and_orthonormality(seed, shape):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal(shape)
    q, r = qr_thin(a)
    assert np.linalg.norm(a - q @ r) <= 1e-10 * np.linalg.norm(a)
    assert np.linalg.norm(q.T @ q - np.eye(shape[1])) <= 1e-10
    assert np.all(np.diagonal(r) >= 0)
    assert np.allclose(r, np.triu(r))


def test_qr_rank_deficient_raises():
    a = np.ones((4, 2))  # duplicate columns
    with pytest.raises(DegenerateFactorError):
        qr_thin(a)


def test_qr_rejects_wide_and_nonfinite():
    with pytest.raises(ValidationError):
        qr_thin(np.ones((2, 3)))
    with pytest.raises(ValidationError):
        qr_thin(np.array([[1.0], [np.nan]]))


# --- top_k_singvecs ----------------------------------------------------------


def test_topk_diagonal():
    u = top_k_singvecs(np.diag([3.0, 2.0, 1.0]), 2)
    ref = np.eye(3)[:, :2]
    assert subspace_sine(u, ref) <= 1e-10
    np.testing.assert_allclose(u, ref, atol=1e-10)  # sign rule makes it exact


def test_topk_rank_one():
    v = np.array([1.0, -2.0, 2.0])
    v /= np.linalg.norm(v)
    u = top_k_singvecs(np.outer(v, v), 1)
    # largest-magnitude entry positive: the oracle direction re-signed the same way
    expect = v * np.sign(v[np.argmax(np.abs(v))])
    np.testing.assert_allclose(u[:, 0], expect, atol=1e-10)


def test_topk_symmetric_vs_dense_oracle():
    rng = np.random.default_rng(11)
    a = rng.standard_normal((8, 8))
    m = (a + a.T) / 2
    u = top_k_singvecs(m, 3)
    assert subspace_sine(u, dense_top_subspace(m, 3)) <= 1e-8


def _corpus():
    rng = np.random.default_rng(2024)
    mats = [
        np.diag([5.0, 4.0, 1.0, 0.5]),
        np.outer(np.arange(1.0, 6.0), np.arange(1.0, 6.0)),
        rng.standard_normal((7, 7)),
        rng.standard_normal((12, 12)),
        rng.standard_normal((9, 5)),
        (lambda b: (b + b.T) / 2)(rng.standard_normal((10, 10))),
        np.diag([1.0, 1.0 - 1e-3, 0.5]),  # small but resolvable gap
    ]
    return mats


@pytest.mark.parametrize("idx", range(7))
@pytest.mark.parametrize("k", [1, 2])
def test_topk_corpus_vs_dense_oracle(idx, k):
    m = _corpus()[idx]
    sv = np.linalg.svd(m, compute_uv=False)
    if k > min(m.shape) or sv[k - 1] < 1e-10 * sv[0]:
        pytest.skip("rank below k")
    u = top_k_singvecs(m, k)
    assert np.linalg.norm(u.T @ u - np.eye(k)) <= 1e-10
    assert subspace_sine(u, dense_top_subspace(m, k)) <= 1e-8


def test_topk_antisymmetric_part_is_ignored_for_symmetric_input():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((6, 6))
    m = (a + a.T) / 2
    u1 = top_k_singvecs(m, 2)
    u2 = top_k_singvecs(m + np.zeros_like(m), 2)
    np.testing.assert_allclose(u1, u2, atol=0)


def test_topk_zero_matrix_raises():
    with pytest.raises(DegenerateFactorError):
        top_k_singvecs(np.zeros((4, 4)), 2)


def test_topk_bad_k():
    with pytest.raises(ValidationError):
        top_k_singvecs(np.eye(3), 0)
    with pytest.raises(ValidationError):
        top_k_singvecs(np.eye(3), 4)


def test_topk_nonconvergence_reports_residual():
    rng = np.random.default_rng(1)
    m = rng.standard_normal((40, 40))
    with pytest.raises(ConvergenceError, match="residual"):
        top_k_singvecs(m, 2, max_iter=1, tol=1e-15)


# --- spectral_norm -----------------------------------------------------------


def test_spectral_norm_zero():
    assert spectral_norm(np.zeros((3, 5))) == 0.0


def test_spectral_norm_diagonal():
    assert spectral_norm(np.diag([-5.0, 2.0])) == pytest.approx(5.0, rel=1e-12)


def test_spectral_norm_random_vs_dense_oracle():
    rng = np.random.default_rng(3)
    m = rng.standard_normal((10, 10))
    assert spectral_norm(m) == pytest.approx(dense_spectral_norm(m), rel=1e-8)


@pytest.mark.parametrize("c", [2.0, -3.5, 0.25, 7.0])
def test_spectral_norm_scaling(c):
    rng = np.random.default_rng(8)
    m = rng.standard_normal((6, 9))
    assert spectral_norm(c * m) == pytest.approx(abs(c) * spectral_norm(m), rel=1e-12)


# --- sin_canonical_angle -----------------------------------------------------


def test_angle_identical_subspaces():
    q, _ = qr_thin(np.random.default_rng(0).standard_normal((6, 3)))
    assert sin_canonical_angle(q, q) == pytest.approx(0.0, abs=1e-12)


def test_angle_orthogonal_subspaces():
    e1 = np.array([[1.0], [0.0]])
    e2 = np.array([[0.0], [1.0]])
    assert sin_canonical_angle(e1, e2) == pytest.approx(1.0, abs=1e-12)


def test_angle_45_degrees():
    u = np.array([[1.0], [0.0]])
    w = np.array([[1.0], [1.0]]) / np.sqrt(2)
    assert sin_canonical_angle(u, w) == pytest.approx(np.sqrt(2) / 2, abs=1e-12)


def test_angle_symmetry_and_rotation_invariance():
    rng = np.random.default_rng(12)
    u, _ = qr_thin(rng.standard_normal((8, 3)))
    w, _ = qr_thin(rng.standard_normal((8, 3)))
    rot, _ = qr_thin(rng.standard_normal((3, 3)))
    s = sin_canonical_angle(u, w)
    assert sin_canonical_angle(w, u) == pytest.approx(s, abs=1e-10)
    assert sin_canonical_angle(u @ rot, w) == pytest.approx(s, abs=1e-10)
    assert sin_canonical_angle(u, w @ rot) == pytest.approx(s, abs=1e-10)


def test_angle_rejects_non_orthonormal():
    with pytest.raises(ValidationError):
        sin_canonical_angle(np.ones((4, 2)), np.eye(4)[:, :2])
