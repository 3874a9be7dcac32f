"""Synthetic ground truths and data.

Planted models follow one of three interaction-matrix forms, all built from
a rank-k core:

* ``psd-minus-diag``: offdiag(U U^T), the classic symmetric-factor form;
* ``asym-minus-diag``: offdiag(U L U^T) with a mixed-sign diagonal L, a
  decoupled factor pair whose core has both positive and negative
  eigenvalues;
* ``general-low-rank``: U L U^T itself, full rank-k core with a nonzero
  diagonal.

The mixed-sign forms use a correlated second factor (column-scaled copy of
the first) so the core stays symmetric with rank exactly k; an independent
second factor would symmetrize to a rank-2k target that no rank-k model can
express, which defeats the point of the experiments.

Truth, training data, and test data derive from independent substreams of
the experiment seed, so changing one never perturbs the others.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError
from .operators import Batch, apply_A, offdiag
from .rng import TEST_STREAM, TRAIN_STREAM, TRUTH_STREAM, sub_rng
from .solver import FreshBatchSource, GroundTruth

M_STAR_FORMS = ("psd-minus-diag", "asym-minus-diag", "general-low-rank")
X_DISTS = ("gaussian", "rademacher", "uniform-unit-variance")

_REGEN_ATTEMPTS = 5
_SIGMA_MIN = 1e-10


@dataclass
class SynthSpec:
    """Recipe for one synthetic problem instance."""

    d: int
    k: int
    m_star_form: str = "psd-minus-diag"
    x_dist: str = "gaussian"
    flip_labels: bool = False
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.d < 1 or self.k < 1 or self.k > self.d:
            raise ValidationError(f"need 1 <= k <= d, got k={self.k}, d={self.d}")
        if self.m_star_form not in M_STAR_FORMS:
            raise ValidationError(
                f"m_star_form must be one of {M_STAR_FORMS}, got {self.m_star_form!r}"
            )
        if self.x_dist not in X_DISTS:
            raise ValidationError(f"x_dist must be one of {X_DISTS}, got {self.x_dist!r}")
        if self.noise_std < 0:
            raise ValidationError(f"noise_std must be >= 0, got {self.noise_std}")


def sample_features(x_dist, d, n, rng):
    """(d, n) feature draw from a named zero-mean unit-variance distribution."""
    if x_dist == "gaussian":
        return rng.standard_normal((d, n))
    if x_dist == "rademacher":
        return rng.integers(0, 2, size=(d, n)).astype(float) * 2.0 - 1.0
    if x_dist == "uniform-unit-variance":
        root3 = np.sqrt(3.0)
        return rng.uniform(-root3, root3, size=(d, n))
    raise ValidationError(f"x_dist must be one of {X_DISTS}, got {x_dist!r}")


def _mixed_sign_scales(k, rng):
    # Alternating signs guarantee a mixed-sign core for every k >= 2.
    lam = rng.uniform(0.5, 1.5, k)
    lam[1::2] *= -1.0
    return lam


def gen_truth(spec):
    """Plant (w*, M*) per the spec's form; factor entries are N(0, 1/d).

    Regenerates from the next sub-seed when sigma_k(M*) is numerically zero,
    and gives up after a few attempts.
    """
    d, k = spec.d, spec.k
    for attempt in range(_REGEN_ATTEMPTS):
        rng = sub_rng(spec.seed, TRUTH_STREAM, attempt)
        scale = 1.0 / np.sqrt(d)
        w_star = rng.normal(0.0, scale, d)
        u_star = rng.normal(0.0, scale, (d, k))
        if spec.m_star_form == "psd-minus-diag":
            v_star = u_star
        else:
            v_star = u_star * _mixed_sign_scales(k, rng)
        core = u_star @ v_star.T
        m_star = core if spec.m_star_form == "general-low-rank" else offdiag(core)
        sv = np.linalg.svd(m_star, compute_uv=False)[:k]
        if sv[-1] >= _SIGMA_MIN:
            return GroundTruth(
                w_star=w_star,
                m_star=m_star,
                singular_values=sv,
                u_star=u_star,
                v_star=v_star,
            )
    raise NumericalError(
        f"failed to plant a model with sigma_{k} >= {_SIGMA_MIN} in {_REGEN_ATTEMPTS} attempts"
    )


def gen_batch(truth, spec, n, rng):
    """Batch of n labeled instances from a planted model."""
    if n < 1:
        raise ValidationError(f"batch size must be >= 1, got {n}")
    x = sample_features(spec.x_dist, truth.d, n, rng)
    y = x.T @ truth.w_star + apply_A(x, truth.m_star)
    if spec.noise_std > 0:
        y = y + spec.noise_std * rng.standard_normal(n)
    if spec.flip_labels:
        y = -y
    return Batch(x, y)


def batch_factory(truth, spec):
    """``make_batch(n, rng)`` callable for FreshBatchSource."""

    def make_batch(n, rng):
        return gen_batch(truth, spec, n, rng)

    return make_batch


def fresh_source(truth, spec, n, seed=None, **kwargs):
    """Fresh-batch data source drawing i.i.d. batches from the planted model."""
    if seed is None:
        seed = spec.seed
    return FreshBatchSource(batch_factory(truth, spec), n=n, seed=seed, **kwargs)


def gen_split(spec, n_train, n_test):
    """(truth, train batch, test batch) from independent substreams.

    Label flipping and noise apply to both splits identically.
    """
    truth = gen_truth(spec)
    train = gen_batch(truth, spec, n_train, sub_rng(spec.seed, TRAIN_STREAM))
    test = gen_batch(truth, spec, n_test, sub_rng(spec.seed, TEST_STREAM))
    return truth, train, test
