"""Tests for the training loops, data sources, and model-state plumbing.

Oracles: a per-sample prediction loop, independently computed norms for the
recovery error, and central finite differences for the baseline gradients.
"""

import numpy as np
import pytest

import mfm.solver as solver_mod
from mfm.errors import DegenerateFactorError, DivergenceError, ValidationError
from mfm.linalg import sin_canonical_angle, top_k_singvecs
from mfm.moments import analytic_profile
from mfm.operators import Batch, apply_A, offdiag
from mfm.rng import sub_rng
from mfm.solver import (
    FixedDatasetSource,
    FreshBatchSource,
    ModelState,
    TrainConfig,
    fm_baseline_gradients,
    fm_baseline_loss,
    init_state,
    predict,
    recovery_error,
    rmse,
    state_from_truth,
    train,
    train_fm_baseline,
    train_step,
)
from mfm.synth import SynthSpec, batch_factory, fresh_source, gen_batch, gen_split, gen_truth

GAUSS = analytic_profile("gaussian", 1)  # placeholder; real profiles built per-d below


def gaussian_profile(d):
    return analytic_profile("gaussian", d)


def predict_loop(state, x):
    """Per-sample oracle for predictions."""
    m = state.effective_m()
    out = np.zeros(x.shape[1])
    for i in range(x.shape[1]):
        xi = x[:, i]
        out[i] = xi @ state.w + xi @ m @ xi
    return out


# --- predict / recovery_error ----------------------------------------------------


def test_predict_zero_state():
    state = ModelState(np.zeros(4), np.eye(4)[:, :2], np.zeros((4, 2)), "gfm")
    x = np.random.default_rng(0).standard_normal((4, 7))
    np.testing.assert_array_equal(predict(state, x), np.zeros(7))


def test_predict_matches_per_sample_loop():
    rng = np.random.default_rng(1)
    q, _ = np.linalg.qr(rng.standard_normal((5, 2)))
    state = ModelState(rng.standard_normal(5), q, rng.standard_normal((5, 2)), "ifm")
    x = rng.standard_normal((5, 9))
    np.testing.assert_allclose(predict(state, x), predict_loop(state, x), atol=1e-12)


def test_truth_state_reproduces_noiseless_labels():
    spec = SynthSpec(d=10, k=3, m_star_form="general-low-rank", seed=2)
    truth = gen_truth(spec)
    batch = gen_batch(truth, spec, 60, sub_rng(2, 9))
    state = state_from_truth(truth, "gfm")
    np.testing.assert_allclose(predict(state, batch.x), batch.y, atol=1e-10)


def test_recovery_error_zero_at_truth():
    truth = gen_truth(SynthSpec(d=8, k=2, seed=3))
    state = state_from_truth(truth, "ifm")
    assert recovery_error(state, truth) <= 1e-10


def test_recovery_error_unit_weight_offset():
    truth = gen_truth(SynthSpec(d=8, k=2, seed=4))
    state = state_from_truth(truth, "ifm")
    state.w = state.w + np.eye(8)[:, 0]
    assert recovery_error(state, truth) == pytest.approx(1.0, abs=1e-10)


def test_recovery_error_matches_norm_oracle():
    truth = gen_truth(SynthSpec(d=8, k=2, seed=5))
    state = state_from_truth(truth, "ifm")
    rng = np.random.default_rng(5)
    state.w = state.w + 0.3 * rng.standard_normal(8)
    state.v = state.v + 0.1 * rng.standard_normal(state.v.shape)
    expect = np.linalg.norm(state.w - truth.w_star) + np.linalg.norm(
        state.effective_m() - truth.m_star, 2
    )
    assert recovery_error(state, truth) == pytest.approx(expect, abs=1e-10)


# --- initialization ---------------------------------------------------------------


def test_init_zero_labels_degenerate():
    rng = np.random.default_rng(6)
    batch = Batch(rng.standard_normal((6, 40)), np.zeros(40))
    cfg = TrainConfig(k=2, n=40, steps=1, variant="ifm")
    with pytest.raises(DegenerateFactorError):
        init_state(batch, None, cfg)


def test_init_subspace_quality_at_scale():
    spec = SynthSpec(d=100, k=5, seed=11)
    truth = gen_truth(spec)
    batch = gen_batch(truth, spec, 15000, sub_rng(11, 9))
    cfg = TrainConfig(k=5, n=15000, steps=1, variant="ifm")
    state = init_state(batch, None, cfg)
    u_ref = top_k_singvecs(truth.m_star, 5)
    assert sin_canonical_angle(state.u_bar, u_ref) <= 0.5


def test_init_ifm_needs_no_profile_on_sign_features():
    spec = SynthSpec(d=20, k=3, x_dist="rademacher", seed=12)
    truth = gen_truth(spec)
    batch = gen_batch(truth, spec, 4000, sub_rng(12, 9))
    cfg = TrainConfig(k=3, n=4000, steps=1, variant="ifm")
    state = init_state(batch, None, cfg)
    assert state.u_bar.shape == (20, 3)


def test_init_gfm_requires_profile():
    spec = SynthSpec(d=10, k=2, seed=13)
    truth = gen_truth(spec)
    batch = gen_batch(truth, spec, 500, sub_rng(13, 9))
    cfg = TrainConfig(k=2, n=500, steps=1, variant="gfm")
    with pytest.raises(ValidationError, match="profile"):
        init_state(batch, None, cfg)


# --- train_step -------------------------------------------------------------------


@pytest.mark.parametrize("variant,form", [("gfm", "general-low-rank"), ("ifm", "psd-minus-diag")])
def test_zero_residual_fixed_point(variant, form):
    spec = SynthSpec(d=12, k=3, m_star_form=form, seed=14)
    truth = gen_truth(spec)
    batch = gen_batch(truth, spec, 300, sub_rng(14, 9))
    state = state_from_truth(truth, variant)
    cfg = TrainConfig(k=3, n=300, steps=1, variant=variant)
    nxt = train_step(state, batch, gaussian_profile(12), cfg)
    # Residual is zero, so the observable model cannot move. The factor pair
    # itself may re-sign under QR when the matrix has negative eigenvalues.
    np.testing.assert_allclose(nxt.w, state.w, atol=1e-12)
    np.testing.assert_allclose(nxt.effective_m(), state.effective_m(), atol=1e-12)
    np.testing.assert_allclose(
        predict(nxt, batch.x), predict(state, batch.x), atol=1e-11
    )


def test_fm_baseline_fixed_point_is_literal():
    spec = SynthSpec(d=10, k=2, m_star_form="psd-minus-diag", seed=15)
    truth = gen_truth(spec)
    batch = gen_batch(truth, spec, 400, sub_rng(15, 9))
    state = state_from_truth(truth, "fm-baseline")
    grad_w, grad_u = fm_baseline_gradients(state, batch)
    assert np.abs(grad_w).max() <= 1e-12
    assert np.abs(grad_u).max() <= 1e-12


def test_step_keeps_orthonormal_factor_and_representation():
    spec = SynthSpec(d=30, k=3, seed=16)
    truth = gen_truth(spec)
    cfg = TrainConfig(k=3, n=3000, steps=6, variant="ifm", sampling_mode="fresh-batches", seed=16)
    src = fresh_source(truth, spec, n=3000)
    profile = None
    state = init_state(src.batch(0), profile, cfg)
    for t in range(1, 7):
        state = train_step(state, src.batch(t), profile, cfg)
        assert np.linalg.norm(state.u_bar.T @ state.u_bar - np.eye(3)) <= 1e-8
        manual = offdiag(state.u_bar @ state.v.T)
        np.testing.assert_array_equal(state.effective_m(), manual)


@pytest.mark.slow
def test_contraction_first_iterations_majority_of_seeds():
    """Recovery error strictly decreases over the first 10 steps for >= 9/10 seeds."""
    good = 0
    for seed in range(10):
        spec = SynthSpec(d=100, k=5, seed=200 + seed)
        truth = gen_truth(spec)
        cfg = TrainConfig(
            k=5, n=15000, steps=10, variant="ifm", sampling_mode="fresh-batches", seed=200 + seed
        )
        _, recs = train(fresh_source(truth, spec, n=15000), cfg, ground_truth=truth)
        eps = [r.recovery_error for r in recs]
        if all(eps[t + 1] < eps[t] for t in range(10)):
            good += 1
    assert good >= 9


def test_single_step_beats_predict_zero_baseline():
    spec = SynthSpec(d=100, k=5, seed=17)
    truth, train_b, test_b = gen_split(spec, 15000, 2000)
    cfg = TrainConfig(k=5, n=15000, steps=1, variant="ifm", seed=17)
    _, recs = train(FixedDatasetSource(train_b, seed=17), cfg, test_batch=test_b)
    assert recs[-1].test_rmse < np.std(test_b.y)


# --- train loop -------------------------------------------------------------------


def test_train_zero_steps_single_record():
    spec = SynthSpec(d=10, k=2, seed=18)
    truth, train_b, test_b = gen_split(spec, 500, 100)
    cfg = TrainConfig(k=2, n=500, steps=0, variant="ifm", seed=18)
    state, recs = train(FixedDatasetSource(train_b), cfg, ground_truth=truth, test_batch=test_b)
    assert len(recs) == 1
    assert recs[0].iteration == 0
    assert state.iteration == 0
    assert recs[0].test_rmse is not None and recs[0].recovery_error is not None


def test_trace_fields_without_truth():
    spec = SynthSpec(d=10, k=2, seed=19)
    _, train_b, _ = gen_split(spec, 500, 100)
    cfg = TrainConfig(k=2, n=500, steps=2, variant="ifm", seed=19)
    _, recs = train(FixedDatasetSource(train_b), cfg)
    assert all(r.test_rmse is None and r.recovery_error is None for r in recs)
    assert [r.iteration for r in recs] == [0, 1, 2]


def test_ifm_training_never_touches_moment_estimation(monkeypatch):
    def boom(*args, **kwargs):
        raise AssertionError("moment estimation invoked on the diagonal-free path")

    monkeypatch.setattr(solver_mod, "estimate_moments", boom)
    spec = SynthSpec(d=10, k=2, seed=20)
    truth, train_b, _ = gen_split(spec, 800, 100)
    cfg = TrainConfig(k=2, n=800, steps=3, variant="ifm", seed=20)
    state, _ = train(FixedDatasetSource(train_b), cfg, ground_truth=truth)
    assert state.iteration == 3


def test_ifm_operator_signatures_take_no_profile():
    import inspect

    from mfm.operators import m_operator_ifm, w_operator_ifm

    assert list(inspect.signature(m_operator_ifm).parameters) == ["batch", "residual"]
    assert list(inspect.signature(w_operator_ifm).parameters) == ["batch", "residual"]


def test_gfm_on_sign_features_raises_singular_moment_system():
    from mfm.errors import SingularMomentSystemError

    spec = SynthSpec(d=10, k=2, x_dist="rademacher", seed=21)
    truth, train_b, _ = gen_split(spec, 2000, 100)
    cfg = TrainConfig(k=2, n=2000, steps=2, variant="gfm", seed=21)
    with pytest.raises(SingularMomentSystemError):
        train(FixedDatasetSource(train_b), cfg)


def test_gfm_converges_with_estimated_moments():
    spec = SynthSpec(d=30, k=3, m_star_form="general-low-rank", seed=22)
    truth, train_b, test_b = gen_split(spec, 8000, 1000)
    cfg = TrainConfig(k=3, n=8000, steps=15, variant="gfm", seed=22)
    state, recs = train(FixedDatasetSource(train_b), cfg, ground_truth=truth, test_batch=test_b)
    assert recs[-1].test_rmse <= 0.02 * np.std(test_b.y)
    assert recs[-1].recovery_error < 0.1 * recs[0].recovery_error


def test_early_stop_cuts_trace_short():
    spec = SynthSpec(d=20, k=2, seed=23)
    truth, train_b, test_b = gen_split(spec, 4000, 500)
    cfg = TrainConfig(k=2, n=4000, steps=200, variant="ifm", seed=23, early_stop=True)
    _, recs = train(FixedDatasetSource(train_b), cfg, test_batch=test_b)
    assert len(recs) < 201


# --- fm-baseline ------------------------------------------------------------------


def finite_difference_gradients(state, batch, step=1e-5):
    """Central-difference oracle for the baseline loss gradients."""
    grad_w = np.zeros_like(state.w)
    for i in range(state.d):
        for sign in (1.0, -1.0):
            bumped = ModelState(
                state.w + sign * step * np.eye(state.d)[:, i],
                state.u_bar.copy(),
                state.v.copy(),
                "fm-baseline",
            )
            grad_w[i] += sign * fm_baseline_loss(bumped, batch) / (2 * step)
    grad_u = np.zeros_like(state.u_bar)
    for i in range(state.d):
        for j in range(state.k):
            for sign in (1.0, -1.0):
                u = state.u_bar.copy()
                u[i, j] += sign * step
                bumped = ModelState(state.w.copy(), u, state.v.copy(), "fm-baseline")
                grad_u[i, j] += sign * fm_baseline_loss(bumped, batch) / (2 * step)
    return grad_w, grad_u


def test_fm_baseline_gradients_match_finite_differences():
    rng = np.random.default_rng(24)
    d, k, n = 6, 2, 50
    batch = Batch(rng.standard_normal((d, n)), rng.standard_normal(n))
    state = ModelState(
        rng.standard_normal(d), rng.standard_normal((d, k)), np.zeros((d, k)), "fm-baseline"
    )
    gw, gu = fm_baseline_gradients(state, batch)
    fw, fu = finite_difference_gradients(state, batch)
    assert np.abs(gw - fw).max() <= 1e-5 * max(1.0, np.abs(fw).max())
    assert np.abs(gu - fu).max() <= 1e-5 * max(1.0, np.abs(fu).max())


def test_fm_baseline_fits_its_own_generative_class():
    spec = SynthSpec(d=30, k=3, seed=25)
    truth, train_b, test_b = gen_split(spec, 5000, 500)
    cfg = TrainConfig(k=3, n=5000, steps=150, variant="fm-baseline", seed=25)
    _, recs = train(FixedDatasetSource(train_b), cfg, test_batch=test_b)
    assert recs[-1].test_rmse <= 0.1 * np.std(test_b.y)


def test_fm_baseline_divergence_error():
    spec = SynthSpec(d=10, k=2, seed=26)
    _, train_b, _ = gen_split(spec, 500, 100)
    cfg = TrainConfig(k=2, n=500, steps=100, variant="fm-baseline", seed=26, learning_rate=1e4)
    with pytest.raises(DivergenceError, match="learning_rate"):
        train_fm_baseline(FixedDatasetSource(train_b), cfg)


# --- data sources -----------------------------------------------------------------


def test_fixed_source_full_batch_when_covering():
    spec = SynthSpec(d=5, k=1, seed=27)
    _, data, _ = gen_split(spec, 100, 10)
    src = FixedDatasetSource(data, batch_size=100)
    assert src.batch(0) is data and src.batch(7) is data


def test_fixed_source_cycles_shuffled_epochs():
    spec = SynthSpec(d=5, k=1, seed=28)
    _, data, _ = gen_split(spec, 90, 10)
    src = FixedDatasetSource(data, batch_size=30, seed=28)
    epoch0 = [src.batch(t) for t in range(3)]
    seen = np.concatenate([b.y for b in epoch0])
    np.testing.assert_allclose(np.sort(seen), np.sort(data.y))  # epoch covers the dataset
    epoch1 = [src.batch(t) for t in range(3, 6)]
    assert not np.array_equal(epoch0[0].y, epoch1[0].y)  # reshuffled next epoch
    again = FixedDatasetSource(data, batch_size=30, seed=28)
    np.testing.assert_array_equal(again.batch(0).y, epoch0[0].y)  # deterministic per seed


def test_fresh_source_dedicated_moment_batch():
    spec = SynthSpec(d=6, k=2, seed=29)
    truth = gen_truth(spec)
    src = FreshBatchSource(batch_factory(truth, spec), n=50, seed=29)
    assert not np.array_equal(src.moment_batch().x, src.batch(0).x)
    reuse = FreshBatchSource(batch_factory(truth, spec), n=50, seed=29, reuse_first_for_moments=True)
    np.testing.assert_array_equal(reuse.moment_batch().x, reuse.batch(0).x)
    np.testing.assert_array_equal(src.batch(3).x, src.batch(3).x)  # reproducible per index


def test_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(k=0, n=10, steps=1).validate()
    with pytest.raises(ValidationError):
        TrainConfig(k=1, n=10, steps=1, variant="nope").validate()
    with pytest.raises(ValidationError):
        TrainConfig(k=1, n=10, steps=1, sampling_mode="sometimes").validate()
    with pytest.raises(ValidationError):
        TrainConfig(k=1, n=10, steps=1, variant="fm-baseline", learning_rate=0.0).validate()
    with pytest.raises(ValidationError):
        TrainConfig(k=1, n=10, steps=-1).validate()
