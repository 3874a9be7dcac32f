"""Training loops for the three second-order regression variants.

The moment-elimination variants ("gfm" with a free factor pair, "ifm" with
the diagonal of the interaction matrix forced to zero) alternate between a
matrix step and a weight step. Each step turns one batch's residuals into
estimates of the current parameter errors via the elimination maps, applies
them to the factor pair, and re-orthonormalizes the left factor by thin QR:

    y_hat = X^T w + A(M)          with M the variant's effective matrix
    U  <- V_prev - m_err @ U_bar_prev
    U_bar, _ <- qr_thin(U)
    V  <- V_prev (U_bar_prev^T U_bar) - m_err @ U_bar
    w  <- w_prev - w_err

The "fm-baseline" variant instead minimizes the square loss of the classic
parameterization M = offdiag(U U^T) by plain gradient descent in (w, U).

Data sources are duck-typed: anything with ``moment_batch()`` and
``batch(t)`` works. ``batch(0)`` feeds initialization, ``batch(1..steps)``
the updates. Trainers never mutate a state in place; every step returns a
fresh ModelState, so states can be shared freely across threads.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateFactorError, DivergenceError, NumericalError, ValidationError
from .linalg import qr_thin, sin_canonical_angle, spectral_norm, top_k_singvecs
from .moments import TAU_MIN_DEFAULT, estimate_moments, with_coefficients
from .operators import (
    Batch,
    apply_A,
    apply_A_adjoint,
    m_operator,
    m_operator_ifm,
    offdiag,
    w_operator,
    w_operator_ifm,
)
from .rng import INIT_STREAM, MOMENT_STREAM, TRAIN_STREAM, sub_rng

VARIANTS = ("gfm", "ifm", "fm-baseline")
SAMPLING_MODES = ("fresh-batches", "fixed-dataset-cycling")


@dataclass
class TrainConfig:
    """Knobs for one training run.

    ``learning_rate`` and ``init_scale`` only matter for the fm-baseline
    variant; the elimination variants have no step size.
    """

    k: int
    n: int
    steps: int
    variant: str = "gfm"
    sampling_mode: str = "fixed-dataset-cycling"
    tau_min: float = TAU_MIN_DEFAULT
    seed: int = 0
    learning_rate: float = 0.1
    init_scale: float = 1.0
    early_stop: bool = False
    early_stop_tol: float = 1e-8
    early_stop_patience: int = 10

    def validate(self):
        if self.k < 1:
            raise ValidationError(f"rank k must be >= 1, got {self.k}")
        if self.n < 1:
            raise ValidationError(f"batch size n must be >= 1, got {self.n}")
        if self.steps < 0:
            raise ValidationError(f"steps must be >= 0, got {self.steps}")
        if self.variant not in VARIANTS:
            raise ValidationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.sampling_mode not in SAMPLING_MODES:
            raise ValidationError(
                f"sampling_mode must be one of {SAMPLING_MODES}, got {self.sampling_mode!r}"
            )
        if self.tau_min <= 0:
            raise ValidationError(f"tau_min must be positive, got {self.tau_min}")
        if self.variant == "fm-baseline" and self.learning_rate <= 0:
            raise ValidationError(f"learning_rate must be positive, got {self.learning_rate}")


@dataclass
class GroundTruth:
    """Planted parameters, kept for recovery-error traces.

    ``u_star`` / ``v_star`` are the factor pair of the low-rank core the
    interaction matrix was assembled from; they let tests rebuild an exact
    model state for the matching variant.
    """

    w_star: np.ndarray
    m_star: np.ndarray
    singular_values: np.ndarray
    u_star: np.ndarray | None = None
    v_star: np.ndarray | None = None

    def __post_init__(self):
        self.w_star = np.asarray(self.w_star, dtype=float)
        self.m_star = np.asarray(self.m_star, dtype=float)
        self.singular_values = np.asarray(self.singular_values, dtype=float)
        d = self.w_star.size
        if self.m_star.shape != (d, d):
            raise ValidationError(
                f"m_star must be ({d}, {d}) to match w_star, got {self.m_star.shape}"
            )

    @property
    def d(self):
        return self.w_star.size

    @property
    def k(self):
        return self.singular_values.size


@dataclass
class ModelState:
    """Current parameters: first-order weights plus the factor pair.

    For "gfm" and "ifm" ``u_bar`` is column-orthonormal and the effective
    interaction matrix is u_bar v^T (diagonal zeroed for "ifm"). For
    "fm-baseline" the single factor lives in ``u_bar`` without the
    orthonormality invariant and ``v`` is unused.
    """

    w: np.ndarray
    u_bar: np.ndarray
    v: np.ndarray
    variant: str
    iteration: int = 0

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        self.u_bar = np.asarray(self.u_bar, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        d = self.w.size
        if self.u_bar.ndim != 2 or self.u_bar.shape[0] != d:
            raise ValidationError(f"u_bar must be ({d}, k), got {self.u_bar.shape}")
        if self.v.shape != self.u_bar.shape:
            raise ValidationError(
                f"v must match u_bar's shape {self.u_bar.shape}, got {self.v.shape}"
            )
        if self.variant not in VARIANTS:
            raise ValidationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    @property
    def d(self):
        return self.w.size

    @property
    def k(self):
        return self.u_bar.shape[1]

    def effective_m(self):
        """The interaction matrix this state predicts with."""
        if self.variant == "fm-baseline":
            return offdiag(self.u_bar @ self.u_bar.T)
        m = self.u_bar @ self.v.T
        if self.variant == "ifm":
            np.fill_diagonal(m, 0.0)
        return m


@dataclass
class TraceRecord:
    """Per-iteration diagnostics; fields are None when not computable."""

    iteration: int
    test_rmse: float | None = None
    recovery_error: float | None = None
    sin_theta: float | None = None
    wall_time: float = 0.0  # seconds spent producing this state


def predict(state, x):
    """Predictions X^T w + A(M) for features with one instance per column."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] != state.d:
        raise ValidationError(f"features must be ({state.d}, m), got {x.shape}")
    return x.T @ state.w + apply_A(x, state.effective_m())


def recovery_error(state, truth):
    """||w - w*||_2 plus the spectral norm of the interaction-matrix error."""
    if state.d != truth.d:
        raise ValidationError(f"state dimension {state.d} != truth dimension {truth.d}")
    w_err = float(np.linalg.norm(state.w - truth.w_star))
    m_diff = state.effective_m() - truth.m_star
    if not m_diff.any():
        return w_err
    return w_err + spectral_norm(m_diff)


def rmse(state, batch):
    """Root-mean-square prediction error on a batch."""
    r = predict(state, batch.x) - batch.y
    return float(np.sqrt(np.mean(r * r)))


def state_from_truth(truth, variant):
    """Exact model state for a planted truth, when the variant can express it.

    Uses the stored core factors: "gfm" needs m_star == u* v*^T, "ifm" needs
    m_star == offdiag(u* v*^T), "fm-baseline" needs m_star == offdiag(u* u*^T).
    """
    if truth.u_star is None or truth.v_star is None:
        raise ValidationError("ground truth does not carry its core factors")
    core = truth.u_star @ truth.v_star.T
    if variant == "gfm":
        m_eff = core
    elif variant == "ifm":
        m_eff = offdiag(core)
    elif variant == "fm-baseline":
        if not np.allclose(truth.u_star, truth.v_star):
            raise ValidationError("fm-baseline can only express a symmetric factor core")
        m_eff = offdiag(core)
    else:
        raise ValidationError(f"variant must be one of {VARIANTS}, got {variant!r}")
    if not np.allclose(m_eff, truth.m_star, atol=1e-10):
        raise ValidationError(f"variant {variant!r} cannot express this ground truth exactly")
    if variant == "fm-baseline":
        return ModelState(
            w=truth.w_star.copy(),
            u_bar=truth.u_star.copy(),
            v=np.zeros_like(truth.u_star),
            variant=variant,
        )
    q, r = qr_thin(truth.u_star)
    return ModelState(w=truth.w_star.copy(), u_bar=q, v=truth.v_star @ r.T, variant=variant)


# --- data sources --------------------------------------------------------------


class FixedDatasetSource:
    """Serves one fixed dataset: the whole set when ``batch_size`` covers it,
    otherwise shuffled mini-batch cycling (a fresh permutation per epoch)."""

    def __init__(self, data, batch_size=None, seed=0, shuffle=True):
        if not isinstance(data, Batch):
            data = Batch(*data)
        self._data = data
        self._batch_size = batch_size
        self._seed = seed
        self._shuffle = shuffle
        self._epoch = None
        self._perm = None

    def moment_batch(self):
        return self._data

    def batch(self, t):
        b = self._batch_size
        n_total = self._data.n
        if b is None or b >= n_total:
            return self._data
        per_epoch = n_total // b
        epoch, slot = divmod(int(t), per_epoch)
        if self._perm is None or epoch != self._epoch:
            if self._shuffle:
                self._perm = sub_rng(self._seed, TRAIN_STREAM, epoch).permutation(n_total)
            else:
                self._perm = np.arange(n_total)
            self._epoch = epoch
        idx = self._perm[slot * b : (slot + 1) * b]
        return Batch(self._data.x[:, idx], self._data.y[idx])


class FreshBatchSource:
    """Draws an independent batch per request from ``make_batch(n, rng)``.

    Moments come from a dedicated batch by default; pass
    ``reuse_first_for_moments=True`` to estimate them from ``batch(0)``
    instead.
    """

    def __init__(self, make_batch, n, seed=0, moment_n=None, reuse_first_for_moments=False):
        self._make_batch = make_batch
        self._n = n
        self._seed = seed
        self._moment_n = moment_n if moment_n is not None else n
        self._reuse = reuse_first_for_moments

    def moment_batch(self):
        if self._reuse:
            return self.batch(0)
        return self._make_batch(self._moment_n, sub_rng(self._seed, MOMENT_STREAM))

    def batch(self, t):
        return self._make_batch(self._n, sub_rng(self._seed, TRAIN_STREAM, int(t)))


def source_for(config, data, test=None):
    """Data source implied by a config's sampling mode.

    ``data`` is a Batch for fixed-dataset cycling or a ``make_batch(n, rng)``
    callable for fresh batches.
    """
    if config.sampling_mode == "fixed-dataset-cycling":
        if not isinstance(data, Batch):
            raise ValidationError("fixed-dataset-cycling needs a Batch to cycle over")
        return FixedDatasetSource(data, batch_size=config.n, seed=config.seed)
    if not callable(data):
        raise ValidationError("fresh-batches needs a make_batch(n, rng) callable")
    return FreshBatchSource(data, n=config.n, seed=config.seed)


# --- moment-elimination training -------------------------------------------------


def init_state(first_batch, profile, config):
    """Spectral initialization: w = 0, V = 0, U_bar from the top-k subspace
    of the elimination map applied to the zero-model residual (-y).

    The zero model's residual is -y; the elimination map of a residual
    estimates the matrix error, here 0 - M*, and a sign flip does not move
    the singular subspace.
    """
    config.validate()
    if config.variant == "fm-baseline":
        raise ValidationError("fm-baseline has its own initializer inside train_fm_baseline")
    d = first_batch.d
    if config.k > d:
        raise ValidationError(f"rank k = {config.k} exceeds dimension d = {d}")
    r0 = -first_batch.y
    if config.variant == "ifm":
        m0 = m_operator_ifm(first_batch, r0)
    else:
        if profile is None:
            raise ValidationError("gfm initialization needs a moment profile")
        m0 = m_operator(first_batch, r0, profile)
    u_bar = top_k_singvecs(m0, config.k)
    return ModelState(
        w=np.zeros(d),
        u_bar=u_bar,
        v=np.zeros((d, config.k)),
        variant=config.variant,
        iteration=0,
    )


def train_step(state, batch, profile, config):
    """One alternating update; returns the next state."""
    if state.variant == "fm-baseline":
        raise ValidationError("fm-baseline is trained by train_fm_baseline, not train_step")
    if batch.d != state.d:
        raise ValidationError(f"batch dimension {batch.d} != state dimension {state.d}")
    r = predict(state, batch.x) - batch.y
    if state.variant == "ifm":
        m_err = m_operator_ifm(batch, r)
        w_err = w_operator_ifm(batch, r)
    else:
        if profile is None:
            raise ValidationError("gfm steps need a moment profile")
        m_err = m_operator(batch, r, profile)
        w_err = w_operator(batch, r, profile)
    u_next = state.v - m_err @ state.u_bar
    try:
        u_bar_next, _ = qr_thin(u_next)
    except DegenerateFactorError as exc:
        raise DegenerateFactorError(f"at iteration {state.iteration + 1}: {exc}") from exc
    v_next = state.v @ (state.u_bar.T @ u_bar_next) - m_err @ u_bar_next
    w_next = state.w - w_err
    return ModelState(
        w=w_next,
        u_bar=u_bar_next,
        v=v_next,
        variant=state.variant,
        iteration=state.iteration + 1,
    )


def _reference_subspace(truth):
    return top_k_singvecs(truth.m_star, truth.k)


def _trace(state, test_batch, truth, u_ref, wall):
    rec = TraceRecord(iteration=state.iteration, wall_time=wall)
    if test_batch is not None:
        rec.test_rmse = rmse(state, test_batch)
    if truth is not None:
        rec.recovery_error = recovery_error(state, truth)
        if u_ref is not None and state.variant != "fm-baseline":
            rec.sin_theta = sin_canonical_angle(state.u_bar, u_ref)
    for name in ("test_rmse", "recovery_error"):
        value = getattr(rec, name)
        if value is not None and not np.isfinite(value):
            raise NumericalError(f"{name} became non-finite at iteration {state.iteration}")
    return rec


def _should_stop(config, records):
    if not config.early_stop:
        return False
    window = [r.test_rmse for r in records[-(config.early_stop_patience + 1) :]]
    if len(window) < config.early_stop_patience + 1 or any(v is None for v in window):
        return False
    return min(window[1:]) > window[0] - config.early_stop_tol


def train(data_source, config, ground_truth=None, test_batch=None, profile=None):
    """Run initialization plus ``config.steps`` updates; returns (state, trace).

    The trace holds one record per iteration including iteration 0, with
    test RMSE when ``test_batch`` is given and recovery diagnostics when
    ``ground_truth`` is given. For "gfm" a moment profile is estimated from
    ``data_source.moment_batch()`` unless one is passed in; "ifm" never
    touches moment information.
    """
    config.validate()
    if config.variant == "fm-baseline":
        return train_fm_baseline(data_source, config, ground_truth, test_batch)
    start = time.perf_counter()
    if config.variant == "ifm":
        profile = None
    elif profile is None:
        profile = with_coefficients(estimate_moments(data_source.moment_batch().x), config.tau_min)
    state = init_state(data_source.batch(0), profile, config)
    u_ref = _reference_subspace(ground_truth) if ground_truth is not None else None
    records = [_trace(state, test_batch, ground_truth, u_ref, time.perf_counter() - start)]
    for t in range(1, config.steps + 1):
        tick = time.perf_counter()
        state = train_step(state, data_source.batch(t), profile, config)
        records.append(_trace(state, test_batch, ground_truth, u_ref, time.perf_counter() - tick))
        if _should_stop(config, records):
            break
    return state, records


# --- conventional gradient-descent baseline ---------------------------------------


def fm_baseline_loss(state, batch):
    """Square loss (1/2n) ||X^T w + A(offdiag(U U^T)) - y||^2."""
    r = predict(state, batch.x) - batch.y
    return float(r @ r / (2.0 * batch.n))


def fm_baseline_gradients(state, batch):
    """Analytic gradients of the square loss in (w, U).

    The chain rule through M = U U^T - diag(U U^T) zeroes the diagonal of
    the backprojected residual before it multiplies U.
    """
    r = predict(state, batch.x) - batch.y
    n = batch.n
    grad_w = batch.x @ r / n
    back = apply_A_adjoint(batch.x, r)
    np.fill_diagonal(back, 0.0)
    grad_u = (2.0 / n) * back @ state.u_bar
    return grad_w, grad_u


def train_fm_baseline(data_source, config, ground_truth=None, test_batch=None):
    """Gradient descent on the classic parameterization; returns (state, trace).

    The step size halves whenever the per-batch loss increases; ten
    consecutive increases raise DivergenceError.
    """
    config.validate()
    if config.variant != "fm-baseline":
        raise ValidationError(f"config.variant must be 'fm-baseline', got {config.variant!r}")
    start = time.perf_counter()
    first = data_source.batch(0)
    d = first.d
    rng = sub_rng(config.seed, INIT_STREAM)
    u = rng.normal(0.0, config.init_scale / np.sqrt(d * config.k), (d, config.k))
    state = ModelState(
        w=np.zeros(d), u_bar=u, v=np.zeros((d, config.k)), variant="fm-baseline", iteration=0
    )
    u_ref = _reference_subspace(ground_truth) if ground_truth is not None else None
    records = [_trace(state, test_batch, ground_truth, u_ref, time.perf_counter() - start)]
    lr = config.learning_rate
    prev_loss = np.inf
    rising = 0
    for t in range(1, config.steps + 1):
        tick = time.perf_counter()
        batch = data_source.batch(t)
        with np.errstate(over="ignore", invalid="ignore"):
            loss = fm_baseline_loss(state, batch)
        if not np.isfinite(loss):
            raise DivergenceError(
                f"loss overflowed at iteration {t}; "
                f"use a smaller learning_rate than {config.learning_rate}"
            )
        if loss > prev_loss:
            rising += 1
            lr /= 2.0
            if rising >= 10:
                raise DivergenceError(
                    f"loss increased {rising} consecutive steps (now {loss:.3e}); "
                    f"use a smaller learning_rate than {config.learning_rate}"
                )
        else:
            rising = 0
        prev_loss = loss
        grad_w, grad_u = fm_baseline_gradients(state, batch)
        state = ModelState(
            w=state.w - lr * grad_w,
            u_bar=state.u_bar - lr * grad_u,
            v=state.v,
            variant="fm-baseline",
            iteration=t,
        )
        records.append(_trace(state, test_batch, ground_truth, u_ref, time.perf_counter() - tick))
        if _should_stop(config, records):
            break
    return state, records
