"""Monte-Carlo verification harness.

Each check turns a distributional property of the measurement operators into
a pass/fail experiment at desk scale: concentration errors measured against
closed-form expectations, 1/sqrt(n) decay verified by quadrupling the sample
size and checking the error ratio against a band centered on 2, and exact
algebraic degeneracies checked to near machine precision. Trials draw from
independent substreams and may run concurrently (capped by MFM_THREADS);
aggregation is a plain mean, so the order never matters.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import ValidationError
from .linalg import spectral_norm
from .moments import ANALYTIC_MOMENTS, analytic_profile, estimate_moments, with_coefficients
from .operators import (
    Batch,
    apply_A,
    apply_A_adjoint,
    m_operator,
    m_operator_ifm,
    p0,
    p1,
    p2,
    w_operator,
    w_operator_ifm,
)
from .rng import TRIAL_STREAM, sub_rng
from .synth import sample_features

DEFAULT_CONFIG_RESOURCE = "diagnostics_config.json"


def load_config(path=None):
    """Committed default diagnostics settings, or the JSON file at ``path``."""
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    text = resources.files("mfm").joinpath(DEFAULT_CONFIG_RESOURCE).read_text(encoding="utf-8")
    return json.loads(text)


def thread_count():
    """Worker cap from MFM_THREADS (default 1 = serial)."""
    raw = os.environ.get("MFM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _map_trials(fn, trials):
    workers = thread_count()
    if workers == 1:
        return [fn(t) for t in range(trials)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(trials)))


@dataclass
class DecayReport:
    """Mean errors per sample size plus the n-versus-4n decay ratio."""

    sample_sizes: list[int]
    mean_errors: list[float]
    ratio_n_vs_4n: float
    trials: int
    confidence_eta: float = 0.01

    def __post_init__(self):
        sizes = list(self.sample_sizes)
        if sizes != sorted(sizes) or len(set(sizes)) != len(sizes):
            raise ValidationError(f"sample sizes must be strictly increasing, got {sizes}")
        if any(e < 0 for e in self.mean_errors):
            raise ValidationError("mean errors must be nonnegative")

    def to_dict(self):
        return {
            "sample_sizes": [int(n) for n in self.sample_sizes],
            "mean_errors": [float(e) for e in self.mean_errors],
            "ratio_n_vs_4n": float(self.ratio_n_vs_4n),
            "trials": int(self.trials),
            "confidence_eta": float(self.confidence_eta),
        }


def _decay_ratio(sizes, means):
    for i, n in enumerate(sizes):
        if 4 * n in sizes:
            j = sizes.index(4 * n)
            if means[j] > 0:
                return float(means[i] / means[j])
    return float("nan")


def _report(sizes, per_n_errors, trials, eta):
    means = [float(np.mean(errs)) for errs in per_n_errors]
    return DecayReport(
        sample_sizes=list(sizes),
        mean_errors=means,
        ratio_n_vs_4n=_decay_ratio(list(sizes), means),
        trials=trials,
        confidence_eta=eta,
    )


def second_moment_expectation(m, phi):
    """Closed-form mean of the backprojected measurements of a fixed symmetric m:
    2m + tr(m) I + diag((phi - 3) o diag(m))."""
    m = np.asarray(m, dtype=float)
    d = m.shape[0]
    out = 2.0 * m + np.trace(m) * np.eye(d)
    idx = np.arange(d)
    out[idx, idx] += (np.asarray(phi) - 3.0) * np.diagonal(m)
    return out


def rip_check(m, x_dist, n_list, trials, seed=0, eta=0.01):
    """Spectral deviation of A'(A(m))/n from its closed-form mean, per n.

    ``m`` stays fixed across trials and must be symmetric for the
    closed-form mean to apply.
    """
    m = np.asarray(m, dtype=float)
    if not np.allclose(m, m.T):
        raise ValidationError("rip_check needs a symmetric matrix")
    d = m.shape[0]
    kappa, phi = ANALYTIC_MOMENTS[x_dist]
    expect = second_moment_expectation(m, np.full(d, phi))
    sizes = sorted(int(n) for n in n_list)

    per_n = []
    for ni, n in enumerate(sizes):
        def one(t, n=n, ni=ni):
            rng = sub_rng(seed, TRIAL_STREAM, ni, t)
            x = sample_features(x_dist, d, n, rng)
            emp = apply_A_adjoint(x, apply_A(x, m)) / n
            return spectral_norm(emp - expect)

        per_n.append(_map_trials(one, trials))
    return _report(sizes, per_n, trials, eta)


def p_expectations(truth, x_dist):
    """Closed-form means of (p0, p1, p2) of the labels of a planted model."""
    kappa, phi = ANALYTIC_MOMENTS[x_dist]
    diag_m = np.diagonal(truth.m_star)
    e0 = float(np.trace(truth.m_star))
    e1 = diag_m * kappa + truth.w_star
    e2 = diag_m * (phi - 1.0) + kappa * truth.w_star
    return e0, e1, e2


def p_concentration_check(truth, x_dist, n_list, trials, seed=0, eta=0.01):
    """Decay reports for the deviations of p0/p1/p2 from their means."""
    d = truth.d
    e0, e1, e2 = p_expectations(truth, x_dist)
    sizes = sorted(int(n) for n in n_list)
    per_n = {"p0": [], "p1": [], "p2": []}
    for ni, n in enumerate(sizes):
        def one(t, n=n, ni=ni):
            rng = sub_rng(seed, TRIAL_STREAM, ni, t)
            x = sample_features(x_dist, d, n, rng)
            y = x.T @ truth.w_star + apply_A(x, truth.m_star)
            return (
                abs(p0(y) - e0),
                float(np.linalg.norm(p1(x, y) - e1)),
                float(np.linalg.norm(p2(x, y) - e2)),
            )

        rows = _map_trials(one, trials)
        for j, op in enumerate(("p0", "p1", "p2")):
            per_n[op].append([row[j] for row in rows])
    return {op: _report(sizes, errs, trials, eta) for op, errs in per_n.items()}


def moment_decay_check(x_dist, d, n_list, trials, seed=0, eta=0.01):
    """Decay reports for worst-coordinate moment and coefficient-table errors.

    Keys: "kappa", "phi" always; "g", "h" when the distribution passes the
    invertibility gate (they compare estimated tables to the analytic ones).
    """
    reference = analytic_profile(x_dist, d)
    with_tables = reference.has_coefficients()
    sizes = sorted(int(n) for n in n_list)
    keys = ["kappa", "phi"] + (["g", "h"] if with_tables else [])
    per_n = {key: [] for key in keys}
    for ni, n in enumerate(sizes):
        def one(t, n=n, ni=ni):
            rng = sub_rng(seed, TRIAL_STREAM, ni, t)
            profile = estimate_moments(sample_features(x_dist, d, n, rng))
            out = {
                "kappa": float(np.abs(profile.kappa - reference.kappa).max()),
                "phi": float(np.abs(profile.phi - reference.phi).max()),
            }
            if with_tables:
                est = with_coefficients(profile)
                out["g"] = float(np.abs(est.g - reference.g).max())
                out["h"] = float(np.abs(est.h - reference.h).max())
            return out

        rows = _map_trials(one, trials)
        for key in keys:
            per_n[key].append([row[key] for row in rows])
    return {key: _report(sizes, errs, trials, eta) for key, errs in per_n.items()}


def elimination_check(
    truth, delta_w, delta_m, x_dist, n, trials, seed=0, corrected=True, variant="gfm"
):
    """Errors of the Monte-Carlo means of the elimination maps.

    Perturbs the planted model by (delta_w, delta_m), averages the map
    outputs over fresh batches, and returns (spectral error of the matrix
    mean vs delta_m, l2 error of the weight mean vs delta_w). The "ifm"
    variant uses the diagonal-free maps and needs no moment information.
    """
    delta_w = np.asarray(delta_w, dtype=float)
    delta_m = np.asarray(delta_m, dtype=float)
    d = truth.d
    if delta_w.shape != (d,) or delta_m.shape != (d, d):
        raise ValidationError("perturbation shapes must match the planted model")
    if variant not in ("gfm", "ifm"):
        raise ValidationError(f"variant must be 'gfm' or 'ifm', got {variant!r}")
    profile = None
    if variant == "gfm":
        profile = analytic_profile(x_dist, d)
        if not profile.has_coefficients():
            # Surfaces the singular 2x2 systems (zero invertibility margin).
            with_coefficients(profile)
    w_model = truth.w_star + delta_w
    m_model = truth.m_star + delta_m

    def one(t):
        rng = sub_rng(seed, TRIAL_STREAM, t)
        x = sample_features(x_dist, d, n, rng)
        y = x.T @ truth.w_star + apply_A(x, truth.m_star)
        batch = Batch(x, y)
        r = x.T @ w_model + apply_A(x, m_model) - y
        if variant == "ifm":
            return m_operator_ifm(batch, r), w_operator_ifm(batch, r)
        return m_operator(batch, r, profile, corrected=corrected), w_operator(batch, r, profile)

    outs = _map_trials(one, trials)
    m_mean = np.mean([o[0] for o in outs], axis=0)
    w_mean = np.mean([o[1] for o in outs], axis=0)
    m_err = spectral_norm(m_mean - delta_m) if (m_mean - delta_m).any() else 0.0
    w_err = float(np.linalg.norm(w_mean - delta_w))
    return m_err, w_err


def bernoulli_degeneracy_check(d, n, trials, seed=0, tol=1e-12):
    """True when sign features are exactly blind to traceless diagonal shifts.

    Per trial: random +-1 features, random matrix, random traceless diagonal;
    checks max |A(m + diag) - A(m)| <= tol.
    """

    def one(t):
        rng = sub_rng(seed, TRIAL_STREAM, t)
        x = sample_features("rademacher", d, n, rng)
        m = rng.standard_normal((d, d))
        dvec = rng.standard_normal(d)
        dvec -= dvec.mean()
        diff = apply_A(x, m + np.diag(dvec)) - apply_A(x, m)
        return float(np.abs(diff).max())

    return all(dev <= tol for dev in _map_trials(one, trials))


def convergence_fit(trace, hard_floor_ratio=1e-9, plateau_factor=3.0):
    """Fitted per-iteration contraction of the recovery-error trace.

    Least-squares line through log(error) versus iteration over the
    pre-floor prefix: records below ``hard_floor_ratio`` times the initial
    error are dropped, and so is the terminal plateau (records within
    ``plateau_factor`` of the best error reached, when the trace flattened
    out there). Returns (rate, r_squared); a flat trace comes back as
    (1.0, nan), i.e. non-contracting.
    """
    points = [
        (rec.iteration, rec.recovery_error)
        for rec in trace
        if rec.recovery_error is not None and rec.recovery_error > 0
    ]
    if not points:
        raise ValidationError("trace carries no positive recovery errors")
    eps0 = points[0][1]
    usable = [(t, e) for t, e in points if e > hard_floor_ratio * eps0]
    if len(usable) < 5:
        raise ValidationError(f"need >= 5 usable trace records, got {len(usable)}")
    floor = plateau_factor * min(e for _, e in usable)
    prefix = [(t, e) for t, e in usable if e > floor]
    if len(prefix) < 5:
        prefix = usable
    its = np.array([t for t, _ in prefix], dtype=float)
    logs = np.log([e for _, e in prefix])
    if np.ptp(logs) == 0.0:
        return 1.0, float("nan")
    slope, intercept = np.polyfit(its, logs, 1)
    fitted = slope * its + intercept
    ss_res = float(np.sum((logs - fitted) ** 2))
    ss_tot = float(np.sum((logs - logs.mean()) ** 2))
    r_squared = 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan")
    return float(np.exp(slope)), r_squared
