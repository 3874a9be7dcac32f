"""Command-line harness: data generation, training, evaluation, diagnostics,
and end-to-end named experiments.

Every subcommand accepts ``--config FILE`` (a flat JSON object); explicit
command-line flags override config fields, which override built-in defaults.
``--seed`` (or a config seed) is mandatory for gen, train, diagnose, and
experiment. MFM_THREADS caps diagnostic trial parallelism.

Exit codes: 0 success, 2 validation/configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import diagnostics as diag
from . import fileio
from .errors import NumericalError, ValidationError
from .moments import ANALYTIC_MOMENTS, analytic_profile
from .operators import Batch
from .solver import FixedDatasetSource, TrainConfig, predict, train
from .synth import M_STAR_FORMS, X_DISTS, SynthSpec, fresh_source, gen_split, gen_truth

EXPERIMENT_NAMES = ("fig1a", "fig1b", "fig1c", "custom", "rip", "elim", "bernoulli", "moments")
DIAGNOSTIC_CHECKS = ("rip", "pconc", "elim", "bernoulli", "moments")


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ValidationError(f"config {path} must hold a JSON object")
    return cfg


class Settings:
    """Flag-over-config-over-default resolution for one subcommand."""

    def __init__(self, args):
        self._args = vars(args)
        self._cfg = _load_config(self._args.get("config"))

    def get(self, name, default=None, required=False):
        value = self._args.get(name)
        if value is None:
            value = self._cfg.get(name, default)
        if required and value is None:
            raise ValidationError(f"missing required setting: {name.replace('_', '-')}")
        return value

    def seed(self):
        return int(self.get("seed", required=True))


def _int_list(raw):
    if isinstance(raw, (list, tuple)):
        return [int(v) for v in raw]
    return [int(tok) for tok in str(raw).split(",") if tok.strip()]


def _float_list(raw):
    if isinstance(raw, (list, tuple)):
        return [float(v) for v in raw]
    return [float(tok) for tok in str(raw).split(",") if tok.strip()]


# --- gen -------------------------------------------------------------------------


def _synth_spec(s, seed):
    d = int(s.get("d", 100))
    k = int(s.get("k", 5))
    return SynthSpec(
        d=d,
        k=k,
        m_star_form=s.get("m_star_form", "psd-minus-diag"),
        x_dist=s.get("x_dist", "gaussian"),
        flip_labels=bool(s.get("flip_labels", False)),
        noise_std=float(s.get("noise_std", 0.0)),
        seed=seed,
    )


def cmd_gen(args):
    s = Settings(args)
    seed = s.seed()
    spec = _synth_spec(s, seed)
    n_train = int(s.get("n_train", 30 * spec.k * spec.d))
    n_test = int(s.get("n_test", 10000))
    out = Path(s.get("out", required=True))
    truth, train_b, test_b = gen_split(spec, n_train, n_test)
    out.parent.mkdir(parents=True, exist_ok=True)
    train_path = out.with_name(out.name + "_train.mfm")
    test_path = out.with_name(out.name + "_test.mfm")
    fileio.save_dataset(train_path, train_b, m_star_form=spec.m_star_form, truth=truth)
    fileio.save_dataset(test_path, test_b, m_star_form=spec.m_star_form, truth=truth)
    if s.get("csv", False):
        fileio.export_dataset_csv(out.with_name(out.name + "_train.csv"), train_b)
        fileio.export_dataset_csv(out.with_name(out.name + "_test.csv"), test_b)
    print(f"wrote {train_path} ({train_b.n} instances) and {test_path} ({test_b.n} instances)")
    return 0


# --- train -----------------------------------------------------------------------


def _standardized(train_b, test_b):
    mean = train_b.x.mean(axis=1, keepdims=True)
    std = train_b.x.std(axis=1, keepdims=True)
    if np.any(std == 0):
        raise ValidationError("cannot standardize: a coordinate is constant on the training set")
    out_train = Batch((train_b.x - mean) / std, train_b.y)
    out_test = None
    if test_b is not None:
        out_test = Batch((test_b.x - mean) / std, test_b.y)
    return out_train, out_test


def _train_config(s, meta, data_n, seed):
    k_default = meta["k"] if meta["k"] > 0 else None
    k = s.get("k", k_default)
    if k is None:
        raise ValidationError("rank k is neither given nor recorded in the dataset")
    mode = s.get("sampling_mode", "fixed-dataset-cycling")
    if mode != "fixed-dataset-cycling":
        raise ValidationError(
            "file-based training only supports fixed-dataset-cycling; "
            "fresh batches need synthetic generation (see `mfm experiment`)"
        )
    cfg = TrainConfig(
        k=int(k),
        n=int(s.get("n", data_n)),
        steps=int(s.get("steps", 50)),
        variant=str(s.get("variant", "ifm")).lower(),
        sampling_mode=mode,
        tau_min=float(s.get("tau_min", 1e-3)),
        seed=seed,
        learning_rate=float(s.get("learning_rate", 0.1)),
        init_scale=float(s.get("init_scale", 1.0)),
        early_stop=bool(s.get("early_stop", False)),
    )
    cfg.validate()
    return cfg


def _resolve_profile(s, d):
    choice = s.get("moments", "estimated")
    if choice == "estimated":
        return None
    if choice in ANALYTIC_MOMENTS:
        return analytic_profile(choice, d)
    raise ValidationError(
        f"moments must be 'estimated' or one of {sorted(ANALYTIC_MOMENTS)}, got {choice!r}"
    )


def cmd_train(args):
    s = Settings(args)
    seed = s.seed()
    data_path = s.get("data", required=True)
    train_b, meta, truth = fileio.load_dataset(data_path)
    test_b = None
    if s.get("test") is not None:
        test_b, _, _ = fileio.load_dataset(s.get("test"))
        if test_b.d != train_b.d:
            raise ValidationError(
                f"test dimension {test_b.d} does not match training dimension {train_b.d}"
            )
    if s.get("standardize", False):
        train_b, test_b = _standardized(train_b, test_b)
    cfg = _train_config(s, meta, train_b.n, seed)
    profile = _resolve_profile(s, train_b.d) if cfg.variant == "gfm" else None
    source = FixedDatasetSource(train_b, batch_size=cfg.n, seed=seed)
    state, records = train(source, cfg, ground_truth=truth, test_batch=test_b, profile=profile)
    deterministic = bool(s.get("deterministic", False))
    if s.get("trace") is not None:
        fileio.write_trace_csv(s.get("trace"), records, deterministic=deterministic)
    if s.get("model") is not None:
        fileio.save_model(s.get("model"), state)
    last = records[-1]
    summary = f"{cfg.variant}: {state.iteration} iterations"
    if last.test_rmse is not None:
        summary += f", test rmse {last.test_rmse:.6g}"
    if last.recovery_error is not None:
        summary += f", recovery error {last.recovery_error:.6g}"
    print(summary)
    return 0


# --- eval ------------------------------------------------------------------------


def cmd_eval(args):
    s = Settings(args)
    state = fileio.load_model(s.get("model", required=True))
    batch, _, _ = fileio.load_dataset(s.get("data", required=True))
    if batch.d != state.d:
        raise ValidationError(f"data dimension {batch.d} does not match model dimension {state.d}")
    residual = predict(state, batch.x) - batch.y
    value = float(np.sqrt(np.mean(residual**2)))
    payload = {
        "rmse": value,
        "n": batch.n,
        "model": str(s.get("model")),
        "data": str(s.get("data")),
    }
    if s.get("out") is not None:
        fileio.write_json(s.get("out"), payload)
    print(f"rmse {value:.12g} over {batch.n} instances")
    return 0


# --- diagnose ----------------------------------------------------------------------


def _write_report_csv(path, rows, columns):
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)


def _fixed_rank_matrix(d, k, seed):
    """Symmetric rank-k matrix with unit spectral norm for operator checks."""
    truth = gen_truth(SynthSpec(d=d, k=k, m_star_form="general-low-rank", seed=seed))
    return truth.m_star / truth.singular_values[0]


def _run_diagnostic(check, s, outdir, seed):
    dcfg = diag.load_config(s.get("diag_config"))
    eta = float(dcfg.get("confidence_eta", 0.01))
    x_dist = s.get("x_dist", "gaussian")
    rows, payload = [], {"check": check, "seed": seed}
    if check == "rip":
        base = dcfg["rip"]
        d = int(s.get("d", base["d"]))
        k = int(s.get("k", base["k"]))
        n_list = _int_list(s.get("n_list", base["n_list"]))
        trials = int(s.get("trials", base["trials"]))
        report = diag.rip_check(
            _fixed_rank_matrix(d, k, seed), x_dist, n_list, trials, seed=seed, eta=eta
        )
        payload.update({"d": d, "k": k, "x_dist": x_dist, "report": report.to_dict()})
        for n, err in zip(report.sample_sizes, report.mean_errors):
            rows.append(
                {
                    "check": check,
                    "operator": "second-moment",
                    "n": n,
                    "mean_error": err,
                    "trials": trials,
                    "ratio_n_vs_4n": report.ratio_n_vs_4n,
                }
            )
    elif check == "pconc":
        base = dcfg["p_concentration"]
        d = int(s.get("d", base["d"]))
        k = int(s.get("k", base["k"]))
        n_list = _int_list(s.get("n_list", base["n_list"]))
        trials = int(s.get("trials", base["trials"]))
        truth = gen_truth(SynthSpec(d=d, k=k, m_star_form="general-low-rank", seed=seed))
        reports = diag.p_concentration_check(truth, x_dist, n_list, trials, seed=seed, eta=eta)
        payload.update(
            {"d": d, "k": k, "x_dist": x_dist, "reports": {op: r.to_dict() for op, r in reports.items()}}
        )
        for op, report in reports.items():
            for n, err in zip(report.sample_sizes, report.mean_errors):
                rows.append(
                    {
                        "check": check,
                        "operator": op,
                        "n": n,
                        "mean_error": err,
                        "trials": trials,
                        "ratio_n_vs_4n": report.ratio_n_vs_4n,
                    }
                )
    elif check == "moments":
        base = dcfg["moments"]
        d = int(s.get("d", base["d"]))
        n_list = _int_list(s.get("n_list", base["n_list"]))
        trials = int(s.get("trials", base["trials"]))
        reports = diag.moment_decay_check(x_dist, d, n_list, trials, seed=seed, eta=eta)
        payload.update(
            {"d": d, "x_dist": x_dist, "reports": {op: r.to_dict() for op, r in reports.items()}}
        )
        for op, report in reports.items():
            for n, err in zip(report.sample_sizes, report.mean_errors):
                rows.append(
                    {
                        "check": check,
                        "operator": op,
                        "n": n,
                        "mean_error": err,
                        "trials": trials,
                        "ratio_n_vs_4n": report.ratio_n_vs_4n,
                    }
                )
    elif check == "elim":
        base = dcfg["elimination"]
        d = int(s.get("d", base["d"]))
        k = int(s.get("k", base["k"]))
        n = int(s.get("n", base["n"]))
        trials = int(s.get("trials", base["trials"]))
        traces = _float_list(s.get("traces", base["traces"]))
        truth = gen_truth(SynthSpec(d=d, k=k, m_star_form="general-low-rank", seed=seed))
        results = []
        for trace in traces:
            delta = _matrix_error_with_trace(d, k, seed + 1, trace)
            for corrected in (True, False):
                m_err, w_err = diag.elimination_check(
                    truth,
                    np.zeros(d),
                    delta,
                    x_dist,
                    n=n,
                    trials=trials,
                    seed=seed,
                    corrected=corrected,
                )
                results.append(
                    {"trace": trace, "corrected": corrected, "m_error": m_err, "w_error": w_err}
                )
                for op, err in (("m", m_err), ("w", w_err)):
                    rows.append(
                        {
                            "check": check,
                            "operator": op,
                            "n": n,
                            "mean_error": err,
                            "trials": trials,
                            "corrected": corrected,
                            "trace": trace,
                        }
                    )
        payload.update({"d": d, "k": k, "n": n, "x_dist": x_dist, "results": results})
    elif check == "bernoulli":
        base = dcfg["bernoulli"]
        d = int(s.get("d", base["d"]))
        n = int(s.get("n", base["n"]))
        trials = int(s.get("trials", base["trials"]))
        invariant = diag.bernoulli_degeneracy_check(d, n, trials, seed=seed)
        payload.update({"d": d, "n": n, "trials": trials, "invariant": invariant})
        rows.append(
            {
                "check": check,
                "operator": "quadratic-form",
                "n": n,
                "mean_error": 0.0 if invariant else 1.0,
                "trials": trials,
                "invariant": invariant,
            }
        )
    else:
        raise ValidationError(f"check must be one of {DIAGNOSTIC_CHECKS}, got {check!r}")

    outdir.mkdir(parents=True, exist_ok=True)
    fileio.write_json(outdir / f"{check}.json", payload)
    columns = sorted({key for row in rows for key in row})
    _write_report_csv(outdir / f"{check}.csv", rows, columns)
    print(f"{check}: wrote {outdir / (check + '.json')} and {outdir / (check + '.csv')}")
    return 0


def _matrix_error_with_trace(d, k, seed, trace):
    """Near-unit-norm symmetric perturbation with the exact target trace:
    a hollow unit-spectral-norm part plus (trace/d) I."""
    delta = _fixed_rank_matrix(d, k, seed)
    np.fill_diagonal(delta, 0.0)
    delta /= np.linalg.norm(delta, 2)
    return delta + (trace / d) * np.eye(d)


def cmd_diagnose(args):
    s = Settings(args)
    seed = s.seed()
    check = s.get("check", required=True)
    outdir = Path(s.get("out", required=True))
    return _run_diagnostic(check, s, outdir, seed)


# --- experiment --------------------------------------------------------------------


_FIGURES = {
    "fig1a": {"m_star_form": "psd-minus-diag", "flip_labels": False},
    "fig1b": {"m_star_form": "psd-minus-diag", "flip_labels": True},
    "fig1c": {"m_star_form": "asym-minus-diag", "flip_labels": False},
}


def _run_figure(name, s, outdir, seed):
    overrides = _FIGURES[name]
    d = int(s.get("d", 100))
    k = int(s.get("k", 5))
    spec = SynthSpec(
        d=d,
        k=k,
        m_star_form=overrides["m_star_form"],
        flip_labels=overrides["flip_labels"],
        x_dist=s.get("x_dist", "gaussian"),
        noise_std=float(s.get("noise_std", 0.0)),
        seed=seed,
    )
    n_train = int(s.get("n_train", 30 * k * d))
    n_test = int(s.get("n_test", 10000))
    truth, train_b, test_b = gen_split(spec, n_train, n_test)
    outdir.mkdir(parents=True, exist_ok=True)
    fileio.save_dataset(outdir / f"{name}_train.mfm", train_b, m_star_form=spec.m_star_form, truth=truth)
    fileio.save_dataset(outdir / f"{name}_test.mfm", test_b, m_star_form=spec.m_star_form, truth=truth)
    deterministic = bool(s.get("deterministic", False))
    summary = {"name": name, "seed": seed, "d": d, "k": k, "n_train": n_train,
               "n_test": n_test, "std_y": float(np.std(test_b.y))}
    runs = {
        "ifm": TrainConfig(k=k, n=n_train, steps=int(s.get("ifm_steps", 60)), variant="ifm", seed=seed),
        "fm": TrainConfig(
            k=k,
            n=n_train,
            steps=int(s.get("fm_steps", 200)),
            variant="fm-baseline",
            seed=seed,
            learning_rate=float(s.get("learning_rate", 0.1)),
            init_scale=float(s.get("init_scale", 1.0)),
        ),
    }
    for tag, cfg in runs.items():
        source = FixedDatasetSource(train_b, batch_size=cfg.n, seed=seed)
        state, records = train(source, cfg, ground_truth=truth, test_batch=test_b)
        fileio.write_trace_csv(outdir / f"{name}_{tag}_trace.csv", records, deterministic=deterministic)
        fileio.save_model(outdir / f"{name}_{tag}_model.mfm", state)
        summary[tag] = {
            "final_test_rmse": records[-1].test_rmse,
            "final_rmse_over_std": records[-1].test_rmse / summary["std_y"],
            "iterations": state.iteration,
        }
        print(
            f"{name} {tag}: final test rmse {records[-1].test_rmse:.6g} "
            f"({records[-1].test_rmse / summary['std_y']:.3%} of std(y))"
        )
    fileio.write_json(outdir / f"{name}_summary.json", summary)
    return 0


def _run_custom(s, outdir, seed):
    spec = _synth_spec(s, seed)
    n_train = int(s.get("n_train", 30 * spec.k * spec.d))
    n_test = int(s.get("n_test", 10000))
    cfg = TrainConfig(
        k=int(s.get("k", spec.k)),
        n=int(s.get("n", n_train)),
        steps=int(s.get("steps", 50)),
        variant=str(s.get("variant", "ifm")).lower(),
        sampling_mode=s.get("sampling_mode", "fixed-dataset-cycling"),
        tau_min=float(s.get("tau_min", 1e-3)),
        seed=seed,
        learning_rate=float(s.get("learning_rate", 0.1)),
        init_scale=float(s.get("init_scale", 1.0)),
    )
    cfg.validate()
    truth, train_b, test_b = gen_split(spec, n_train, n_test)
    if cfg.sampling_mode == "fresh-batches":
        source = fresh_source(truth, spec, n=cfg.n, seed=seed)
    else:
        source = FixedDatasetSource(train_b, batch_size=cfg.n, seed=seed)
    profile = _resolve_profile(s, spec.d) if cfg.variant == "gfm" else None
    state, records = train(source, cfg, ground_truth=truth, test_batch=test_b, profile=profile)
    outdir.mkdir(parents=True, exist_ok=True)
    deterministic = bool(s.get("deterministic", False))
    fileio.write_trace_csv(outdir / "custom_trace.csv", records, deterministic=deterministic)
    fileio.save_model(outdir / "custom_model.mfm", state)
    print(
        f"custom {cfg.variant}: final test rmse {records[-1].test_rmse:.6g}, "
        f"recovery error {records[-1].recovery_error:.6g}"
    )
    return 0


def cmd_experiment(args):
    s = Settings(args)
    seed = s.seed()
    name = s.get("name", required=True)
    if name not in EXPERIMENT_NAMES:
        raise ValidationError(f"experiment name must be one of {EXPERIMENT_NAMES}, got {name!r}")
    outdir = Path(s.get("outdir", required=True))
    if name in _FIGURES:
        return _run_figure(name, s, outdir, seed)
    if name == "custom":
        return _run_custom(s, outdir, seed)
    check = {"rip": "rip", "elim": "elim", "bernoulli": "bernoulli", "moments": "moments"}[name]
    return _run_diagnostic(check, s, outdir, seed)


# --- parser ---------------------------------------------------------------------


def _add_common(p):
    p.add_argument("--config", help="JSON config file; flags override its fields")
    p.add_argument("--seed", type=int, help="experiment seed (mandatory here or in the config)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mfm",
        description="Second-order regression with moment elimination: "
        "data generation, training, evaluation, and Monte-Carlo diagnostics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic train/test split")
    _add_common(p)
    p.add_argument("--d", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--n-test", dest="n_test", type=int)
    p.add_argument("--m-star-form", dest="m_star_form", choices=M_STAR_FORMS)
    p.add_argument("--x-dist", dest="x_dist", choices=X_DISTS)
    p.add_argument("--flip-labels", dest="flip_labels", action="store_const", const=True)
    p.add_argument("--noise-std", dest="noise_std", type=float)
    p.add_argument("--csv", action="store_const", const=True, help="also export CSV copies")
    p.add_argument("--out", help="output path prefix")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model on a dataset file")
    _add_common(p)
    p.add_argument("--data", help="training dataset (.mfm)")
    p.add_argument("--test", help="held-out dataset for the RMSE trace")
    p.add_argument("--variant", choices=("gfm", "ifm", "fm-baseline"))
    p.add_argument("--k", type=int)
    p.add_argument("--n", type=int, help="mini-batch size (default: the whole dataset)")
    p.add_argument("--steps", type=int)
    p.add_argument("--sampling-mode", dest="sampling_mode")
    p.add_argument("--tau-min", dest="tau_min", type=float)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--init-scale", dest="init_scale", type=float)
    p.add_argument(
        "--moments",
        help="'estimated' (default) or an analytic profile: "
        + ", ".join(sorted(ANALYTIC_MOMENTS)),
    )
    p.add_argument("--standardize", action="store_const", const=True)
    p.add_argument("--early-stop", dest="early_stop", action="store_const", const=True)
    p.add_argument("--deterministic", action="store_const", const=True)
    p.add_argument("--trace", help="write the per-iteration trace CSV here")
    p.add_argument("--model", help="write the trained model here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved model on a dataset")
    p.add_argument("--config", help="JSON config file; flags override its fields")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--out", help="write an RMSE JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="run a Monte-Carlo diagnostic check")
    _add_common(p)
    p.add_argument("--check", choices=DIAGNOSTIC_CHECKS)
    p.add_argument("--out", help="output directory for the JSON/CSV reports")
    p.add_argument("--diag-config", dest="diag_config", help="override the committed defaults file")
    p.add_argument("--d", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--n-list", dest="n_list")
    p.add_argument("--trials", type=int)
    p.add_argument("--traces")
    p.add_argument("--x-dist", dest="x_dist", choices=X_DISTS)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("experiment", help="run a named experiment end to end")
    _add_common(p)
    p.add_argument("--name", choices=EXPERIMENT_NAMES)
    p.add_argument("--outdir")
    p.add_argument("--d", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--n-test", dest="n_test", type=int)
    p.add_argument("--ifm-steps", dest="ifm_steps", type=int)
    p.add_argument("--fm-steps", dest="fm_steps", type=int)
    p.add_argument("--steps", type=int, help="custom experiment: update count")
    p.add_argument("--variant", choices=("gfm", "ifm", "fm-baseline"))
    p.add_argument("--sampling-mode", dest="sampling_mode")
    p.add_argument("--n", type=int)
    p.add_argument("--m-star-form", dest="m_star_form", choices=M_STAR_FORMS)
    p.add_argument("--x-dist", dest="x_dist", choices=X_DISTS)
    p.add_argument("--flip-labels", dest="flip_labels", action="store_const", const=True)
    p.add_argument("--noise-std", dest="noise_std", type=float)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--moments")
    p.add_argument("--deterministic", action="store_const", const=True)
    p.add_argument("--diag-config", dest="diag_config")
    p.add_argument("--trials", type=int)
    p.add_argument("--n-list", dest="n_list")
    p.add_argument("--traces")
    p.set_defaults(func=cmd_experiment)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
