"""Binary containers, trace CSVs, and small JSON reports.

One magic-tagged container ("MFM1", little-endian) covers datasets and
models:

* dataset: header ``magic, kind=1 (u8), form (u8), has_truth (u8), pad,
  d (u32), n (u32), k (u32)`` followed by float64 payloads X (d x n,
  column-major so each instance is contiguous), y (n), and, when present,
  the planted truth w* (d), M* (d x d column-major), singular values (k).
* model: header ``magic, kind=2 (u8), variant (u8), pad, pad, d (u32),
  k (u32), iteration (u32)`` followed by w (d), U_bar (d x k column-major),
  V (d x k column-major).

Float64 payloads round-trip bit for bit. Trace CSVs carry one row per
iteration with columns iteration, test_rmse, recovery_error, sin_theta,
wall_ms; in deterministic mode wall_ms is written as 0 so identical runs
produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
import struct

import numpy as np

from .errors import ValidationError
from .operators import Batch
from .solver import GroundTruth, ModelState

MAGIC = b"MFM1"
_HEADER = struct.Struct("<4sBBBBIII")

KIND_DATASET = 1
KIND_MODEL = 2

FORM_CODES = {"psd-minus-diag": 0, "asym-minus-diag": 1, "general-low-rank": 2, None: 255}
FORM_NAMES = {code: name for name, code in FORM_CODES.items()}
VARIANT_CODES = {"gfm": 0, "ifm": 1, "fm-baseline": 2}
VARIANT_NAMES = {code: name for name, code in VARIANT_CODES.items()}


def _f64_bytes(arr):
    return np.asarray(arr, dtype="<f8").tobytes(order="F")


def _read_f64(buf, offset, shape):
    count = int(np.prod(shape))
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=offset)
    return arr.reshape(shape, order="F").copy(), offset + 8 * count


def save_dataset(path, batch, k=0, m_star_form=None, truth=None):
    """Write a dataset container; ``truth`` embeds the planted model."""
    if m_star_form not in FORM_CODES:
        raise ValidationError(f"unknown m_star_form {m_star_form!r}")
    k = int(k if truth is None else truth.k)
    header = _HEADER.pack(
        MAGIC, KIND_DATASET, FORM_CODES[m_star_form], int(truth is not None), 0,
        batch.d, batch.n, k,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(_f64_bytes(batch.x))
        fh.write(_f64_bytes(batch.y))
        if truth is not None:
            fh.write(_f64_bytes(truth.w_star))
            fh.write(_f64_bytes(truth.m_star))
            fh.write(_f64_bytes(truth.singular_values))


def _read_header(buf, path, expected_kind):
    if len(buf) < _HEADER.size:
        raise ValidationError(f"{path}: truncated file")
    magic, kind, code, flag, _, a, b, c = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise ValidationError(f"{path}: bad magic {magic!r}, not an MFM container")
    if kind != expected_kind:
        raise ValidationError(f"{path}: container kind {kind} is not the expected {expected_kind}")
    return code, flag, a, b, c


def load_dataset(path):
    """Read a dataset container; returns (batch, meta, truth-or-None)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    form_code, has_truth, d, n, k = _read_header(buf, path, KIND_DATASET)
    if form_code not in FORM_NAMES:
        raise ValidationError(f"{path}: unknown form code {form_code}")
    offset = _HEADER.size
    x, offset = _read_f64(buf, offset, (d, n))
    y, offset = _read_f64(buf, offset, (n,))
    truth = None
    if has_truth:
        w_star, offset = _read_f64(buf, offset, (d,))
        m_star, offset = _read_f64(buf, offset, (d, d))
        sv, offset = _read_f64(buf, offset, (k,))
        truth = GroundTruth(w_star=w_star, m_star=m_star, singular_values=sv)
    if offset != len(buf):
        raise ValidationError(f"{path}: {len(buf) - offset} trailing bytes")
    meta = {"d": d, "n": n, "k": k, "m_star_form": FORM_NAMES[form_code]}
    return Batch(x, y), meta, truth


def save_model(path, state):
    """Write a model container."""
    header = _HEADER.pack(
        MAGIC, KIND_MODEL, VARIANT_CODES[state.variant], 0, 0,
        state.d, state.k, state.iteration,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(_f64_bytes(state.w))
        fh.write(_f64_bytes(state.u_bar))
        fh.write(_f64_bytes(state.v))


def load_model(path):
    """Read a model container back into a ModelState."""
    with open(path, "rb") as fh:
        buf = fh.read()
    variant_code, _, d, k, iteration = _read_header(buf, path, KIND_MODEL)
    if variant_code not in VARIANT_NAMES:
        raise ValidationError(f"{path}: unknown variant code {variant_code}")
    offset = _HEADER.size
    w, offset = _read_f64(buf, offset, (d,))
    u_bar, offset = _read_f64(buf, offset, (d, k))
    v, offset = _read_f64(buf, offset, (d, k))
    if offset != len(buf):
        raise ValidationError(f"{path}: {len(buf) - offset} trailing bytes")
    return ModelState(
        w=w, u_bar=u_bar, v=v, variant=VARIANT_NAMES[variant_code], iteration=iteration
    )


def export_dataset_csv(path, batch):
    """Plain-text interop export: one instance per row, features then label."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{j}" for j in range(batch.d)] + ["y"])
        for i in range(batch.n):
            writer.writerow([repr(v) for v in batch.x[:, i]] + [repr(batch.y[i])])


def _cell(value):
    return "" if value is None else repr(float(value))


def write_trace_csv(path, records, deterministic=False):
    """Trace CSV, one row per iteration. Deterministic mode zeroes wall_ms."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "test_rmse", "recovery_error", "sin_theta", "wall_ms"])
        for rec in records:
            wall_ms = 0.0 if deterministic else rec.wall_time * 1000.0
            writer.writerow(
                [
                    rec.iteration,
                    _cell(rec.test_rmse),
                    _cell(rec.recovery_error),
                    _cell(rec.sin_theta),
                    repr(float(wall_ms)),
                ]
            )


def write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
