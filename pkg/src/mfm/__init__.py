"""Second-order factorization-machine regression with moment elimination.

Library layout:

* :mod:`mfm.linalg` -- thin QR, truncated SVD, spectral norm, canonical angles
* :mod:`mfm.moments` -- moment profiles, the invertibility gate, coefficient solves
* :mod:`mfm.operators` -- batch measurement operators and elimination maps
* :mod:`mfm.solver` -- training loops (gfm / ifm / fm-baseline) and data sources
* :mod:`mfm.synth` -- planted models and synthetic data
* :mod:`mfm.diagnostics` -- Monte-Carlo concentration and decay checks
* :mod:`mfm.fileio` -- dataset/model containers and trace CSVs
* :mod:`mfm.cli` -- the ``mfm`` command-line harness
"""

from .errors import (
    ConvergenceError,
    DegenerateFactorError,
    DivergenceError,
    MfmError,
    NumericalError,
    SingularMomentSystemError,
    ValidationError,
)
from .moments import MomentProfile, analytic_profile, estimate_moments, mip_gate
from .operators import Batch
from .solver import (
    FixedDatasetSource,
    FreshBatchSource,
    GroundTruth,
    ModelState,
    TraceRecord,
    TrainConfig,
    predict,
    recovery_error,
    train,
    train_fm_baseline,
)
from .synth import SynthSpec, gen_batch, gen_split, gen_truth

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "ConvergenceError",
    "DegenerateFactorError",
    "DivergenceError",
    "FixedDatasetSource",
    "FreshBatchSource",
    "GroundTruth",
    "MfmError",
    "ModelState",
    "MomentProfile",
    "NumericalError",
    "SingularMomentSystemError",
    "SynthSpec",
    "TraceRecord",
    "TrainConfig",
    "ValidationError",
    "analytic_profile",
    "estimate_moments",
    "gen_batch",
    "gen_split",
    "gen_truth",
    "mip_gate",
    "predict",
    "recovery_error",
    "train",
    "train_fm_baseline",
    "__version__",
]
