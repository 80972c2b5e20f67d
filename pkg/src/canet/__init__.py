"""Two-branch semantic segmentation with attention fusion, on a small
self-contained autodiff core.

The public surface: a `Tensor`/`Tape` reverse-mode core (`tensor`, `ops`),
the network and its parts (`model`, `fca`, `backbones`, `layers`), training
machinery with a synthetic task (`train`), segmentation metrics (`metrics`),
analytic parameter/FLOP counting and latency benchmarking (`analysis`),
finite-difference gradient checks (`gradcheck`), tensor/weight/image file
formats (`fileio`), and the `canet` command line (`cli`).

Convolutions run on a compiled extension when it is available and fall back
to pure NumPy otherwise; `canet.kernels.BACKEND` names the selected path and
the environment variables `CANET_KERNELS` (auto|compiled|numpy) and
`CANET_THREADS` override it.
"""

from .analysis import BenchReport, CostReport, bench_inference, cost_report, count_flops, count_params
from .backbones import BackboneSpec, build_backbone
from .errors import (
    CanetError,
    ConfigError,
    ContractError,
    DataError,
    FormatError,
    ShapeError,
    TrainingError,
)
from .fca import FCA, VARIANTS, FcaConfig
from .kernels import BACKEND
from .metrics import ConfusionMatrix, global_accuracy, iou, miou, render_report
from .model import CANet, CanetConfig, ContextBranch, SpatialBranch
from .tensor import Tape, Tensor
from .train import (
    SyntheticSample,
    TrainConfig,
    TrainReport,
    make_synthetic_dataset,
    train_loop,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "BackboneSpec",
    "BenchReport",
    "CANet",
    "CanetConfig",
    "CanetError",
    "ConfigError",
    "ConfusionMatrix",
    "ContextBranch",
    "ContractError",
    "CostReport",
    "DataError",
    "FCA",
    "FcaConfig",
    "FormatError",
    "ShapeError",
    "SpatialBranch",
    "SyntheticSample",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrainReport",
    "TrainingError",
    "VARIANTS",
    "bench_inference",
    "build_backbone",
    "cost_report",
    "count_flops",
    "count_params",
    "global_accuracy",
    "iou",
    "make_synthetic_dataset",
    "miou",
    "render_report",
    "train_loop",
    "__version__",
]
