"""Multi-modal temporal fusion for binary classification of long recordings.

The package is organised as a pipeline: :mod:`mmfuse.datamodel` defines the
stream containers and dataset manifests, :mod:`mmfuse.windowing` cuts
fixed-duration windows out of recordings, :mod:`mmfuse.encoders` and
:mod:`mmfuse.positioning` map raw frames into a shared embedding space,
:mod:`mmfuse.fusion` runs the masked transformer over the concatenated
modality sequence, :mod:`mmfuse.training` owns the optimiser, checkpoint
format and gradient checker, :mod:`mmfuse.evaluation` votes window
predictions into record decisions, and :mod:`mmfuse.synthgen` produces the
synthetic benchmark used by the tests and demos.

The most commonly used names are re-exported here; everything else stays
importable from its home module.
"""

from .autodiff import Tensor
from .datamodel import (
    DatasetManifest,
    ManifestRecord,
    ModalityDescriptor,
    ModalityStream,
    VideoRecord,
    load_manifest,
    preset_config,
    read_stream_file,
    read_stream_header,
    write_manifest,
    write_stream_file,
)
from .errors import (
    AggregationError,
    ConfigurationError,
    ContractError,
    CorruptionError,
    DataError,
    DatasetError,
    DegenerateStatisticsError,
    DegenerateWindowError,
    EmptyVoteError,
    EmptyWindowError,
    FormatError,
    MmfuseError,
    NumericError,
    ParseError,
    SchemaError,
    TooShortError,
    ValidationError,
)
from .evaluation import (
    Metrics,
    VoteResult,
    aggregate_runs,
    compute_metrics,
    predict_record,
    prefix_decision,
    vote,
)
from .fusion import Prediction, WindowClassifier, classification_loss
from .synthgen import SynthSpec, generate_dataset, linear_probe_accuracy
from .training import (
    GradCheckReport,
    TrainConfig,
    TrainResult,
    grad_check,
    load_checkpoint,
    restore_model,
    save_checkpoint,
    train,
)
from .windowing import (
    Window,
    enumerate_eval_windows,
    extract_window,
    sample_training_window,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "Tensor",
    "DatasetManifest",
    "ManifestRecord",
    "ModalityDescriptor",
    "ModalityStream",
    "VideoRecord",
    "load_manifest",
    "preset_config",
    "read_stream_file",
    "read_stream_header",
    "write_manifest",
    "write_stream_file",
    "AggregationError",
    "ConfigurationError",
    "ContractError",
    "CorruptionError",
    "DataError",
    "DatasetError",
    "DegenerateStatisticsError",
    "DegenerateWindowError",
    "EmptyVoteError",
    "EmptyWindowError",
    "FormatError",
    "MmfuseError",
    "NumericError",
    "ParseError",
    "SchemaError",
    "TooShortError",
    "ValidationError",
    "Metrics",
    "VoteResult",
    "aggregate_runs",
    "compute_metrics",
    "predict_record",
    "prefix_decision",
    "vote",
    "Prediction",
    "WindowClassifier",
    "classification_loss",
    "SynthSpec",
    "generate_dataset",
    "linear_probe_accuracy",
    "GradCheckReport",
    "TrainConfig",
    "TrainResult",
    "grad_check",
    "load_checkpoint",
    "restore_model",
    "save_checkpoint",
    "train",
    "Window",
    "enumerate_eval_windows",
    "extract_window",
    "sample_training_window",
]
