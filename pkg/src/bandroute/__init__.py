"""Band-routed single-channel EEG artifact removal on a numpy autodiff core."""

__version__ = "0.1.0"

from .exceptions import (  # noqa: E402
    BandRouteError,
    CheckpointError,
    ConfigError,
    DataError,
    InfiniteSNRError,
    NumericFault,
    ShapeError,
    TapeError,
)
from .tensor import Tape, Tensor, backward, grad_check, no_grad  # noqa: E402
from .spectral import DEFAULT_BANDS, Band, BandSpec, band_decompose, build_masks, dft, idft, psd  # noqa: E402
from .model import Ablation, BandRouteNet, ModelConfig, count_params, expected_param_count  # noqa: E402
from .data import ArtifactKind, SignalPair, SurrogateConfig, augment_snr_grid, read_dataset, write_dataset  # noqa: E402
from .metrics import MetricReport, cc, rrmse_s, rrmse_t, snr_imp  # noqa: E402
from .train import TrainConfig, adamw_step, evaluate, fit, mse_loss  # noqa: E402
from .checkpoint import load_checkpoint, load_model, save_checkpoint  # noqa: E402
from .estimator import BandDecomposer, BandRouteDenoiser  # noqa: E402

__all__ = [
    "Ablation", "ArtifactKind", "Band", "BandDecomposer", "BandRouteDenoiser", "BandRouteError",
    "BandRouteNet", "BandSpec", "CheckpointError", "ConfigError", "DEFAULT_BANDS", "DataError",
    "InfiniteSNRError", "MetricReport", "ModelConfig", "NumericFault", "ShapeError", "SignalPair",
    "SurrogateConfig", "Tape", "TapeError", "Tensor", "TrainConfig", "adamw_step", "augment_snr_grid",
    "backward", "band_decompose", "build_masks", "cc", "count_params", "dft", "evaluate",
    "expected_param_count", "fit", "grad_check", "idft", "load_checkpoint", "load_model", "mse_loss",
    "no_grad", "psd", "read_dataset", "rrmse_s", "rrmse_t", "save_checkpoint", "snr_imp",
    "write_dataset",
]
