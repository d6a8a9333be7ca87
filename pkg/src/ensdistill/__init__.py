"""Online ensemble knowledge distillation for model compression.

One architecture is expanded into a shared-base ensemble of progressively
channel-compressed students, trained jointly with cross-entropy,
intermediate feature-map distillation and temperature-softened
ensemble-teacher distillation, then extracted as standalone compressed
models.
"""

from .autograd import (
    Tensor,
    backward,
    no_grad,
    precision,
    set_default_dtype,
    stop_gradient,
)
from .ensemble import (
    ArchitectureSpec,
    EnsembleModel,
    EnsembleOutput,
    StudentModel,
    assign_channels,
    build_ensemble,
    extract_student,
    forward_ensemble,
)
from .layers import AdaptationLayer, BlockSpec, LayerSpec, adapt_channels
from .losses import (
    LossBundle,
    LossWeights,
    combine,
    cross_entropy_all,
    ensemble_losses,
    intermediate_loss,
    kd_loss,
    softened_softmax,
)
from .data import DatasetBundle, batches, load_dataset, save_dataset, synth_dataset
from .train import TrainConfig, TrainingState, lr_at, sgd_step, train
from .evaluate import (
    Metrics,
    SizeReport,
    finite_difference_check,
    grad_cam,
    size_report,
    top1_accuracy,
    weighted_student_average,
)
from .config import RunConfig, parse_config, parse_config_file

__version__ = "0.1.0"
