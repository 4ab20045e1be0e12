"""Inter-channel correlation knowledge distillation on a numpy autodiff engine."""

from .distill import (
    DistillConfig,
    GridSpec,
    ICCMatrix,
    KernelCfg,
    icc_matrix,
    loss_cc,
    loss_cc_grid,
    loss_ickd_c,
    loss_ickd_s,
    loss_kd,
)
from .errors import (
    ConfigError,
    DegenerateBatchError,
    FormatError,
    GridIndivisibleError,
    IckdError,
    NonFiniteError,
    OracleError,
    ShapeError,
)
from .nn import ModelSpec, TransferLayer, build_model, forward_with_taps
from .tensor import Tensor
from .trainer import TrainConfig, evaluate, train_teacher

__version__ = "0.1.0"
