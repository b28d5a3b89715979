"""D2A U-Net: dilated dual-attention U-Net for lesion segmentation, on a numpy autodiff core."""

from .attention import DecoderAttention, GateAttention
from .losses import LossConfig, bce_loss, dice_loss, seg_loss
from .metrics import MetricsRecord, binarize, compute_metrics
from .model import (
    D2AUNet,
    EncoderSpec,
    ModelConfig,
    RABSpec,
    count_params_flops,
    equivalent_kernel_size,
    theoretical_receptive_field,
)
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"
