"""Two-stage heatmap regression for cephalometric landmark detection, on a small numpy autodiff core."""

from .heatmap import Frame, HeatmapSpec, HeatmapStack, LandmarkSet, decode_coarse, decode_fine, encode_heatmaps
from .loss import LossConfig, heatmap_loss, heatmap_loss_logits
from .pipeline import StageConfig, infer, train_global, train_local
from .tensor import Tape, Tensor
from .unet import UNet, UNetConfig, build_unet

__version__ = "0.1.0"
