"""Two-stage underwater image enhancement with cascaded contrastive losses.

Stage 1 (CC-Net) corrects colour cast on Lab chroma; stage 2 (HR-Net)
removes haze from the colour-corrected RGB image.
"""

from .ccnet import CCNet, CcNetConfig, build_ccnet, ccnet_forward
from .color import lab_to_rgb, merge_lab, rgb_to_lab, split_lab
from .hrnet import HRNet, HrNetConfig, build_hrnet, hrnet_forward
from .losses import FeatureExtractor, LossWeights
from .training import Checkpoint, TrainConfig, lr_at_epoch

__version__ = "0.1.0"
