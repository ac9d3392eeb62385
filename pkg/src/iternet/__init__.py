"""Iterative UNet retinal-vessel segmentation at desk scale."""

from .engine import (Tape, Var, backward, concat_channels, conv2d,
                     max_pool_2x2, relu, sigmoid, sigmoid_cross_entropy,
                     upsample2x_conv)
from .model import (ForwardResult, IterNetConfig, UNetConfig, build_iternet,
                    full_scale_config, iternet_forward, iternet_loss,
                    iternet_param_layout, toy_config)
from .optim import (CheckpointError, OptimizerConfig, ParamStore, adam_step,
                    load_checkpoint, save_checkpoint)
from .data import (AugmentConfig, Sample, augment, extract_grid_patches,
                   generate_fov_mask, load_image, sample_training_patch,
                   stitch_patches)
from .synth import SynthConfig, synth_vessel_sample, write_corpus
from .metrics import (binarize, confusion, connectivity_area, connectivity_at,
                      count_segments, evaluate, roc_auc, skeletonize)

__version__ = "0.1.0"
