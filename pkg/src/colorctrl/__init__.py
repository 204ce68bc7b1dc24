"""Training-free color editing by attention control on a toy multi-modal
diffusion transformer, with the metrics and ablation harness used to check it."""

from .control import (DEFAULT_EPSILON, EditController, EditMask, QuadrantView, accumulate_mask_scores, binarize_mask,
                      color_preserve, reweight_scores, structure_preserve, upsample_mask)
from .errors import (ColorCtrlError, ConfigError, ControlError, InputError, LoadError, ResourceError, ScheduleError,
                     ShapeError, StateError)
from .metrics import MetricsReport, canny, canny_ssim, dilate, evaluate, psnr, ssim
from .model import AttentionKey, AttentionRecord, Controller, ModelConfig, ToyMMDiT, attend, tokenize
from .sampler import BranchCache, EditResult, EditSpec, SampleParams, Sampler, run_edit, run_source

__version__ = "0.1.0"
