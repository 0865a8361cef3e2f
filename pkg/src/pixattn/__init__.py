"""Autoregressive image generation with block-local self-attention.

Images are modeled pixel by pixel in raster order: a decoder-only
transformer predicts each intensity (or whole pixel, under the mixture
distribution) from everything generated before it, and an optional
encoder conditions the process on a low-resolution source image for
super-resolution.  Self-attention is restricted to local query blocks
with bounded memory, so parameter count stays independent of the
receptive field while cost stays linear in image size.

Everything runs on a small numpy-backed reverse-mode tape; see the
``cli`` module (or the installed ``pixattn`` command) for the train /
eval / sample workflow.
"""

from .blocks import Scheme
from .fileio import (FileFormatError, box_downsample, load_checkpoint,
                     load_dataset, pack_dataset, parse_config, read_pgm,
                     read_ppm, save_checkpoint, write_dataset, write_pgm,
                     write_ppm)
from .imagerep import Image
from .model import (ModelConfig, build, count_params, forward_outputs,
                    forward_train)
from .rng import Rng
from .sampling import (SamplerConfig, complete, consistency, generate,
                       position_log_probs, sequential_nll, superres)
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "FileFormatError",
    "Image",
    "ModelConfig",
    "Rng",
    "SamplerConfig",
    "Scheme",
    "TrainConfig",
    "box_downsample",
    "build",
    "complete",
    "consistency",
    "count_params",
    "evaluate",
    "forward_outputs",
    "forward_train",
    "generate",
    "load_checkpoint",
    "load_dataset",
    "pack_dataset",
    "parse_config",
    "position_log_probs",
    "read_pgm",
    "read_ppm",
    "save_checkpoint",
    "sequential_nll",
    "superres",
    "train",
    "write_dataset",
    "write_pgm",
    "write_ppm",
]
