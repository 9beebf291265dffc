"""Ring-parallel autoregressive generation over discrete token grids."""

from .grids import (CropExtent, RingSchedule, ScheduleError, SequenceLayout,
                    StepSegment, TokenGrid, center_fill, crop, extend_schedule,
                    layout_from_schedule, make_schedule,
                    make_stepcount_schedule, radial_encode, raster_layout,
                    ring_diff, schedule_from_text, schedule_subset,
                    schedule_to_text)
from .masks import NestedMask, build_nested_mask, check_mask
from .model import ModelConfig, RingTransformer, loss_and_grads, sinusoidal_2d
from .decode import (DecodeState, Revision, SamplerConfig, constrained_decode,
                     correct_interior, decode, extrapolate_decode,
                     raster_decode, sample_border)
from .train import (AdamWState, TrainConfig, adamw_step, apply_rds, apply_rni,
                    train_epoch, train_model)
from .synthetic import ArraySource, SyntheticSource, constant_source, sample_grid
from .vq import VqConfig, VqTokenizer, vq_decode, vq_encode, vq_train
from .estimators import RingGridGenerator, VqPatchTokenizer, check_grid_array

__version__ = "0.1.0"
