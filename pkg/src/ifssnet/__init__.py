"""Few-shot volumetric mask propagation with a Siamese recurrent network."""

from .baselines import fill_between_slices, zero_order_propagate
from .estimator import IFSSNetSegmenter
from .losses import alpha_beta, dice_coeff, total_loss, tversky_index, tversky_index_window
from .metrics import MetricsReport, evaluate, hausdorff_asd, volume_error_pct, volume_mm3
from .net import IFSSNet, ModelState, NetConfig, build_model, load_checkpoint, model_step, save_checkpoint
from .phantom import PhantomSpec, generate_phantom, split_dataset
from .propagation import fuse_overlaps, propagate
from .training import TrainConfig, train
from .volume import (
    AnnotationSchedule,
    MaskVolume,
    SubVolumeWindow,
    Volume,
    decremental_schedule,
    fixed_interval_schedule,
    make_windows,
    read_mvol,
    write_mvol,
)

__version__ = "0.1.0"
