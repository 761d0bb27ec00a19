"""Self-supervised SAR-style patch retrieval toolkit.

Trains a small encoder with homography-augmented momentum contrastive
learning, builds an l2-normalized embedding index over geo-referenced
patches, and scores retrieval with geographic-overlap ground truth.
"""

from .contrastive import (
    QueueMatrix,
    TrainConfig,
    batch_loss,
    compute_logits,
    info_nce,
    momentum_update,
    norm_regularizer,
    optimizer_step,
    train,
)
from .datagen import Scene, SplitSpec, extract_patches, generate_scene
from .encoder import (
    EncoderConfig,
    ParamSet,
    backward,
    finite_diff_check,
    forward,
    gem_pool,
    load_checkpoint,
    save_checkpoint,
)
from .evaluation import EvalReport, average_precision, evaluate, is_relevant, precision_at
from .homography import (
    FourPointDisplacement,
    apply_homography,
    augment,
    invert,
    sample_four_point,
    solve_dlt,
)
from .index import EmbeddingIndex, GeoFootprint, PatchRecord
from .raster import Raster, read_raster, sample_bilinear, warp_and_crop, write_raster

__version__ = "0.1.0"
