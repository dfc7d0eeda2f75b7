"""Hybrid conditional/unconditional semantic image synthesis, desk scale.

One shared synthesis network serves two entry points: unconditional
generation from a latent vector and conditional generation from a
segmentation map plus noise. Training mixes both objectives against a
shared U-Net discriminator. See README.md for the tour.
"""

from .config import (
    DataConfig,
    EvalConfig,
    ModelConfig,
    RunConfig,
    ShapesConfig,
    TrainConfig,
    load_config,
    parse_config,
    serialize_config,
)
from .data import (
    Dataset,
    DatasetSplit,
    LabeledSample,
    generate_dataset,
    generate_shapes_sample,
    load_dataset,
    make_split,
    one_hot_encode,
    save_dataset,
)
from .discriminator import Discriminator, DiscOutput
from .errors import (
    CheckpointIntegrityError,
    ConfigurationError,
    DataError,
    HybridSynthError,
    InternalError,
    NumericalAbortError,
)
from .generator import Generator, StylePyramid, gumbel_softmax, sample_latent
from .metrics import (
    GaussianFit,
    MetricsReport,
    RandomConvExtractor,
    compute_fid,
    evaluate,
    frechet_distance,
    gaussian_fit,
    miou,
    oracle_segment,
)
from .training import Trainer, ema_update, run_ablation

__version__ = "0.1.0"
