"""Blur-robust instance retrieval: motion-blur synthesis, a GeM descriptor
network with blur and localization heads, blur-aware tuple sampling, and
mAP evaluation."""

from blurret.blur_synth import (
    BlurAnnotation,
    PointSpreadFunction,
    Sprite,
    annotate,
    blur_level,
    blur_severity,
    composite,
    delta_psf,
    rasterize_linear_psf,
)
from blurret.dataset_gen import DataConfig, DatasetManifest, ImageRecord, build_dataset
from blurret.losses import ArcFaceParams, LossWeights, joint_loss
from blurret.model import BridgeConfig, DescriptorModel, EncoderConfig, gem_pool, load_model
from blurret.retrieval_eval import DescriptorStore, blur_matrix, evaluate, search
from blurret.sampler import RecordPool, SamplerConfig, epoch_batches, select_tuple
from blurret.trainer import TrainConfig, train

__version__ = "0.1.0"
