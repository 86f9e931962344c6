"""doppel: lookalike object detection in multiview indoor captures."""

from .backbone import (
    BackboneConfig,
    FoundationBackbone,
    PatchFeatureTensor,
    ToyBackbone,
    build_backbone,
    extract_patches,
    preprocess,
    raw_feature_similarity,
)
from .classifier import SceneGrouping, Thresholds, classify, group_scene
from .encoder import (
    EncoderConfig,
    ObjectEmbedding,
    PairEncoder,
    SimilarityResult,
    encode_pair,
    similarity,
)
from .evaluator import (
    IoUReport,
    associate_instances,
    evaluate_predicted_instances,
    pair_iou,
)
from .losses import (
    AnchorNeighborhood,
    Margins,
    alignment_loss,
    mine_hard,
    total_loss,
    triplet_loss,
)
from .manifest import (
    complete_negative_pairs,
    load_manifest,
    save_manifest,
    select_top_views,
)
from .model import PairScorer, build_model, load_checkpoint, save_checkpoint, score_pair
from .toydata import make_toy_dataset
from .trainer import AugmentationFlags, TrainConfig, augment, sample_batch, train
from .types import (
    DatasetManifest,
    ObjectInstance,
    PairLabel,
    PairRecord,
    SceneManifest,
    SimilarityType,
    ViewCrop,
)

__version__ = "0.1.0"
