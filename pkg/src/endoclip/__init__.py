"""endoclip: trainable vision-language toolkit for endoscopy classification and retrieval."""

from .augment import AugmentPolicy, LabeledFeature, augment_image, patch_mask, sample_slerp_batch, slerp
from .checkpoint import Checkpoint, load_checkpoint, restore_model, save_checkpoint
from .config import Toggles, TrainConfig
from .data import DatasetManifest, ManifestRecord, ingest_manifest, load_image
from .encoders import (
    EncoderOutput,
    TextEncoder,
    ViTConfig,
    ViTImageEncoder,
    Vocabulary,
    encode_image,
    encode_text,
    tokenize,
)
from .fusion import FusionConfig, FusionModule, fuse, select_layers
from .lora import LoraAdapter, LoraConfig, inject, lora_apply, lora_init
from .model import JointModel
from .objectives import (
    CLASS_NAMES,
    LinearHead,
    LossWeights,
    build_prompt,
    classification_loss,
    contrastive_loss,
    total_loss,
)
from .optim import AdamWState, adamw_step
from .retrieval import (
    ClassificationReport,
    EmbeddingIndex,
    RankedResult,
    classification_report,
    cosine_sim_matrix,
    load_index,
    mrr,
    rank_queries,
    recall_at_k,
    save_index,
    text_image_scores,
)
from .tensor import Tape, Tensor, backward, finite_diff_check
from .train import RetrievalReport, TrainResult, embed_manifest, evaluate, gradcheck_suite, train

__version__ = "0.1.0"
