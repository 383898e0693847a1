"""Ranked-attention patch fusion for localized-evidence regression.

A small, self-contained pipeline: a from-scratch reverse-mode autodiff core,
multi-head hybrid attention whose heads are ranked by learnable scales,
patch extraction from the ranked maps, and a staged fusion network trained
in two phases (attention first, fusion on frozen attention second).
"""

from .attention import (ChannelAttentionParams, HybridAttentionHead, RankedAttentionSet,
                        SelfAttentionParams, attention_head_count_check, channel_weights,
                        hybrid_attention, relative_logits, rmhha_forward, self_attention)
from .checkpoint import load_checkpoint, save_checkpoint, serialize
from .config import TrainConfig, config_hash, desk_config, full_scale_config
from .data import Sample, SynthSpec, augment, generate_synth, load_dataset, load_image_pgm, \
    partition, save_image_pgm, write_dataset
from .layers import Conv2D, FullyConnected, bilinear_resize, concat_channels, conv2d, \
    global_maxpool, maxpool2d
from .losses import (AgeLabelSpace, LossWeights, age_estimation_loss, diversity_loss,
                     expected_age, kl_loss, label_distribution, mae_loss, normalize_output)
from .models import AttentionNet, FusionNet, load_state, set_requires_grad
from .patches import CropConfig, PatchSet, binarize_map, extract_patches, largest_component_box
from .tensor import GradTape, Tensor, backward, elementwise, matmul, softmax
from .training import (SGD, evaluate, lr_at, mean_normalized_overlap, metric_cs, metric_mae,
                       predict, seed_streams, train_stage1, train_stage2)

__version__ = "0.1.0"
