"""Modality-mixed diffusion: masked diffusion for text, rectified flow for latents, one shared transformer."""

from .errors import CacheError, ContractError, LayoutError, ModDiffError, NumericError, ShapeError, TrainingDiverged
from .layout import AttentionMask, LossMode, Modality, Role, Segment, SegmentLayout, build_mask, loss_positions, prefix_boundary
from .model import KVCache, ModelConfig, MoDTransformer, extend_cache, forward_gen, forward_und, load_checkpoint, save_checkpoint, write_cache

__version__ = "0.1.0"
