"""Attention-flow probing of a toy two-transformer vision-language model."""
from __future__ import annotations

from ._backend import BACKEND
from .flow import ImfReport, attention_flow, imf, imf_profiles, residual_attention
from .masking import MaskPlan, mfr_mask_plan, mlm_mask_plan, random_mask_plan
from .model import ModelConfig, ModelParams
from .probe import kmeans2, nmi, nmi_profile
from .records import AttentionRecord, ModalityPartition
from .tensor import Tape, Tensor, backward
from .train import TrainConfig, train

__all__ = [
    "BACKEND", "ImfReport", "attention_flow", "imf", "imf_profiles", "residual_attention",
    "MaskPlan", "mfr_mask_plan", "mlm_mask_plan", "random_mask_plan", "ModelConfig",
    "ModelParams", "kmeans2", "nmi", "nmi_profile", "AttentionRecord", "ModalityPartition",
    "Tape", "Tensor", "backward", "TrainConfig", "train",
]
