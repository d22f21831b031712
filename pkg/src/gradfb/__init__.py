"""Gradient inversion attacks (DLG, iDLG) with feedback-blended initialization."""

from .attack import ALL_MODES, AttackMode, AttackResult, attack_single, infer_label_idlg, matching_loss
from .blending import FeedbackState, blend, next_init, update
from .client import Batch, GradientSet, compute_client_gradient
from .harness import CampaignConfig, CampaignReport, emit_outputs, load_config, run_campaign
from .lbfgs import LbfgsOptions, OptimResult, minimize
from .model import ConvSpec, Model, ModelConfig, build_model, forward

__version__ = "0.1.0"

__all__ = [
    "ALL_MODES", "AttackMode", "AttackResult", "attack_single", "infer_label_idlg", "matching_loss",
    "FeedbackState", "blend", "next_init", "update",
    "Batch", "GradientSet", "compute_client_gradient",
    "CampaignConfig", "CampaignReport", "emit_outputs", "load_config", "run_campaign",
    "LbfgsOptions", "OptimResult", "minimize",
    "ConvSpec", "Model", "ModelConfig", "build_model", "forward",
]
