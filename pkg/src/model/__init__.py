"""
Model

Attention kernels, layer plans, layers, residual blocks and Axial-ResNet assembly.
"""

from .attention import AttentionParams, axial_attention, init_attention_params
from .plan import ModelPlan, plan_model
from .resnet import Model, baseline_convnet, build_axial_resnet, model_forward, receptive_field

__all__ = [
    "AttentionParams",
    "axial_attention",
    "init_attention_params",
    "ModelPlan",
    "plan_model",
    "Model",
    "baseline_convnet",
    "build_axial_resnet",
    "model_forward",
    "receptive_field",
]
