"""Block expansion and dual text conditioning for a toy spatio-temporal diffusion transformer."""
from .expansion import ExpansionSpec, expand_model, plan_expansion, verify_identity
from .model import DiT, ModelConfig, count_parameters, init_model
from .text import inject_llm_branch

__version__ = "0.1.0"

__all__ = [
    "DiT",
    "ExpansionSpec",
    "ModelConfig",
    "count_parameters",
    "expand_model",
    "init_model",
    "inject_llm_branch",
    "plan_expansion",
    "verify_identity",
]
