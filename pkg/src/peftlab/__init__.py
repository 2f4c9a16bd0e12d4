"""Parameter-efficient fine-tuning (LoRA, IA3) on a numpy transformer encoder."""

from .errors import PeftLabError
from .harness import Budget, TrainConfig, evaluate, prepare_model, train
from .model import ModelConfig, TIERS, build_model, count_params, get_tier
from .peft import Ia3Config, LoraConfig, inject_ia3, inject_lora, merge

__all__ = [
    "Budget",
    "Ia3Config",
    "LoraConfig",
    "ModelConfig",
    "PeftLabError",
    "TIERS",
    "TrainConfig",
    "build_model",
    "count_params",
    "evaluate",
    "get_tier",
    "inject_ia3",
    "inject_lora",
    "merge",
    "prepare_model",
    "train",
]
__version__ = "0.1.0"
