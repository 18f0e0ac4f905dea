"""Self-training with pseudo-labels and gradient-guided augmentation for few-shot dialog tasks."""

from .corpus import Dataset, Example, TaskKind, few_shot_split, load_jsonl
from .gradaug import GradAugConfig, gradaug
from .heads import ModelConfig, TaskModel
from .mlm import mlm_train
from .selftrain import STConfig, run

__version__ = "0.1.0"

__all__ = ["Dataset", "Example", "TaskKind", "few_shot_split", "load_jsonl", "GradAugConfig", "gradaug",
           "ModelConfig", "TaskModel", "mlm_train", "STConfig", "run"]
