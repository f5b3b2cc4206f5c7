"""Dual-resolution joint speech-text modeling on synthetic token streams.

The backbone runs at a grouped 5 Hz frame rate while a refinement head
emits 25 Hz speech tokens; training covers pre-alignment, two-rate
fine-tuning with an intermediate weight merge, preference optimization,
and a full-duplex turn-taking variant.
"""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import PipelineConfig, load_config, parse_config
from .corpus import TaskSpec, make_corpus
from .drsr import GroupProjector, UngroupProjector, group, ungroup
from .estimators import DualResolutionLM, FrameAligner
from .evaluate import EvalReport, evaluate
from .mllm import BackboneConfig, JointSpeechTextModel, ModelConfig
from .tokens import SPEECH_VOCAB, TEXT_VOCAB, DualFrame, SyntheticCodec, TokenStream, align_streams
from .training import MergeSpec, TrainPlan, cosine_lr, dpo_loss, merge

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig", "Checkpoint", "DualFrame", "DualResolutionLM", "EvalReport", "FrameAligner",
    "GroupProjector", "JointSpeechTextModel", "MergeSpec", "ModelConfig", "PipelineConfig", "SPEECH_VOCAB",
    "SyntheticCodec", "TEXT_VOCAB", "TaskSpec", "TokenStream", "TrainPlan", "UngroupProjector", "align_streams",
    "cosine_lr", "dpo_loss", "evaluate", "group", "load_checkpoint", "load_config", "make_corpus", "merge",
    "parse_config", "save_checkpoint", "ungroup",
]
