"""Token-level gated fusion of domain-specialist language models (numpy reference build)."""

from .data import DOMAINS, DomainCorpus, TrainingExample, synth_corpus
from .fuser import FusedModel, load_fused
from .gate import FixedGate, GateNetwork, fuse_logits, fuse_weights
from .infer import GenerationConfig, generate, orchestrate, orchestrated_generate
from .lm import LmConfig, PretrainConfig, Specialist, perplexity, pretrain_specialist
from .train import TrainConfig, train_two_stage

__version__ = "0.1.0"

__all__ = [
    "DOMAINS",
    "DomainCorpus",
    "TrainingExample",
    "synth_corpus",
    "FusedModel",
    "load_fused",
    "FixedGate",
    "GateNetwork",
    "fuse_logits",
    "fuse_weights",
    "GenerationConfig",
    "generate",
    "orchestrate",
    "orchestrated_generate",
    "LmConfig",
    "PretrainConfig",
    "Specialist",
    "perplexity",
    "pretrain_specialist",
    "TrainConfig",
    "train_two_stage",
]
