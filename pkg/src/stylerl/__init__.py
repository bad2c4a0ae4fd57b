"""Reinforcement-learning arbitrary style transfer at desk scale.

A numpy autograd engine, a frozen feature backbone, actor/builder/critic
networks, maximum-entropy actor-critic control learning, uncertainty-weighted
generative learning and the evaluation/CLI plumbing around them.
"""

from .agent import AgentParams
from .errors import (
    ContractError,
    DimensionError,
    DomainError,
    FormatError,
    NumericError,
    ParameterError,
    StyleRLError,
)
from .features import FeatureBackbone, extract, load_backbone
from .metrics import EvalReport, evaluate, ssim
from .networks import Actor, Builder, Critic, State, count_params
from .tensor import Tensor, no_grad, precision
from .trainer import TrainConfig, TrainLog, Trainer, generate_sequence, load_agent, train

__version__ = "0.1.0"

__all__ = [
    "Actor",
    "AgentParams",
    "Builder",
    "ContractError",
    "Critic",
    "DimensionError",
    "DomainError",
    "EvalReport",
    "FeatureBackbone",
    "FormatError",
    "NumericError",
    "ParameterError",
    "State",
    "StyleRLError",
    "Tensor",
    "TrainConfig",
    "TrainLog",
    "Trainer",
    "count_params",
    "evaluate",
    "extract",
    "generate_sequence",
    "load_agent",
    "load_backbone",
    "no_grad",
    "precision",
    "ssim",
    "train",
]
