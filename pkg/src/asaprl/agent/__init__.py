"""Skill-space maximum-entropy RL with expert priors."""

from .config import PRIOR_MODES, TrainConfig, rng_stream, stream_seeds
from .pretrain import (
    PretrainArtifacts,
    SkillTransition,
    collect_skill_rollouts,
    load_pretrained,
    pretrain_actor,
    pretrain_critic,
    pretrain_pipeline,
    save_pretrained,
)
from .replay import Batch, ReplayBuffer
from .sac import SacLearner, TrainingDiverged
from .train import CURVE_FIELDS, evaluate, first_reaching, read_curve, train, write_curve

__all__ = [
    "PRIOR_MODES", "TrainConfig", "rng_stream", "stream_seeds",
    "PretrainArtifacts", "SkillTransition", "collect_skill_rollouts", "load_pretrained",
    "pretrain_actor", "pretrain_critic", "pretrain_pipeline", "save_pretrained",
    "Batch", "ReplayBuffer", "SacLearner", "TrainingDiverged",
    "CURVE_FIELDS", "evaluate", "first_reaching", "read_curve", "train", "write_curve",
]
