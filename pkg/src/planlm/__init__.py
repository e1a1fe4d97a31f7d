"""Sentence-level action planning for byte-level language models.

A planner predicts a discrete action label for each upcoming sentence; the
language model is conditioned on that prediction through adapters. The package
covers data preparation, action clustering, training regimes, evaluation and
probing, all on a small numpy autodiff core.
"""

from .actions import ActionVocabulary, SentenceEncoder, cluster_corpus, fit_kmeans, lloyd
from .checkpoint import Checkpoint
from .condlm import ConditionedLM, ConditioningMode, conditioning_weights
from .config import ExperimentConfig
from .corpus import SegmentedCorpus, segment, synthetic_texts
from .evaluation import (
    EvalReport, HmmCritic, edit_distance, edit_distance_norm, fit_hmm, generate, latent_perplexity,
    perplexity, plan_matching_accuracy, rouge2_f1,
)
from .experiment import Experiment, run_experiment
from .planner import PlannerModel, evaluate_nap, pretrain_planner
from .probe import ProbeReport, ProbeSpec, run_probes, train_probe
from .tensor import Tape, Tensor, no_grad
from .trainer import JointTrainer, TrainingSchedule, UnfreezePolicy, mix_actions

__version__ = "0.1.0"
