"""Attribute-agnostic debiasing for dual-encoder contrastive training on feature vectors."""
from .autodiff import Node, ParamStore, backward, grad_vector
from .cluster import ClusterAssignment, cluster_report, kmeans
from .data import (
    Dataset,
    GroupSpec,
    PairedBatch,
    Record,
    SyntheticSpec,
    TrainingSet,
    augment,
    bias_preset,
    make_batch,
    gen_synthetic,
    hash_featurize,
    load_jsonl,
    save_jsonl,
    split,
    strip_attributes,
    synthetic_prompts,
)
from .experiment import DirectionalResult, directional_experiment
from .losses import LossBreakdown, clip_loss, ctr_loss, topk_clip_loss, topk_relax
from .metrics import FairnessReport, ScoredPredictions, auc, eod, es_auc, fairness_report, groupwise_auc
from .model import DualEncoder, EncoderConfig, PromptSet, load_checkpoint, save_checkpoint, zero_shot_predict
from .reweight import WeightVector, alignment_weights, debiased_objective, normalize_weights
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"
