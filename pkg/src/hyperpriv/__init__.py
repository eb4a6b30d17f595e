"""Privileged-information hypergraph distillation on synthetic survival cohorts.

A teacher network sees the full patient hypergraph (imaging, clinical, text and
concept nodes); a student sharing the same parameters sees a severed topology
with the privileged modalities removed.  The package covers cohort synthesis,
hypergraph construction, contrastive pretraining, the shared-parameter model,
distillation losses, training orchestration, censored-survival evaluation and a
command line interface.
"""

from .cohort import GenConfig, PatientRecord, Cohort, generate_cohort, load_cohort, save_cohort
from .hypergraph import (
    EdgeKind,
    NodeIndex,
    Hyperedge,
    HypergraphTopology,
    SeveredView,
    IncidenceStructure,
    assemble_teacher,
    assemble_student,
    sever,
    incidence,
)
from .encoder import ContrastiveRefiner, augment, info_nce_loss, pretrain_cohort
from .model import ModelDims, SharedEncoder, ForwardOutput, forward, hgnn_layer, gated_attention
from .losses import (
    LossConfig,
    LossBreakdown,
    cross_entropy,
    cox_nll,
    feature_distill,
    logit_distill,
    total_loss,
)
from .metrics import (
    KMTable,
    LogRankResult,
    EvalReport,
    accuracy,
    c_index,
    kaplan_meier,
    log_rank,
    chi_square_p_value,
    stratify_median,
)
from .train import TrainConfig, TrainState, SeveredGraphDistiller, fit

__version__ = "0.1.0"

__all__ = [
    "GenConfig",
    "PatientRecord",
    "Cohort",
    "generate_cohort",
    "load_cohort",
    "save_cohort",
    "EdgeKind",
    "NodeIndex",
    "Hyperedge",
    "HypergraphTopology",
    "SeveredView",
    "IncidenceStructure",
    "assemble_teacher",
    "assemble_student",
    "sever",
    "incidence",
    "ContrastiveRefiner",
    "augment",
    "info_nce_loss",
    "pretrain_cohort",
    "ModelDims",
    "SharedEncoder",
    "ForwardOutput",
    "forward",
    "hgnn_layer",
    "gated_attention",
    "LossConfig",
    "LossBreakdown",
    "cross_entropy",
    "cox_nll",
    "feature_distill",
    "logit_distill",
    "total_loss",
    "KMTable",
    "LogRankResult",
    "EvalReport",
    "accuracy",
    "c_index",
    "kaplan_meier",
    "log_rank",
    "chi_square_p_value",
    "stratify_median",
    "TrainConfig",
    "TrainState",
    "SeveredGraphDistiller",
    "fit",
]
