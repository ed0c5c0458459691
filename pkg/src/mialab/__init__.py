"""Membership-inference attacks and defenses on a small numpy MLP engine."""

from .attack import (
    AttackClassifier,
    AttackReport,
    ConfidenceRecord,
    LabelOnlyConfig,
    ThresholdRule,
    calibrate_threshold,
    collect_confidences,
    evaluate_attack,
    label_consistency,
    label_only_attack,
    threshold_attack,
    train_attack_classifier,
)
from .data import BlobSpec, Dataset, SplitPlan, SplitSizes, load_mnist_idx, make_blobs, make_split
from .defense import (
    AdaMixup,
    ClippedNoisy,
    Dropout,
    L1,
    L2,
    LambdaSchedule,
    NoDefense,
    StandardMixup,
    adamix_label,
    adamixup_batch,
    clipped_noisy_gradient,
    lambda_at,
    mix_pair,
    standard_mixup_batch,
)
from .harness import ExperimentConfig, ExperimentReport, emit_report, run_comparison, run_experiment
from .numerics import MlpModel, adam_step, backward, forward, gradient_check, softmax_cross_entropy

__version__ = "0.1.0"
