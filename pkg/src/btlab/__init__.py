"""Noisy-label workbench: synthetic oracle benchmarks, threshold distillation,
per-instance transition-matrix estimation, and forward-corrected training."""

from .classifier import (
    Checkpoint,
    RevisionResult,
    TrainRunConfig,
    finetune_revision,
    forward_corrected_risk,
    select_model,
    split_validation,
    train_classifier,
)
from .config import CONFIG_SCHEMA, DEFAULTS, ExperimentConfig, derive_seed
from .data import (
    GaussianMixtureSpec,
    LabeledDataset,
    NoiseGenConfig,
    generate_mixture,
    generating_transition_matrices,
    inject_idn_noise,
    load_dataset_csv,
    mixture_posteriors,
    oracle_clean_posterior,
    oracle_noisy_posteriors,
    sample_truncated_normal,
    save_dataset_csv,
)
from .distill import (
    DistillConfig,
    DistilledSet,
    DistillQuality,
    collect_distilled,
    distill_quality,
    load_distilled_csv,
    save_distilled_csv,
    warmup_train,
)
from .estimators import (
    DistilledTransitionClassifier,
    FeedforwardClassifier,
    ForwardCorrectedClassifier,
    TransitionMatrixNet,
)
from .exceptions import (
    BtlabError,
    ConfigError,
    InputError,
    NumericError,
    ParseError,
    PipelineError,
    SingularMatrixError,
)
from .metrics import (
    MetricsReport,
    accuracy_vs_bayes,
    accuracy_vs_clean,
    bayes_accuracy_vs_clean,
    estimate_class_transition,
    run_comparison,
    run_seed,
    transition_row_l1,
)
from .nn import (
    Batch,
    Gradients,
    NetworkParams,
    OptimizerState,
    cross_entropy,
    forward_probs,
    grad_params,
    init_params,
    load_checkpoint,
    one_hot,
    optimizer_step,
    save_checkpoint,
    softmax,
)
from .transition import (
    TransitionTrainConfig,
    invert_posterior,
    revise_matrix,
    train_transition,
    transition_forward,
    transition_matrices,
    transition_risk,
)

__version__ = "0.1.0"
