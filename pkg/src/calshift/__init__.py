"""Calibrated binary detectors, uncertainty metrics, and dataset-shift stress tests."""

__version__ = "0.1.0"

from .dataset import LabeledDataset, SplitData, split_dataset
from .nncore import (
    BayesianDenseLayer,
    DenseLayer,
    DropoutSpec,
    Model,
    TrainConfig,
    bce_loss,
    forward,
    grad_check,
    kl_gaussian,
    train,
)
from .calib import (
    CalibratedDetector,
    PredictiveSample,
    decide,
    fit_ensemble_weights,
    fit_temperature,
    point_scores,
    predict,
    predict_dataset,
    train_detector,
)
from .metrics import (
    BinStats,
    MetricReport,
    bin_stats,
    bnll,
    bbse,
    bse,
    detection_metrics,
    ece,
    entropy,
    kl_disagreement,
    metric_report,
    nll,
    sd,
    uece,
)
from .evalkit import (
    ConfidenceInterval,
    ReferralCurve,
    bootstrap_ci,
    default_tau_grid,
    entropy_histogram,
    referral_curve,
    reliability_data,
)
from .shiftlab import (
    AttackBudget,
    GeneratorConfig,
    attack_best_of,
    attack_greedy_flip,
    attack_mimicry,
    gen_dataset,
    gen_out_of_source,
    gen_temporal,
)
