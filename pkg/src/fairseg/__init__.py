"""Desk-scale study of training-imbalance bias in image segmentation.

Synthetic group-conditioned cardiac phantoms, five training regimes
(baseline, balanced database, stratified batch sampling, fair
meta-learning, protected-group models), and exact segmentation-fairness
metrics (average DSC, SD, SER) with significance testing.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    ConfigError,
    ContractError,
    DegenerateStatisticsError,
    DivergenceError,
    FairsegError,
    GenerationError,
    GradientError,
    RoutingError,
    StageError,
)
from .metrics import (  # noqa: F401
    FairnessSummary,
    GroupDiceTable,
    classifier_metrics,
    dice,
    fairness_sd,
    fairness_ser,
    subject_average_dsc,
    summarize_fairness,
    unweighted_group_avg,
)
from .phantom import (  # noqa: F401
    DatasetManifest,
    DatasetSpec,
    GeometryConfig,
    GroupAppearance,
    GroupDistribution,
    Sample,
    balanced_subset,
    build_dataset,
    generate_sample,
    load_manifest,
    sample_group,
)
from .stats import ScheffeResult, TTestResult, scheffe_posthoc, welch_ttest  # noqa: F401
from .training import TrainConfig, poly_lr, train_regime  # noqa: F401
