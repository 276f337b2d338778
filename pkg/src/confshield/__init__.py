"""Adversarial-perturbation detection for modulation classifiers via K-fold conformal prediction."""

from .attacks import (
    AdversarialDataset,
    AdversarialFrame,
    AttackConfig,
    AttackMethod,
    attack_dataset,
    cw_pgd,
    fgsm,
    pgd,
    psr,
    rescale_to_psr,
)
from .classifier import (
    NetworkParams,
    TrainConfig,
    accuracy,
    forward,
    init_params,
    input_gradient,
    load_model,
    loss,
    predict_proba,
    save_model,
    train,
)
from .conformal import (
    PredictionSet,
    ShieldModel,
    SplitCalibration,
    coverage,
    inefficiency,
    kfold_calibrate,
    kfold_cp_set,
    kfold_cp_sets,
    load_shield,
    ncs,
    quantile_alpha,
    save_shield,
    split_calibrate,
    split_cp_set,
)
from .errors import (
    ConfigurationError,
    DomainError,
    FormatError,
    IntegrityError,
    NumericError,
    ShapeError,
    ShieldError,
    ZeroPerturbationError,
)
from .shield import (
    DetectionReport,
    DetectionThresholds,
    ISSVector,
    SweepResult,
    calibrate_thresholds,
    detect,
    detect_dataset,
    evaluate_sweep,
    iss,
)
from .signal import (
    LABEL_NAMES,
    Dataset,
    GenerationConfig,
    IQFrame,
    ModulationLabel,
    SignalSegment,
    SynthesisConfig,
    load_sigset,
    make_dataset,
    modulate,
    save_sigset,
    slice_segments,
)

__version__ = "0.1.0"
