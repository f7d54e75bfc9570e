"""Contraction-mapped softmax losses for training on data of mixed quality."""
from .errors import (
    CMError,
    ConfigError,
    ConsistencyError,
    ContractViolation,
    DegenerateFeatureError,
    DimensionError,
    DivergenceError,
    DomainError,
    FormatError,
    NumericError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from .losses import (
    ClassifierHead,
    ContractionSpec,
    FixedNormSpec,
    LossOutput,
    LossSpec,
    MarginSpec,
    cm_margin_softmax_loss,
    cm_softmax_loss,
    contract,
    contraction_map,
    cosine_logits,
    fixed_margin_loss,
    fixed_norm_loss,
    lower_bound,
    plain_softmax_loss,
    psi,
    softmax_xent,
    upper_bound,
)

__version__ = "0.1.0"
