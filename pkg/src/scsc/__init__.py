"""Stochastic spatial-domain convolutional sparse coding."""

from .applications import ObservationMask, infer_codes, inpaint, reconstruct
from .core import (
    TrainConfig,
    TrainTrace,
    contrast_normalize,
    nonzero_fraction,
    objective,
    psnr,
    rescaled_psnr,
)
from .drivers import StreamSource, train_sbcsc, train_socsc
from .estimators import StochasticBatchCSC, StochasticOnlineCSC
from .filter_update import SurrogateState, update_filters_batch, update_filters_online, update_surrogates
from .lasso import AdmmParams, shrinkage, solve_codes
from .operators import (
    CodeOperator,
    DictOperator,
    SubsampleMask,
    code_adjoint,
    code_apply,
    dict_adjoint,
    dict_apply,
    sample_mask,
    subsample,
    upsample,
)

__version__ = "0.1.0"
