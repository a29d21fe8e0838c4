"""A 2D selective state-space scan for images, in numpy.

The core is :func:`scan2d_wavefront_forward` and its adjoint
:func:`scan2d_backward`; :class:`Mamba2D` wraps them in a hybrid
convolution/attention classifier trained with a small tape autodiff.
"""
from .errors import (
    ConfigError, ContractError, DimensionError, DomainError, FormatError, M2DError, NumericError,
)
from .nn import Mamba2D, ModelConfig, forward_model, reference_config, tiny_config
from .params import (
    M2DParams, euler_discretize, hippo_init, init_m2d_params, selective_project, zoh_discretize,
)
from .scan1d import Scan1DInput, selective_scan_1d
from .scan2d import (
    Scan2DInput, influence_map, path_sum_coefficient, scan2d, scan2d_backward,
    scan2d_sequential, scan2d_wavefront_forward, wavefront_schedule,
)
from .tensor import Tape, Tensor, backward

__version__ = "0.1.0"
