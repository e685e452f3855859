"""Function space distance estimation from compact parametric summaries."""
from .errors import CorruptFileError, FsdError, InputError, NumericError, VersionError
from .estimators import (FsdEstimate, bgln_d_fsd, bgln_s_conv_fsd, bgln_s_fsd, classwise_fsd,
                         empirical_fsd, estimate, estimate_fisher_diag, fsd_grad, laftr_fsd,
                         ntk_fsd, taylor_fsd_diag)
from .net import NetworkParams, backward, forward, init_params, jvp, mlp_params
from .summaries import TaskSummary, build_summary, fit_moments, load_summary, save_summary

__all__ = [
    "CorruptFileError", "FsdError", "InputError", "NumericError", "VersionError",
    "FsdEstimate", "bgln_d_fsd", "bgln_s_conv_fsd", "bgln_s_fsd", "classwise_fsd",
    "empirical_fsd", "estimate", "estimate_fisher_diag", "fsd_grad", "laftr_fsd", "ntk_fsd",
    "taylor_fsd_diag", "NetworkParams", "backward", "forward", "init_params", "jvp",
    "mlp_params", "TaskSummary", "build_summary", "fit_moments", "load_summary", "save_summary",
]
__version__ = "0.1.0"
