"""
PIPELINE ERROR HIERARCHY
Every failure the pipeline can report, with the process exit code it maps to.

Exit codes:
1. Configuration / parameter problems
2. Data problems (files, shapes, degenerate volumes)
3. Numeric problems (non-finite values, diverging training)
"""


class VSSLError(Exception):
    """Root of all pipeline errors"""
    exit_code = 1


# =================================================================
# CONFIGURATION & PARAMETERS (exit 1)
# =================================================================
class ConfigError(VSSLError):
    exit_code = 1


class ParameterError(VSSLError):
    """Operation parameter outside its declared range"""
    exit_code = 1


# =================================================================
# DATA (exit 2)
# =================================================================
class DataError(VSSLError):
    exit_code = 2


class FormatError(DataError):
    """Volume, label or checkpoint file does not match its header"""


class DimensionError(DataError):
    """Shapes disagree or an extent is not divisible as required"""


class SpecError(DataError):
    """Infeasible phantom spec or checkpoint/network mismatch"""


class DegenerateInputError(DataError):
    """No foreground voxel to work with"""


# =================================================================
# NUMERICS (exit 3)
# =================================================================
class NumericError(VSSLError):
    exit_code = 3


class DivergenceError(NumericError):
    """Training loss went NaN/Inf"""

    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
