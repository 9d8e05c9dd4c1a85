class TraceGPError(Exception):
    """Base error; carries the process exit code used by the CLI"""
    exit_code = 1


class ConfigError(TraceGPError):
    """Invalid usage or experiment configuration"""
    exit_code = 1


class DataError(TraceGPError):
    """Malformed input files or inputs violating a documented invariant"""
    exit_code = 2


class NumericalError(TraceGPError):
    """Numerical failure: non-PSD kernel, factorization failure after jitter"""
    exit_code = 3
