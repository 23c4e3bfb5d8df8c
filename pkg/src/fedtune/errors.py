"""Exception hierarchy shared by every fedtune module.

Each error carries the CLI exit code it maps to.
"""


class FedTuneError(Exception):
    exit_code = 1


class ConfigError(FedTuneError, ValueError):
    exit_code = 2


class UsageError(FedTuneError, ValueError):
    exit_code = 2


class DataError(FedTuneError, ValueError):
    exit_code = 4


class DecodeError(DataError):
    pass


class AnalysisError(FedTuneError, ValueError):
    exit_code = 2


class ProtocolError(FedTuneError):
    exit_code = 3


class TransportError(ProtocolError):
    pass
