"""Exception types shared across the package."""


class LsebmError(Exception):
    """Base class for all package errors."""


class InvalidShape(LsebmError):
    pass


class NonFiniteInput(LsebmError):
    pass


class DetachedTensor(LsebmError):
    pass


class NonFiniteGradient(LsebmError):
    pass


class ChainDiverged(LsebmError):
    def __init__(self, chain_index, iteration, message=None):
        self.chain_index = chain_index
        self.iteration = iteration
        super().__init__(
            message
            or f"Langevin chain {chain_index} diverged at step {iteration}"
        )


class InvalidBatch(LsebmError):
    pass


class InvalidLabel(LsebmError):
    pass


class InvalidInput(LsebmError):
    pass


class InsufficientLabels(LsebmError):
    pass


class ParseError(LsebmError):
    def __init__(self, line, column=None, message=None):
        self.line = line
        self.column = column
        loc = f"line {line}" + (f", column {column}" if column is not None else "")
        super().__init__(message or f"parse error at {loc}")


class UnsupportedDimension(LsebmError):
    pass


class NonDeterministicLoss(LsebmError):
    pass


class ConfigError(LsebmError):
    pass


class CheckpointError(LsebmError):
    pass
