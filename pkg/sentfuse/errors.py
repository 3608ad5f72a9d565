"""Exception hierarchy for sentfuse."""
from __future__ import annotations


class SentfuseError(RuntimeError):
    """Base class for every error raised by sentfuse."""


class ContractError(SentfuseError, ValueError):
    """Raised when a caller violates an operation's precondition."""


class DimensionError(ContractError):
    """Raised when tensor shapes do not line up."""

    def __init__(self, message: str, *shapes):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)


class NonFiniteError(SentfuseError, ArithmeticError):
    """Raised when an operation produced NaN or Inf."""


class DegenerateDistributionError(SentfuseError, ArithmeticError):
    """Raised when a softmax slice is masked everywhere (empty attention context)."""


class OracleInvalidError(SentfuseError):
    """Raised when a finite-difference oracle is fed a non-deterministic function."""


class VocabularyError(SentfuseError, ValueError):
    """Raised on unknown token ids or mismatched vocabularies."""


class OversizeSentenceError(SentfuseError, ValueError):
    """Raised when a sentence does not fit the token budget."""

    def __init__(self, index: int, length: int, budget: int):
        super().__init__(f"Sentence {index} has {length} tokens, more than the token budget {budget}")
        self.index = index
        self.length = length
        self.budget = budget


class TrainingDivergenceError(SentfuseError):
    """Raised when the training loss stays far above its starting value."""


class NonFiniteGradientError(NonFiniteError):
    """Raised by the optimizer when a gradient holds NaN or Inf."""

    def __init__(self, parameter: str):
        super().__init__(f"Non-finite gradient for parameter '{parameter}'; step aborted")
        self.parameter = parameter


class CheckpointError(SentfuseError):
    """Raised when a checkpoint file cannot be read or does not match its references."""


class ConfigError(SentfuseError, ValueError):
    """Raised for unknown or invalid configuration values."""
