from __future__ import annotations


class InvalidInputError(ValueError):
    """Raised when an operation receives arguments violating its preconditions."""


class ConfigError(InvalidInputError):
    """Raised for invalid configuration values, unknown keys or unusable paths."""


class CheckpointMismatchError(InvalidInputError):
    """
    Raised when checkpoint tensors do not fit the target network.

    :param problems: one line per missing key, unexpected key or shape mismatch

    """

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__(
            "Checkpoint does not match the network architecture:\n  "
            + "\n  ".join(problems)
        )
