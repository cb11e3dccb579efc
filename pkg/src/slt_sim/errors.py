"""Exception types shared across the simulator."""


class SimError(Exception):
    """Base class for all simulator errors."""


class TopologyError(SimError):
    pass


class ShapeError(SimError):
    """Tensor shape disagrees with what a block expects."""

    def __init__(self, block, expected, actual):
        self.block = block
        self.expected = tuple(expected)
        self.actual = tuple(actual)
        super().__init__(f"block {block}: expected shape {self.expected}, got {self.actual}")


class UsageError(SimError):
    pass


class NonFiniteGradientError(SimError):
    def __init__(self, block, key):
        self.block = block
        self.key = key
        super().__init__(f"non-finite gradient in block {block} ({key})")


class SubsetError(SimError):
    pass


class PlanningError(SimError):
    pass


class InfeasibleBudgetError(PlanningError):
    def __init__(self, message, minimal_bytes):
        self.minimal_bytes = minimal_bytes
        super().__init__(f"{message}; minimal achievable memory is {minimal_bytes} bytes")


class IdxParseError(SimError):
    def __init__(self, offset, message):
        self.offset = offset
        super().__init__(f"IDX parse error at byte {offset}: {message}")


class ConfigError(SimError):
    """Invalid experiment configuration; ``path`` names the offending field."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")


class RoundError(SimError):
    """A failure inside an FL round; ``round`` and ``__cause__`` carry the context."""

    def __init__(self, round_, cause):
        self.round = round_
        super().__init__(f"round {round_}: {type(cause).__name__}: {cause}")
