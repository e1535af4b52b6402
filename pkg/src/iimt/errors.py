"""Error types shared across the package."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration / missing prerequisite."""


class ContractError(ValueError):
    """An operation was called with arguments violating its contract."""


class NanLossError(RuntimeError):
    """A training loss term became non-finite."""

    def __init__(self, term: str, step: int):
        super().__init__(f"non-finite loss in term '{term}' at step {step}")
        self.term = term
        self.step = step
