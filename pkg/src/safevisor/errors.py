"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Inconsistent or unsupported configuration (shapes, ranges, options)."""


class ContractError(RuntimeError):
    """A runtime precondition was violated, e.g. an input outside its bounds."""


class ValidationError(ConfigError):
    """Scenario validation failure carrying ``block.field`` locations."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(f"{loc}: {msg}" for loc, msg in self.problems))
