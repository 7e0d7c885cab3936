"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor operands have incompatible shapes."""


class GraphError(ValueError):
    """A model graph is malformed or an operation refers to missing filters."""


class DataFormatError(ValueError):
    """A dataset file does not follow its declared binary format."""


class ConfigError(ValueError):
    """A run configuration is invalid or incomplete."""


class ContractError(RuntimeError):
    """A caller violated a freeze/trainability precondition."""


class BudgetError(RuntimeError):
    """A pruning budget cannot be met without violating the per-layer filter guard."""
