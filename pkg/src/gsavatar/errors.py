"""Exception types shared across the pipeline."""


class DegenerateCovarianceError(ValueError):
    """Covariance matrix is singular or otherwise not positive definite."""


class DegenerateSkinningError(ValueError):
    """Blended skinning transform has a singular or reflecting linear part."""


class ConfigurationError(ValueError):
    """Scene, grid, camera, or config-file setup is invalid."""


class ContractError(ValueError):
    """Caller violated an API contract (shape, ordering, mask, or aux mismatch)."""
