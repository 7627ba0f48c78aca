"""Exception types shared across the package."""


class AvatarError(Exception):
    """Base class for all package errors."""


class InvalidArgument(AvatarError, ValueError):
    pass


class BehindCameraError(AvatarError, ValueError):
    pass


class DegenerateTriangleError(AvatarError, ValueError):
    pass


class EmptyAtlasError(AvatarError, ValueError):
    pass


class ModelFormatError(AvatarError, ValueError):
    """Raised by the model loader; ``section`` names the offending array."""

    def __init__(self, section: str, message: str):
        super().__init__(f"[{section}] {message}")
        self.section = section


class OptimizationFailure(AvatarError, RuntimeError):
    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration
