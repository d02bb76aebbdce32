"""Query-independent quality components of a demonstration score."""


class DomainError(ValueError):
    pass


def _relative_improvement(before: float, after: float, what: str) -> float:
    if before <= 0 or after <= 0:
        raise DomainError(f"{what} must be positive, got before={before!r} after={after!r}")
    return 1.0 - after / before


def image_size_score(before_mb: float, after_mb: float) -> float:
    """Relative image size improvement, ``1 - after/before``.

    Positive when the refactored image is smaller, negative when it grew.
    """
    return _relative_improvement(before_mb, after_mb, "image sizes")


def build_duration_score(before_s: float, after_s: float) -> float:
    """Relative build duration improvement, ``1 - after/before``."""
    return _relative_improvement(before_s, after_s, "build durations")
