"""Retrieval-augmented Dockerfile refactoring with build measurement."""

from .dockerfile import DockerfileAst, DockerfileSyntaxError, functional_fingerprint, parse, serialize
from .quality import DomainError, build_duration_score, image_size_score
from .refactorings import RefactoringAction, detect_refactorings

__version__ = "0.1.0"

__all__ = [
    "DockerfileAst",
    "DockerfileSyntaxError",
    "DomainError",
    "RefactoringAction",
    "build_duration_score",
    "detect_refactorings",
    "functional_fingerprint",
    "image_size_score",
    "parse",
    "serialize",
]
