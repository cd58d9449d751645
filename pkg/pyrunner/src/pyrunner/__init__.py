"""In-sandbox test-runner harness for the grading subprocess backend."""

from .harness import main, run_tests

__all__ = ["main", "run_tests"]
