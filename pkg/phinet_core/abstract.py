"""
Abstract Component
==================

This module defines the abstract base class shared by the long-lived components of
phinet-core (trainer, evaluator, ablation runner, dataset writer, CLI commands) and
the exception hierarchy used throughout the package.

Every component has a human-readable name and description and gets a terminal logger
and a file logger that are bound to its name, so that every log message it produces
carries a ``module`` key.
"""

from phinet_core.log_utils import TerminalLogger, FileLogger, log_exception


EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2
EXIT_IO = 3


class PhiNetError(Exception):
    """Base class of all errors raised by phinet-core.

    Attributes:
        exit_code (int): The process exit status the CLI reports for this error.
    """

    exit_code = EXIT_USAGE


class ConfigurationError(PhiNetError, ValueError):
    """Raised for shape mismatches, invalid hyper-parameters and infeasible settings."""

    exit_code = EXIT_USAGE


class NumericalError(PhiNetError, ArithmeticError):
    """Raised when an activation or a loss becomes non-finite.

    Attributes:
        where (str): The sub-operation (or encoder block) where the failure happened.
        breakdown (LossBreakdown): Optional loss diagnostic of the failing step.
    """

    exit_code = EXIT_NUMERICAL

    def __init__(self, message, where=None, breakdown=None):
        super().__init__(message if where is None else f"{message} (at {where})")
        self.where = where
        self.breakdown = breakdown


class ProtocolError(PhiNetError):
    """Raised when the evaluation protocol is used incorrectly."""

    exit_code = EXIT_USAGE


class CheckpointError(PhiNetError, OSError):
    """Raised when a checkpoint container is missing, corrupt or of a foreign version."""

    exit_code = EXIT_IO


class AbstractComponent:
    """An abstract component of a phinet-core run.

    Subclasses define ``name`` and ``description`` and get two structured loggers,
    ``terminal_logger`` and ``file_logger``, bound with ``module=self.name()``.
    """

    @staticmethod
    def name():
        """Return the human-readable name of the component.

        Returns:
            str: A string containing the name of the component
        """
        raise NotImplementedError()

    @staticmethod
    def description():
        """Return the human-readable description of the component.

        Returns:
            str: A string containing the description of the component
        """
        raise NotImplementedError()

    def __init__(self, **kwargs):
        self.terminal_logger = TerminalLogger().bind(module=self.name())
        self.file_logger = FileLogger().bind(module=self.name())
        self.file_logger.info("init")

    def log_exception(self, exception):
        """Log the given exception (with traceback) to both loggers."""
        log_exception(component=self, exception=exception)

    def __repr__(self):
        return self.name()
