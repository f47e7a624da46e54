"""Exception hierarchy shared by every module.

The CLI maps each class onto an exit code, so raise the most specific one.
"""


class TficonError(Exception):
    exit_code = 1


class ConfigError(TficonError, ValueError):
    """Invalid configuration value or out-of-range parameter."""

    exit_code = 1


class InputError(TficonError, ValueError):
    """Unreadable, missing or malformed user input (images, masks, dumps)."""

    exit_code = 1


class NumericalError(TficonError, ArithmeticError):
    """Non-finite values produced during integration."""

    exit_code = 2

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ContractError(TficonError):
    """An interface precondition was violated (shapes, mask containment, records)."""

    exit_code = 3


class StepError(TficonError):
    """Wraps a failure raised by a step hook, keeping the step index."""

    def __init__(self, step, cause):
        super().__init__(f"hook failed at step {step}: {cause}")
        self.step = step
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
