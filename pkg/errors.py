class ShadowforgeError(Exception):
    """Base class for every error raised by the pipeline."""


class InvalidInputError(ShadowforgeError, ValueError):
    pass


class ConfigError(ShadowforgeError):
    pass


class RegistryError(ShadowforgeError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ChecksumError(ShadowforgeError):
    pass


class GenerationError(ShadowforgeError):
    """A generation request failed after all retries."""

    def __init__(self, message, request=None):
        super().__init__(message)
        self.request = request


class BudgetExhaustedError(ShadowforgeError):
    """A query would push the ledger past its budget. Nothing was debited."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class BudgetExceededError(ShadowforgeError):
    """A sweep cycle ended with more queries used than its budget allows."""

    def __init__(self, message, ledger_dump=None):
        super().__init__(message)
        self.ledger_dump = ledger_dump or {}


class DegenerateReportError(ShadowforgeError):
    pass


class StartupError(ShadowforgeError):
    pass
