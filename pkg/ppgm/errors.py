"""
Exception hierarchy for the ppgm toolkit.

Every error carries keyword context (node index, path index, outer step, ...)
so the CLI can log it as structured fields instead of parsing the message.
"""


class PpgmError(Exception):
    def __init__(self, message, **context):
        super().__init__(message)
        self.message = message
        self.context = context

    def __str__(self):
        if not self.context:
            return self.message
        details = ", ".join(f"{key}={value}" for key, value in self.context.items())
        return f"{self.message} ({details})"


class SpecificationError(PpgmError):
    """Invalid problem data: bad dimensions, non-finite entries, singular solves."""


class NumericError(PpgmError):
    """Non-finite values or blow-up during integration or simulation."""


class SingularRiccatiError(NumericError):
    """R + D'aD stopped being invertible while integrating the Riccati equation."""


class DivergenceError(PpgmError):
    pass


class TrainingDivergenceError(DivergenceError):
    def __init__(self, message, k, sub_step, **context):
        super().__init__(message, k=k, sub_step=sub_step, **context)
        self.k = k
        self.sub_step = sub_step


class UsageError(PpgmError):
    pass


class ConfigError(PpgmError):
    def __init__(self, message, field_errors=None, **context):
        super().__init__(message, **context)
        self.field_errors = field_errors or []

    def __str__(self):
        if not self.field_errors:
            return super().__str__()
        lines = [super().__str__()]
        lines.extend(f"  {path}: {reason}" for path, reason in self.field_errors)
        return "\n".join(lines)
