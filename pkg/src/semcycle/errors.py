"""Exception hierarchy. Each class carries a short category used by the CLI."""


class SemCycleError(Exception):
    category = "error"


class DatasetStructureError(SemCycleError):
    category = "dataset-structure"


class DatasetValidationError(SemCycleError, ValueError):
    category = "dataset-invalid"


class ConfigNotFoundError(SemCycleError, FileNotFoundError):
    category = "config-not-found"


class ConfigValueError(SemCycleError, ValueError):
    category = "config-invalid"


class MissingInputError(SemCycleError, FileNotFoundError):
    category = "missing-input"


class SnapshotError(SemCycleError):
    category = "snapshot-invalid"


class SpecMismatchError(SnapshotError):
    category = "spec-mismatch"


class NonFiniteLossError(SemCycleError, ValueError):
    category = "non-finite-loss"

    def __init__(self, term, step=None):
        self.term = term
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite value in loss term '{term}'{where}")
