"""Exception hierarchy shared by the toolkit.

The CLI maps these to process exit codes; see mlde.cli.
"""


class MldeError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(MldeError):
    """Invalid run configuration.

    Carries the full list of violations so the CLI can report every
    problem at once instead of failing on the first.
    """

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class DataError(MldeError):
    """Problem with input data (manifests, images, weight files)."""


class ManifestError(DataError):
    """Malformed or inconsistent dataset manifest."""


class CheckpointError(DataError):
    """Unreadable, corrupt, or incompatible checkpoint."""


class ConfigMismatchError(CheckpointError):
    """Checkpoint was produced under a different configuration."""


class TrainingError(MldeError):
    """Training failed (non-finite loss, unusable task, ...)."""


class EvaluationError(MldeError):
    """Evaluation failed (undefined AUC, missing models, ...)."""
