"""Exception hierarchy shared across the toolkit.

CLI exit codes: ConfigError maps to 2, an incomplete measurement to 3,
and any AnalysisError to 4.
"""


class SizeboundError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SizeboundError):
    """Invalid configuration, manifest, template, or credential setup."""


class CorpusError(SizeboundError):
    """A text could not be loaded or normalized into a usable document."""


class StorageError(SizeboundError):
    """The query cache is unreadable or contains a corrupt line."""


class MeasurementError(SizeboundError):
    """Query records are missing or inconsistent for an accuracy cell."""


class ReplayMissError(MeasurementError):
    """A replay-only run hit a key that is not in the cache."""

    def __init__(self, key):
        self.key = key
        super().__init__(f"no cached record for key {key}")


class AssemblyError(MeasurementError):
    """A profile could not be assembled because cells are missing."""

    def __init__(self, model_id, gaps):
        self.model_id = model_id
        self.gaps = [str(g) for g in gaps]
        shown = "; ".join(self.gaps[:8])
        more = "" if len(self.gaps) <= 8 else f" and {len(self.gaps) - 8} more"
        super().__init__(f"cannot assemble profile for {model_id}: {shown}{more}")


class AnalysisError(SizeboundError):
    """Numerical analysis failed (fit, projection, or statistics)."""


class DegenerateDataError(AnalysisError):
    """Input has no usable variance (e.g. identical profile rows)."""


class FitError(AnalysisError):
    """The scaling-law regression is ill-posed."""


class CompatibilityError(AnalysisError):
    """Profiles or fit artifacts have mismatched layouts or dimensions."""


class UndefinedCorrelationError(AnalysisError):
    """A rank correlation is undefined because one ranking has no variance."""
