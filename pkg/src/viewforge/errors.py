"""Exception taxonomy shared across the package.

Every viewforge error derives from ViewforgeError so callers can catch the
whole family; the CLI maps them onto its exit-code contract (1 for run
failures, 2 for usage/config problems).
"""


class ViewforgeError(Exception):
    """Base class for all viewforge errors."""


# --- packed dataset container ---------------------------------------------

class EmptyDataset(ViewforgeError):
    """pack_dataset was given no samples."""


class ShapeMismatch(ViewforgeError):
    """Image shapes are inconsistent with what the operation requires."""


class IoError(ViewforgeError):
    """A read or write against the packed file failed at the OS level."""


class FormatError(ViewforgeError):
    """The file is not a packed dataset (bad magic or unsupported version)."""


class CorruptFile(ViewforgeError):
    """Structural damage: truncated descriptor table or header."""


class CorruptSample(ViewforgeError):
    """A single sample failed its checksum or bounds check."""


# --- loader -----------------------------------------------------------------

class SampleReadError(ViewforgeError):
    """A worker failed while producing a sample; carries the sample index."""

    def __init__(self, sample_index: int, cause: str):
        super().__init__(f"sample {sample_index}: {cause}")
        self.sample_index = sample_index
        self.cause = cause

    def __reduce__(self):  # survives the worker -> coordinator pickle hop
        return (SampleReadError, (self.sample_index, self.cause))


# --- losses ------------------------------------------------------------------

class InvalidParam(ViewforgeError):
    """A hyperparameter or stage parameter violates its declared range."""


class DegenerateEmbedding(ViewforgeError):
    """Zero-norm row or zero-variance column where the loss needs a direction."""


class InsufficientBatch(ViewforgeError):
    """Fewer rows than the loss can be evaluated on (N < 2)."""


class EmptyRelation(ViewforgeError):
    """Relation matrix has no nonzero entries."""


# --- model / probes -----------------------------------------------------------

class StaleTape(ViewforgeError):
    """backward was called without a fresh forward tape."""


class ViewCountMismatch(ViewforgeError):
    """The batch does not carry the number of views the method requires."""


class InvalidLabel(ViewforgeError):
    """A class label is outside [0, num_classes)."""


class EmptyInput(ViewforgeError):
    """An operation that needs data received an empty table."""


# --- harness -------------------------------------------------------------------

class NanLoss(ViewforgeError):
    """Training produced a non-finite loss; the run is aborted with diagnostics."""


class ExitEmpty(ViewforgeError):
    """A report was requested over a directory containing no runs."""


class ConfigError(ViewforgeError):
    """The harness config file is malformed or missing required keys."""
