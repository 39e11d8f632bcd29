"""Exception types raised by the library.

Plain argument misuse (bad index, negative count, malformed vector) raises
ValueError; the classes below mark failures of a whole operation so callers
can map them to diagnostics or HTTP errors without string matching.
"""


class RangeSketchError(Exception):
    """Base class for all library-specific failures."""


class IngestError(RangeSketchError):
    """CSV or binary input could not be parsed into a dataset."""


class GenerationError(RangeSketchError):
    """Synthetic data generation failed (e.g. rejection rate too low)."""


class TrainingSetError(RangeSketchError):
    """Could not assemble the requested number of labeled queries."""


class TrainingError(RangeSketchError):
    """Model optimization diverged or produced non-finite loss."""


class BuildError(RangeSketchError):
    """Sketch construction failed (partitioning, merging, or leaf training)."""


class FormatError(RangeSketchError):
    """A persisted artifact has a bad magic, version, or truncated body."""


class MetricError(RangeSketchError):
    """A metric is undefined for the given inputs (e.g. all-zero truths)."""


class GridSearchError(RangeSketchError):
    """No configuration in the grid satisfies the stated constraints."""
