"""Exception hierarchy.

Everything raised on purpose by this package derives from
:class:`SecondOpinionsError`, so callers can catch library failures without
also swallowing programming errors.  Subclasses double as the corresponding
builtin where one exists (``ValueError``, ``KeyError``) so existing generic
handlers keep working.
"""

from __future__ import annotations


class SecondOpinionsError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgumentError(SecondOpinionsError, ValueError):
    """An argument failed validation (shape, range, normalization, ...)."""


class MissingExpertError(SecondOpinionsError, KeyError):
    """An expert id was not found in a partition, model registry, or roster."""

    def __str__(self) -> str:  # KeyError quotes its single arg; keep the message readable
        return Exception.__str__(self)


class InsufficientDataError(SecondOpinionsError):
    """Not enough observations to fit or estimate something."""


class InvalidEdgeError(SecondOpinionsError):
    """An edge references experts that never co-occur on a sample."""


class NotACliqueCoverError(SecondOpinionsError):
    """A partition groups experts that are not pairwise connected in the graph."""


class GraphTooLargeError(SecondOpinionsError):
    """Exact partition search was asked for a graph beyond its size limit."""


class DatasetFormatError(SecondOpinionsError):
    """A dataset file could not be parsed (malformed line, bad shape)."""


class DatasetSchemaError(DatasetFormatError):
    """A dataset file parsed but referenced unknown experts/labels or
    otherwise contradicted its own metadata."""


class EmptyDatasetError(SecondOpinionsError):
    """Filtering removed every sample (or every expert) from a dataset."""
