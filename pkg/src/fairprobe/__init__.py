"""Attribute-equalization fairness audits for face verification."""

from fairprobe.domain import (
    AnnotationTable,
    ComparisonPolicy,
    ComparisonStore,
    DataError,
    load_annotations,
    load_comparisons,
    save_comparisons,
    generate_comparisons,
)
from fairprobe.metrics import EvalResult, OperatingPoint
from fairprobe.equalize import Assignment, Combination, SamplingParams

__version__ = "0.1.0"

__all__ = [
    "AnnotationTable",
    "Assignment",
    "Combination",
    "ComparisonPolicy",
    "ComparisonStore",
    "DataError",
    "EvalResult",
    "OperatingPoint",
    "SamplingParams",
    "generate_comparisons",
    "load_annotations",
    "load_comparisons",
    "save_comparisons",
]
