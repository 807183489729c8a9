"""Data-free image synthesis engine (C++ core)."""

from ._ddis import (
    Bundle,
    DdisError,
    frechet_distance,
    generate_dataset,
    list_records,
    oracle_check,
    run_cli,
    schedule,
    shape_classes,
)

__all__ = [
    "Bundle",
    "DdisError",
    "frechet_distance",
    "generate_dataset",
    "list_records",
    "oracle_check",
    "run_cli",
    "schedule",
    "shape_classes",
]
