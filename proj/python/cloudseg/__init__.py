"""Cloud segmentation of multispectral rasters."""

from ._cloudseg import (
    CloudsegError,
    FormatError,
    GenerationError,
    IoError,
    Network,
    NumericError,
    ValidationError,
    compute_metrics,
    format_report,
    generate_scene,
    plan_windows,
    read_msr,
    write_msr,
)

__all__ = [
    "CloudsegError",
    "FormatError",
    "GenerationError",
    "IoError",
    "Network",
    "NumericError",
    "ValidationError",
    "compute_metrics",
    "format_report",
    "generate_scene",
    "plan_windows",
    "read_msr",
    "write_msr",
]
