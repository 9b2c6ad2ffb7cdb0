"""Dense ViT patch-feature exporter writing the FMAP binary format."""

from .export import (
    DEFAULT_MODEL,
    DEFAULT_SHORT_SIDE,
    ExportConfig,
    ExportError,
    ExportResult,
    WeightsUnavailableError,
    export_batch,
    export_features,
    export_pair,
)

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_MODEL",
    "DEFAULT_SHORT_SIDE",
    "ExportConfig",
    "ExportError",
    "ExportResult",
    "WeightsUnavailableError",
    "export_batch",
    "export_features",
    "export_pair",
    "__version__",
]
