"""Divide-and-conquer balancing and classification of whole-slide-image patches.

Patches are split into tumor patches of cancerous slides (A), benign patches of
cancerous slides (B) and patches of benign slides (C). B and C are clustered,
undersampled to the size of A by divergence-stratified sampling, and three
binary classifiers (A vs B, A vs C, A vs B+C) are fused by a meta-classifier.
"""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    AnnotationRegion,
    Manifest,
    Partition,
    PatchRecord,
    SlideRecord,
    load_manifest,
    save_manifest,
)
from .exceptions import (  # noqa: E402
    ConfigError,
    DataError,
    InfeasibleError,
    PatchBalanceError,
)

__all__ = [
    "AnnotationRegion", "Manifest", "Partition", "PatchRecord", "SlideRecord",
    "load_manifest", "save_manifest",
    "ConfigError", "DataError", "InfeasibleError", "PatchBalanceError",
    "__version__",
]
