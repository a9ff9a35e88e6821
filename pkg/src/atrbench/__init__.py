"""atrbench: batch evaluation engine for audio-text retrieval.

The package operates on precomputed embeddings only; no audio decoding
or model inference happens here. Subpackages:

- embedstore: binary embedding container + dataset manifests
- simrank:    exact cosine scoring and deterministic ranking
- metrics:    discrimination and recall metrics over rank outcomes
- hnmine:     four-stage hard-negative mining pipeline
- leakage:    train/eval contamination detection
- trainer:    projection-head contrastive trainer
- uiqtools:   unified-instruction-query validation and statistics
- harness:    batch evaluation runs, report rendering, CLI
"""

__version__ = "0.1.0"

from .errors import BenchError, ConfigError, FormatError, ManifestError

__all__ = [
    "BenchError",
    "ConfigError",
    "FormatError",
    "ManifestError",
    "__version__",
]
