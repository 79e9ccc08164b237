"""Tile completion with a conditional progressive GAN, scene growth and sample evaluation.

Submodules: ``tile_store`` (tiling and datasets), ``synthetic_scenes``
(procedural flood scenes), ``wae`` (conditioning auto-encoders), ``cpgan``
(generator, critics, training), ``completion`` (scene growth),
``evaluation`` (clusters, SSIM tables, segmentation oracle) and ``cli``.
"""
from .errors import ConfigError, DatasetError, InputError, MissingArtifactError, StateError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DatasetError", "InputError", "MissingArtifactError", "StateError",
           "__version__"]
