"""Lightweight iris recognition: UNet_xxs segmentation, mixed circle
localization, binary texture codes and biometric evaluation, in numpy."""

from .codec import FilterBank, IrisTemplate, encode, hamming_distance, normalize
from .errors import (ConfigError, Degenerate, Diverged, InputError, IrisError, IrisTooSmall, NotFound,
                     UnusableTemplate)
from .geometry import Circle
from .unet import UNet, UnetXxsConfig, build_unet_xxs, segment

__version__ = "0.1.0"

__all__ = ["FilterBank", "IrisTemplate", "encode", "hamming_distance", "normalize", "ConfigError", "Degenerate",
           "Diverged", "InputError", "IrisError", "IrisTooSmall", "NotFound", "UnusableTemplate", "Circle", "UNet",
           "UnetXxsConfig", "build_unet_xxs", "segment"]
