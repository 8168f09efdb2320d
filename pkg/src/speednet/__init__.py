"""Dilated-involution U-Net for colorectal histopathology segmentation, in numpy.

Every operator has a hand-written backward; there is no autograd tape.
"""
from speednet.model import SpeedNet, SpeedNetConfig, build, count_parameters, toy_config

__all__ = ["SpeedNet", "SpeedNetConfig", "build", "count_parameters", "toy_config"]
__version__ = "0.1.0"
