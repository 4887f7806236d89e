#!/usr/bin/env python3
"""
Exception hierarchy shared by every downscaling service.
"""


class DownscalingError(Exception):
    """Base class for all errors raised by bgldown"""
    pass


class ConfigError(DownscalingError):
    """Run or scenario configuration failed validation"""
    pass


# Gridded I/O
class MalformedHeader(DownscalingError):
    pass


class DimensionMismatch(DownscalingError):
    pass


class NonFiniteValue(DownscalingError):
    pass


class MalformedInput(DownscalingError):
    pass


class IoFailure(DownscalingError):
    pass


# Trend
class EmptyGroup(DownscalingError):
    pass


class GroupMismatch(DownscalingError):
    pass


class OutOfDomain(DownscalingError):
    pass


class MissingNeighbor(DownscalingError):
    pass


# Basis / BGL / prediction
class InvalidRule(DownscalingError):
    pass


class NotPositiveDefinite(DownscalingError):
    pass


class Diverged(DownscalingError):
    pass


class InsufficientData(DownscalingError):
    pass


class SingularSystem(DownscalingError):
    pass


# Metrics
class ShapeMismatch(DownscalingError):
    pass


class WindowTooLarge(DownscalingError):
    pass


class MaskedPixel(DownscalingError):
    pass


# Pipeline
class ModelMissing(DownscalingError):
    pass


class MonthOutOfRange(DownscalingError):
    pass
