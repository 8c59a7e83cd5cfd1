"""Topology-informed ECG electrode localization from sparse torso contours."""

__version__ = "0.1.0"
