"""Single-stage visual query localization toolkit.

Given a video and an image crop of an object, locate the most recent
occurrence of that object as a response track (frame range + one box per
frame). The package provides the correspondence model, training loop,
inference post-processing, metrics, and a synthetic data generator.
"""

__version__ = "0.1.0"
