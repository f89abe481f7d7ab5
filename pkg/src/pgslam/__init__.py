"""Batch pose-graph SLAM back-end with SGLD-sampled ICP constraints."""

__version__ = "0.1.0"
