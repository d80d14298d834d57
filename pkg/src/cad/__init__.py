"""Compress-align-detect: learned compression, homography registration and
temporally invariant change detection for onboard image pipelines."""

__version__ = "0.1.0"
