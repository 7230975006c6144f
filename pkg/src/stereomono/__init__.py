"""Mono/stereo depth fusion and stereo self-calibration."""
