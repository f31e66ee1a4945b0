"""Backdoor detection for image classifiers by comparing adversarial bias maps."""

__version__ = "0.1.0"
