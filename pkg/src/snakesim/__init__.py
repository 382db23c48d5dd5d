"""Serpentine layer-wise distributed training simulator with FedAvg and split baselines."""

__version__ = "0.1.0"
