"""Deterministic K-party vertical federated learning simulator with
hybrid self-supervised pretraining and a label-inference privacy harness."""

__version__ = "0.1.0"
