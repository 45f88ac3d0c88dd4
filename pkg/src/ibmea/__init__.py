"""Multi-modal entity alignment with per-modality variational information bottlenecks."""

__version__ = "0.1.0"
