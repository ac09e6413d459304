"""Multi-task segmentation + self-supervised depth with gradient scaling,
and the tooling to measure its robustness to input perturbations."""

__version__ = "0.1.0"
