"""marrowbench: consensus labels, cohort splits, detection/classification metrics,
hierarchical BCa bootstrap intervals and gradient-boosted leukemia diagnosis."""

__version__ = "0.1.0"
