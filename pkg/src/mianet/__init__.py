"""Few-shot segmentation with hierarchical priors and word-embedding prototypes."""

__version__ = "0.1.0"
