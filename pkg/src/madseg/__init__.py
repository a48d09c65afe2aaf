"""Memory-augmented surface-defect segmentation.

Self-supervised anomaly simulation, a memory-augmented segmentation network,
and an ensemble pseudo-labeling committee, trained jointly on defect-free
images plus synthetic anomalies; served over HTTP with a thin CLI client.
"""

__version__ = "0.1.0"
