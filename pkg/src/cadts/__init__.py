"""cadts: conflict-aware multivariate time-series anomaly detection.

Convolutional experts fused per metric by a personalized & shared gate,
per-metric tower heads, a self-contained reverse-mode training core, and
the point-adjustment evaluation protocol (raw / PA / k-th PA, best-F1,
multi-entity aggregation).
"""

__version__ = "0.1.0"
