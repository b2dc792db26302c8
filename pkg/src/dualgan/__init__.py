"""Semi-supervised outlier detection with few identified anomalies.

Dual-GAN and RCC-Dual-GAN detectors, robust continuous clustering, the NNR
and AP training indicators, classic baselines and a benchmark harness.
"""

__version__ = "0.1.0"
