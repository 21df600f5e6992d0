"""Lung-function regression from volumetric chest CT.

A desk-scale pipeline: a minimal reverse-mode tensor engine, CT volume
preprocessing, stochastic augmentation, a 3D-CNN + transformer regressor
for FVC/FEV1, a training loop with best-checkpoint selection, agreement
statistics, and a synthetic phantom cohort with analytic ground truth.
"""

__version__ = "0.1.0"
