"""Multi-level deep ensemble for skin-lesion classification.

Four classifier branches see the same image at four scales (whole image plus
three center-crop ROIs); their positive-class probabilities are fused by a
learnable convex combination trained end-to-end. The seven-way diagnosis
problem is handled as seven one-vs-rest binary models ranked by mean AUC.
"""

__version__ = "0.1.0"
