"""Contactless fingerprint sample quality toolkit.

Block-based quality features over pre-processed finger images, a
retrainable random-forest score in [0, 100], a Canny-based sharpness
baseline, a synthetic training-data generator, and EDC/DET predictive-power
evaluation.
"""

__version__ = "0.1.0"
