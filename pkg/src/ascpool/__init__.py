"""Acoustic scene classification method pool.

Augmentation (mixup, random erasing), cyclic learning rates, group-exclusive
K-fold ensembles, pseudo-labeling, spectrogram preprocessing, a GMM/KL split
balancer and a public/private leaderboard harness.
"""

__version__ = "0.1.0"
