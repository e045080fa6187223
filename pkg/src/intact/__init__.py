"""Noise-tolerant point-cloud training with a meta-taught teacher, a
saliency-guided adversarial curriculum for the student, and a LiDAR
power/energy budget calculator that maps energy deficits to perturbation
severities."""

__version__ = "0.1.0"
