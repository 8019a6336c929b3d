"""Histopathology stain transfer toolkit.

Trains an image-to-image generator that maps patches from an input stain to a
reference stain using perceptual content/style losses plus an adversarial
term, and evaluates the result against a classical color-statistics baseline.
"""

__version__ = "0.1.0"
