"""Contrastive explanation toolkit for small dense image classifiers.

Generates counterfactual and semi-factual explanation images by modelling
per-class latent feature statistics with hurdle distributions, replacing the
statistically exceptional features of a test image with their expected
values, and rendering the result through a trained generator.
"""

__version__ = "0.1.0"
