"""Batch-level latent augmentation: degrade latents with the batch context,
restore them by cross-attending to the originals, and train the classifier
on all three views.  Ships with its own small autodiff engine, synthetic
multi-domain / long-tailed data generators, representation metrics, and a
reproducible experiment harness.
"""

__version__ = "0.1.0"
