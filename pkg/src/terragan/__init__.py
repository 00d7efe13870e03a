"""Procedural 3D terrain from adversarially trained models.

Submodules:
  tensor    dense tensors, reverse-mode gradients, deterministic RNG
  optim     parameters and update rules (SGD, Adam)
  gradcheck finite-difference verification of tape gradients
  nn        parameterized convolution layers
  gan       adversarial losses and the alternating training loop
  progan    progressive-growing texture generator
  pix2pix   conditional image-to-image translation (U-Net + patch critic)
  geodata   raster ingestion, tiling, paired dataset construction
  terrain   gradient noise, latent interpolation, heightfield meshing
  synthetic deterministic toy data for demos and training checks
  cli       command-line pipeline driver
"""

from . import errors
from .tensor import Rng, Tensor, no_grad

__version__ = "0.1.0"
