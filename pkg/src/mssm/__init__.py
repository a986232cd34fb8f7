"""Time series clustering with mixtures of general state space models.

Subpackages:
  diffcore    reverse-mode autodiff over a fixed op set + seeded sampling
  ssm         model definitions, densities, parameter transforms, mixtures
  varpost     amortized variational posterior (encoder, flows, classifier)
  trainer     mixture ELBO, entropy annealing, SGD training protocol
  modelselect BIC computation and cluster-count sweeps
  datagen     benchmark dataset generators and the dataset file format
  cli         command-line entry point, run configuration, checkpoints
"""

from . import cli, datagen, diffcore, modelselect, ssm, trainer, varpost

__all__ = ["cli", "datagen", "diffcore", "modelselect", "ssm", "trainer", "varpost"]
__version__ = "0.1.0"
