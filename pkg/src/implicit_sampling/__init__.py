"""Implicit sampling for a Bayesian elliptic inverse problem.

The package estimates a log-normal permeability field from pressure data
by sampling a posterior over Karhunen-Loeve coordinates.  Modules:

``mesh_fem``   P1 finite elements on the unit square
``prior_kl``   separable squared-exponential prior and its KL basis
``posterior``  negative log posterior and adjoint gradient
``optimize``   BFGS and the coarse-to-fine grid cascade
``curvature``  Gauss-Newton and finite-difference Hessians
``samplers``   linear map, random map, symmetrization, diagnostics
``baselines``  Laplace approximation, random-walk Metropolis, ISMAP
``experiment`` configuration and end-to-end pipelines
"""

__version__ = "0.1.0"
