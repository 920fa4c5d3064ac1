"""Simulation and verification laboratory for super-Brownian motion in a
spatially correlated random environment.

Modules
-------
covariance   noise kernels and exact Gaussian field sampling
heatkernel   deterministic heat-flow toolkit and regime classification
spde         splitting-scheme solvers for the linear and log-Laplace equations
particles    branching random walk with environment-tilted offspring law
feynmankac   Brownian-pair moment formulas, annealed moments, growth probes
dual         jump-perturbed dual flow and duality-gap diagnostics
cli          experiment runner (`sbmre` entry point)
"""

__version__ = "0.1.0"
