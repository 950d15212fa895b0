"""Arbitrarily-conditioned multi-functional diffusion for multi-physics emulation.

A DDPM over multiple functions on a shared tensor-product mesh, with
Gaussian-process noise, random-mask zero-regularized training for arbitrary
conditional tasks, Kronecker-structured noise sampling, and the PDE data
generators and metrics needed to train and evaluate it at desk scale.
"""

__version__ = "0.1.0"
