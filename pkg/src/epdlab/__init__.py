"""Solver laboratory for few-step probability-flow ODE sampling on analytic
Gaussian-mixture toys: ensemble parallel-direction steps, baseline solvers,
teacher distillation, residual Dirichlet policy optimization, evaluation."""

__version__ = "0.1.0"
