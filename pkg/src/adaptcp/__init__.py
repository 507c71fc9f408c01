"""Adaptive MCMC and exact recursions for Bayesian multiple changepoints."""
