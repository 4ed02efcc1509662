"""Blendshape-to-parameter mappers: the residual MLP and two linear baselines."""
