"""Neural solvers for mean field optimal transport with a closed-form
linear-quadratic benchmark."""

__version__ = "0.1.0"
