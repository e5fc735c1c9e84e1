"""Full-batch training dynamics on Gaussian-mixture data: exact surrogate
processes, mean-field kernels, and finite-size fluctuation corrections."""

__version__ = "0.1.0"
