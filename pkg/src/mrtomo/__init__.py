"""Matrix-free stochastic primal-dual solvers for regularized linear inverse
problems, built around image-domain multiresolution sketches of the forward
operator. The flagship instance is 2-D parallel-beam CT reconstruction."""

__version__ = "0.1.0"
