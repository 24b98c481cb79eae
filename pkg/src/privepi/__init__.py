"""Private epidemic forecasting: differentiable SEIRM metapopulation model driven by
recurrent parameter networks, with input perturbation of sensitive transaction data."""

__version__ = "0.1.0"
