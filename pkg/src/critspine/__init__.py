"""Critical superprocesses on finite state spaces: spectral data, ODE oracles,
spine samplers and Monte Carlo checks of the asymptotic limits."""

__version__ = "0.1.0"
