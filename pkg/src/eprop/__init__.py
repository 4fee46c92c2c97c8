"""e-prop training engine for recurrent spiking and non-spiking networks."""

__version__ = "0.1.0"
