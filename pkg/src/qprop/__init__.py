"""Mean-field signal propagation for networks with quantized activations."""

__version__ = "0.1.0"
