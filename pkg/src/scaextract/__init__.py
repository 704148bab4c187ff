"""Side-channel assisted cryptanalytic extraction of Deep-ReLU networks."""

__version__ = "0.1.0"
