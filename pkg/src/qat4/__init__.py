"""Training engine for VGG-style CNNs with true 4-bit weights on the CPU."""

__version__ = "0.1.0"
