"""Byzantine-tolerant all-reduce SGD: library, deterministic simulator and CLI."""

__version__ = "0.1.0"
