"""Find the network conditions where a controller falls furthest behind classical references, then guard it with learned rules."""

__version__ = "0.1.0"
