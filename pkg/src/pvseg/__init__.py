"""Solar-panel segmentation on aerial tiles.

A numpy-backed pipeline: a reverse-mode tensor engine, a small residual
backbone, self-distillation pretraining, a masked-attention query decoder
producing per-query masks, and the matching objective, metrics and dataset
tooling around them.

Importing this package is deliberately lazy: the command-line entry point must
pin thread-count environment variables before numpy loads, so nothing here may
pull numpy at import time.
"""
__all__ = ["Tape", "Tensor", "backward"]
__version__ = "0.1.0"


def __getattr__(name: str):
    if name in __all__:
        from . import tensor
        return getattr(tensor, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + __all__)
