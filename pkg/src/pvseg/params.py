"""Named parameter collections and their initializers.

A model's parameters live in a ParamStore: an insertion-ordered mapping from
dotted names to gradient-enabled tensors. The dotted names are also the tensor
names used by the checkpoint format, so a store round-trips through disk.
"""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .errors import DataError
from .tensor import Tensor


class ParamStore:
    """Insertion-ordered name -> Tensor registry for trainable parameters."""

    def __init__(self) -> None:
        self._tensors: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value, dtype=np.float32), requires_grad=True)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def items(self) -> list[tuple[str, Tensor]]:
        return list(self._tensors.items())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._tensors.items()}

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def copy(self) -> "ParamStore":
        """Deep copy; the clone's tensors do not require grad (teacher role)."""
        out = ParamStore()
        for k, v in self._tensors.items():
            out._tensors[k] = Tensor(v.data.copy(), requires_grad=False)
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        """Overwrite parameter values in place from name -> array.

        Every store entry under ``prefix`` must be present with a matching
        shape; the first offender is named in the error.
        """
        for name, t in self._tensors.items():
            if prefix and not name.startswith(prefix):
                continue
            if name not in arrays:
                raise DataError(f"checkpoint is missing tensor {name!r}")
            a = arrays[name]
            if tuple(a.shape) != t.shape:
                raise DataError(
                    f"checkpoint tensor {name!r} has shape {tuple(a.shape)}, expected {t.shape}")
            t.data[...] = a.astype(t.data.dtype)


def he_conv(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> np.ndarray:
    """Kaiming fan-in normal weights for a (c_out, c_in, k, k) convolution."""
    std = np.sqrt(2.0 / (c_in * k * k))
    return rng.normal(0.0, std, size=(c_out, c_in, k, k)).astype(np.float32)


def he_transposed_conv(rng: np.random.Generator, c_in: int, c_out: int, k: int) -> np.ndarray:
    std = np.sqrt(2.0 / (c_in * k * k))
    return rng.normal(0.0, std, size=(c_in, c_out, k, k)).astype(np.float32)


def he_linear(rng: np.random.Generator, n_out: int, n_in: int, gain: float = 1.0) -> np.ndarray:
    std = gain * np.sqrt(2.0 / n_in)
    return rng.normal(0.0, std, size=(n_out, n_in)).astype(np.float32)


def zeros(*shape: int) -> np.ndarray:
    return np.zeros(shape, dtype=np.float32)


def ones(*shape: int) -> np.ndarray:
    return np.ones(shape, dtype=np.float32)
