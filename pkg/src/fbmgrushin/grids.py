"""Uniform time grids and grid-sampled functions.

Arrays are time-major: ``values[i]`` is the value at node ``t_i``.  A value
may be a scalar, a vector or a matrix; extra leading axes after the time
axis act as batch axes (stacked Monte Carlo samples), so every operation in
this package broadcasts over them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GridMismatchError(ValueError):
    """Two sampled functions do not live on the same grid."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform discretization of [0, T] with n steps (n + 1 nodes)."""

    T: float
    n: int

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"horizon must be positive, got T={self.T}")
        if self.n < 2:
            raise ValueError(f"need at least 2 steps, got n={self.n}")

    @property
    def dt(self) -> float:
        return self.T / self.n

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n + 1)

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and self.T == other.T and self.n == other.n

    def __hash__(self):
        return hash((self.T, self.n))


@dataclass
class SampledFn:
    """Function sampled at the nodes of a TimeGrid.

    ``values`` has shape ``(n + 1, *batch, *component)`` where ``component``
    is ``()`` for scalars, ``(d,)`` for vectors, ``(r, c)`` for matrices.
    """

    grid: TimeGrid
    values: np.ndarray
    singular_node0: bool = field(default=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape[0] != self.grid.n + 1:
            raise ValueError(
                f"values first axis has length {self.values.shape[0]}, "
                f"expected n+1 = {self.grid.n + 1}"
            )
        check = self.values[1:] if self.singular_node0 else self.values
        if not np.all(np.isfinite(check)):
            raise ValueError("sampled values must be finite")

    @property
    def is_scalar(self) -> bool:
        return self.values.ndim == 1

    def same_grid(self, other: "SampledFn") -> None:
        if self.grid != other.grid:
            raise GridMismatchError(
                f"grids differ: (T={self.grid.T}, n={self.grid.n}) vs "
                f"(T={other.grid.T}, n={other.grid.n})"
            )


def sample(grid: TimeGrid, fn) -> SampledFn:
    """Sample a callable t -> value on the grid nodes."""
    vals = np.asarray([fn(t) for t in grid.nodes], dtype=float)
    return SampledFn(grid, vals)
