"""External linear maps as graph nodes (e.g. the tomographic projector)."""

from __future__ import annotations

from typing import Callable

import numpy as np

from petrecon.autodiff.tensor import Tensor, record
from petrecon.errors import ConfigurationError, InputError


class LinearOperator:
    """A linear map with a known adjoint.

    The adjoint identity ``<A x, y> = <x, A^T y>`` is probed with random
    vectors at construction; a mismatch raises ``ConfigurationError``.
    """

    def __init__(self, apply: Callable[[np.ndarray], np.ndarray],
                 adjoint: Callable[[np.ndarray], np.ndarray],
                 in_shape: tuple[int, ...], out_shape: tuple[int, ...],
                 name: str = "linop", probe_seed: int = 0, rtol: float = 1e-10):
        self.apply = apply
        self.adjoint = adjoint
        self.in_shape = tuple(in_shape)
        self.out_shape = tuple(out_shape)
        self.name = name
        rng = np.random.default_rng(probe_seed)
        x = rng.standard_normal(self.in_shape)
        y = rng.standard_normal(self.out_shape)
        lhs = float(np.vdot(np.asarray(apply(x)).ravel(), y.ravel()))
        rhs = float(np.vdot(x.ravel(), np.asarray(adjoint(y)).ravel()))
        if abs(lhs - rhs) > rtol * max(abs(lhs), abs(rhs), 1e-30):
            raise ConfigurationError(
                f"adjoint probe failed for {name}: <Ax,y>={lhs:.12g}, <x,A^T y>={rhs:.12g}")

    @classmethod
    def identity(cls, shape: tuple[int, ...]) -> "LinearOperator":
        return cls(lambda v: v, lambda v: v, shape, shape, name="identity")

    @classmethod
    def from_projector(cls, projector, batch_shape: tuple[int, ...] = (1, 1)):
        """Wrap a geometry ``Projector`` acting on ``[1, 1, ny, nx]`` tensors."""
        in_shape = batch_shape + projector.grid.shape
        out_shape = projector.geometry.shape
        return cls(lambda v: projector.forward(v),
                   lambda v: projector.back(v).reshape(in_shape),
                   in_shape, out_shape, name="projector")


def linear_operator_node(op: LinearOperator, x: Tensor) -> Tensor:
    if x.shape != op.in_shape:
        raise InputError(f"{op.name}: expected input {op.in_shape}, got {x.shape}")
    out = np.asarray(op.apply(x.data), dtype=np.float64).reshape(op.out_shape)
    return record(f"linop:{op.name}", out, (x,),
                  lambda g: (np.asarray(op.adjoint(g), dtype=np.float64).reshape(op.in_shape),))
