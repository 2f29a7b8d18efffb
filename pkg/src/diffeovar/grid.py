"""Core field types and discrete calculus on a regular 2D grid.

Arrays are indexed ``[i, j]`` with axis 0 running along x and axis 1 along
y, so ``values[i, j]`` sits at physical position
``(origin[0] + i*dx, origin[1] + j*dy)`` in mm.  All spatial derivatives
use centered differences in the interior and one-sided differences on the
boundary; interpolation is bilinear with clamp-to-edge boundary handling.

Every type is immutable after construction (backing arrays are marked
read-only) and every operation is a pure function, so fields can be shared
freely between threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GridMismatchError(ValueError):
    """Two fields that must share a grid were built on different grids."""


@dataclass(frozen=True)
class GridSpec:
    """Geometry of a regular grid: node counts, spacing and origin in mm.

    The default spacing of 0.125 mm/pixel makes a kernel scale of 0.25 mm
    equal to two pixels.
    """

    nx: int
    ny: int
    dx: float = 0.125
    dy: float = 0.125
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.nx < 4 or self.ny < 4:
            raise ValueError(f"grid must be at least 4x4, got {self.nx}x{self.ny}")
        if self.dx <= 0 or self.dy <= 0:
            raise ValueError(f"grid spacing must be positive, got ({self.dx}, {self.dy})")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def pixel_area(self) -> float:
        return self.dx * self.dy

    def coordinate_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Node coordinates in mm as two (nx, ny) arrays."""
        x = self.origin[0] + np.arange(self.nx) * self.dx
        y = self.origin[1] + np.arange(self.ny) * self.dy
        return np.broadcast_to(x[:, None], self.shape).copy(), np.broadcast_to(
            y[None, :], self.shape
        ).copy()


def _freeze(arr: np.ndarray, spec: GridSpec, name: str) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    if arr.shape != spec.shape:
        raise GridMismatchError(
            f"{name} has shape {arr.shape}, grid expects {spec.shape}"
        )
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    arr.flags.writeable = False
    return arr


def check_same_grid(*specs: GridSpec) -> GridSpec:
    first = specs[0]
    for other in specs[1:]:
        if other != first:
            raise GridMismatchError(f"grid mismatch: {first} vs {other}")
    return first


@dataclass(frozen=True)
class ScalarField:
    """A scalar image on a grid (template, target, Jacobian maps, ...)."""

    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _freeze(self.values, self.spec, "values"))

    @staticmethod
    def zeros(spec: GridSpec) -> "ScalarField":
        return ScalarField(spec, np.zeros(spec.shape))

    @staticmethod
    def full(spec: GridSpec, value: float) -> "ScalarField":
        return ScalarField(spec, np.full(spec.shape, float(value)))


@dataclass(frozen=True)
class VectorField:
    """A two-component field on a grid (velocities, momenta, displacements).

    Components are in mm (displacement) or mm per unit time (velocity).
    """

    spec: GridSpec
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", _freeze(self.x, self.spec, "x component"))
        object.__setattr__(self, "y", _freeze(self.y, self.spec, "y component"))

    @staticmethod
    def zeros(spec: GridSpec) -> "VectorField":
        return VectorField(spec, np.zeros(spec.shape), np.zeros(spec.shape))

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.x, self.y)


@dataclass(frozen=True)
class CoordinateMap:
    """A transformation stored as absolute target coordinates in mm.

    ``(map_x[i, j], map_y[i, j])`` is where grid node (i, j) is sent;
    displacement is ``map - identity``.  Storing absolute coordinates makes
    composition and inversion read directly as sampling.
    """

    spec: GridSpec
    map_x: np.ndarray
    map_y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "map_x", _freeze(self.map_x, self.spec, "map_x"))
        object.__setattr__(self, "map_y", _freeze(self.map_y, self.spec, "map_y"))

    @staticmethod
    def identity(spec: GridSpec) -> "CoordinateMap":
        xx, yy = spec.coordinate_arrays()
        return CoordinateMap(spec, xx, yy)

    def displacement(self) -> VectorField:
        xx, yy = self.spec.coordinate_arrays()
        return VectorField(self.spec, self.map_x - xx, self.map_y - yy)


def identity_map(spec: GridSpec) -> CoordinateMap:
    return CoordinateMap.identity(spec)


# ---------------------------------------------------------------------------
# Bilinear interpolation machinery (index coordinates, clamp-to-edge).
#
# These primitives are shared by sampling, flow integration and the exact
# cost gradients in the matching module: bilinear_scatter is the transpose
# of bilinear_gather, and bilinear_gather_grad is its pointwise derivative
# with respect to the sample position, so hand-written adjoints built from
# them match finite differences of any cost built from gathers.
# ---------------------------------------------------------------------------


def _corner_setup(ix, iy, nx, ny):
    ix_c = np.clip(ix, 0.0, nx - 1.0)
    iy_c = np.clip(iy, 0.0, ny - 1.0)
    i0 = np.minimum(ix_c.astype(np.int64), nx - 2)
    j0 = np.minimum(iy_c.astype(np.int64), ny - 2)
    fx = ix_c - i0
    fy = iy_c - j0
    return i0, j0, fx, fy


def bilinear_gather(values: np.ndarray, ix: np.ndarray, iy: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of ``values`` at index coordinates (ix, iy)."""
    nx, ny = values.shape
    i0, j0, fx, fy = _corner_setup(ix, iy, nx, ny)
    v00 = values[i0, j0]
    v10 = values[i0 + 1, j0]
    v01 = values[i0, j0 + 1]
    v11 = values[i0 + 1, j0 + 1]
    return (
        v00 * (1 - fx) * (1 - fy)
        + v10 * fx * (1 - fy)
        + v01 * (1 - fx) * fy
        + v11 * fx * fy
    )


def bilinear_gather_grad(
    values: np.ndarray, ix: np.ndarray, iy: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Derivative of the interpolated value w.r.t. (ix, iy) in index units.

    Clamp-to-edge means positions outside the domain have zero derivative.
    """
    nx, ny = values.shape
    i0, j0, fx, fy = _corner_setup(ix, iy, nx, ny)
    v00 = values[i0, j0]
    v10 = values[i0 + 1, j0]
    v01 = values[i0, j0 + 1]
    v11 = values[i0 + 1, j0 + 1]
    gx = (v10 - v00) * (1 - fy) + (v11 - v01) * fy
    gy = (v01 - v00) * (1 - fx) + (v11 - v10) * fx
    inside_x = (ix > 0.0) & (ix < nx - 1.0)
    inside_y = (iy > 0.0) & (iy < ny - 1.0)
    return gx * inside_x, gy * inside_y


def bilinear_scatter(
    weights: np.ndarray, ix: np.ndarray, iy: np.ndarray, shape: tuple[int, int]
) -> np.ndarray:
    """Transpose of :func:`bilinear_gather`: spread ``weights`` onto the grid."""
    nx, ny = shape
    i0, j0, fx, fy = _corner_setup(ix, iy, nx, ny)
    flat00 = (i0 * ny + j0).ravel()
    w = weights.ravel()
    fxr = fx.ravel()
    fyr = fy.ravel()
    n = nx * ny
    out = np.bincount(flat00, w * (1 - fxr) * (1 - fyr), minlength=n)
    out += np.bincount(flat00 + ny, w * fxr * (1 - fyr), minlength=n)
    out += np.bincount(flat00 + 1, w * (1 - fxr) * fyr, minlength=n)
    out += np.bincount(flat00 + ny + 1, w * fxr * fyr, minlength=n)
    return out.reshape(shape)


def _map_to_index(map_: CoordinateMap) -> tuple[np.ndarray, np.ndarray]:
    spec = map_.spec
    return (map_.map_x - spec.origin[0]) / spec.dx, (map_.map_y - spec.origin[1]) / spec.dy


def sample(field, map_: CoordinateMap):
    """Sample a field at the positions of a coordinate map (``field ∘ map``).

    Bilinear interpolation with clamp-to-edge boundary handling; exact at
    grid nodes for the identity map.  Accepts a :class:`ScalarField` or a
    :class:`VectorField` and returns the same kind of field.
    """
    check_same_grid(field.spec, map_.spec)
    ix, iy = _map_to_index(map_)
    if isinstance(field, ScalarField):
        return ScalarField(field.spec, bilinear_gather(field.values, ix, iy))
    if isinstance(field, VectorField):
        return VectorField(
            field.spec,
            bilinear_gather(field.x, ix, iy),
            bilinear_gather(field.y, ix, iy),
        )
    raise TypeError(f"cannot sample object of type {type(field).__name__}")


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def _diff_axis(values: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Centered differences along ``axis``, one-sided at the two borders."""
    out = np.empty_like(values)
    v = np.moveaxis(values, axis, 0)
    o = np.moveaxis(out, axis, 0)
    o[1:-1] = (v[2:] - v[:-2]) / (2.0 * h)
    o[0] = (v[1] - v[0]) / h
    o[-1] = (v[-1] - v[-2]) / h
    return out


def gradient(f: ScalarField) -> VectorField:
    """Spatial gradient of a scalar field; exact on affine fields."""
    return VectorField(
        f.spec,
        _diff_axis(f.values, 0, f.spec.dx),
        _diff_axis(f.values, 1, f.spec.dy),
    )


def divergence(v: VectorField) -> ScalarField:
    """Divergence with the same stencil as :func:`gradient`."""
    return ScalarField(
        v.spec,
        _diff_axis(v.x, 0, v.spec.dx) + _diff_axis(v.y, 1, v.spec.dy),
    )


def jacobian_matrix(map_: CoordinateMap) -> np.ndarray:
    """Jacobian D(map) as an (nx, ny, 2, 2) array, J[..., i, j] = dmap_i/dx_j."""
    spec = map_.spec
    out = np.empty(spec.shape + (2, 2))
    out[..., 0, 0] = _diff_axis(map_.map_x, 0, spec.dx)
    out[..., 0, 1] = _diff_axis(map_.map_x, 1, spec.dy)
    out[..., 1, 0] = _diff_axis(map_.map_y, 0, spec.dx)
    out[..., 1, 1] = _diff_axis(map_.map_y, 1, spec.dy)
    return out


def jacobian_determinant(map_: CoordinateMap) -> ScalarField:
    """Determinant of the Jacobian per node (the canonical volume form)."""
    jac = jacobian_matrix(map_)
    det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
    return ScalarField(map_.spec, det)


def compose(outer: CoordinateMap, inner: CoordinateMap) -> CoordinateMap:
    """Composition ``outer ∘ inner`` by sampling outer at inner's coordinates.

    The displacement of ``outer`` (not its absolute coordinates) is
    interpolated, which keeps translations exact under the clamp boundary.
    """
    check_same_grid(outer.spec, inner.spec)
    spec = outer.spec
    xx, yy = spec.coordinate_arrays()
    ix = (inner.map_x - spec.origin[0]) / spec.dx
    iy = (inner.map_y - spec.origin[1]) / spec.dy
    disp_x = bilinear_gather(outer.map_x - xx, ix, iy)
    disp_y = bilinear_gather(outer.map_y - yy, ix, iy)
    return CoordinateMap(spec, inner.map_x + disp_x, inner.map_y + disp_y)
