"""First-order response of the small-deformation estimator to a data change.

At the template-equals-target base point, perturbing the target by
delta J moves the estimated displacement by the solution of the symmetric
positive definite system

    [A + (1/sigma^2) grad I grad I^T] delta v = -(1/sigma^2) grad I delta J,

and the volume form responds through its divergence,
|D phi| -> |D phi| (1 + div delta v).  The sign and the 1/sigma^2 factor on
the right-hand side are fixed by implicit differentiation of the
estimator's stationarity condition and verified against a re-optimization
oracle in the tests.

The system is solved matrix-free by preconditioned conjugate gradients
(the Green's kernel K is an exact inverse of the A part), with the
image-gradient term realized by the same cell-centered sampling operators
the small-deformation matcher uses, so the solution is the exact
linearization of that estimator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from .grid import ScalarField, VectorField, check_same_grid, divergence
from .kernel import KernelOperator
from .match import _cell_average, _cell_average_adjoint


class PerturbationSolveError(RuntimeError):
    """The conjugate-gradient solve did not reach the requested tolerance."""


@dataclass(frozen=True)
class PerturbationResult:
    """Linear response of the estimated displacement and log volume form."""

    delta_v: VectorField
    delta_logdet: ScalarField
    residual: float  # relative residual of the linear solve
    iterations: int


def _cell_gradient(template: np.ndarray, dx: float, dy: float):
    """In-cell gradient of the bilinear interpolant at cell centers."""
    gx = (
        template[1:, :-1] + template[1:, 1:] - template[:-1, :-1] - template[:-1, 1:]
    ) / (2.0 * dx)
    gy = (
        template[:-1, 1:] + template[1:, 1:] - template[:-1, :-1] - template[1:, :-1]
    ) / (2.0 * dy)
    return gx, gy


def perturbation_response(
    template: ScalarField,
    delta_target: ScalarField,
    sigma: float,
    op: KernelOperator,
    tol: float = 1e-8,
    max_iters: int | None = None,
) -> PerturbationResult:
    """Solve the perturbation system for a target change ``delta_target``.

    Parameters
    ----------
    template : ScalarField
        The template I; the base point is target = template, phi = id.
    delta_target : ScalarField
        Direction of the data perturbation (delta J).
    sigma : float
        The effective weight ratio sigma_image / sigma_velocity of the
        matched estimator.
    op : KernelOperator
        Smoothing prior defining A.
    """
    check_same_grid(template.spec, delta_target.spec, op.spec)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    spec = template.spec
    shape = spec.shape
    n = shape[0] * shape[1]
    inv_s2 = 1.0 / sigma**2
    gx, gy = _cell_gradient(template.values, spec.dx, spec.dy)

    def apply_system(flat: np.ndarray) -> np.ndarray:
        wx = flat[:n].reshape(shape)
        wy = flat[n:].reshape(shape)
        ax = op.apply_a_scalar(wx)
        ay = op.apply_a_scalar(wy)
        dot = gx * _cell_average(wx) + gy * _cell_average(wy)
        ax += inv_s2 * _cell_average_adjoint(dot * gx, shape)
        ay += inv_s2 * _cell_average_adjoint(dot * gy, shape)
        return np.concatenate([ax.ravel(), ay.ravel()])

    def apply_preconditioner(flat: np.ndarray) -> np.ndarray:
        wx = flat[:n].reshape(shape)
        wy = flat[n:].reshape(shape)
        return np.concatenate(
            [op.apply_k_scalar(wx).ravel(), op.apply_k_scalar(wy).ravel()]
        )

    dj_cells = _cell_average(delta_target.values)
    rhs_x = -inv_s2 * _cell_average_adjoint(gx * dj_cells, shape)
    rhs_y = -inv_s2 * _cell_average_adjoint(gy * dj_cells, shape)
    rhs = np.concatenate([rhs_x.ravel(), rhs_y.ravel()])
    rhs_norm = np.linalg.norm(rhs)
    if rhs_norm == 0.0:
        zero = VectorField.zeros(spec)
        return PerturbationResult(zero, ScalarField.zeros(spec), 0.0, 0)

    if max_iters is None:
        max_iters = 10 * 2 * n
    system = LinearOperator((2 * n, 2 * n), matvec=apply_system)
    precond = LinearOperator((2 * n, 2 * n), matvec=apply_preconditioner)
    iters = 0

    def count(_):
        nonlocal iters
        iters += 1

    solution, info = cg(
        system, rhs, rtol=tol, atol=0.0, maxiter=max_iters, M=precond, callback=count
    )
    residual = float(np.linalg.norm(rhs - apply_system(solution)) / rhs_norm)
    if info != 0 or residual > 10 * tol:
        raise PerturbationSolveError(
            f"conjugate gradients stopped with info={info}, relative residual {residual:.3e}"
        )
    delta_v = VectorField(spec, solution[:n].reshape(shape), solution[n:].reshape(shape))
    return PerturbationResult(delta_v, divergence(delta_v), residual, iters)