"""Fisher information and Cramer-Rao lower bounds on the divergence of the
estimated displacement, for small deformations on a finite expansion basis.

Conventions: all integrals are midpoint sums times the pixel area, and the
white-noise inverse covariance is the discrete Dirac 1/(sigma^2 dA) on the
diagonal, so that the Fisher matrix assembled here equals the covariance
of the score of the discrete log-likelihood whose noise has per-pixel
variance sigma^2 / dA.  The Bayesian variant adds the prior information,
which on the Green's-kernel basis is exactly the gram matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .flow import invert_displacement
from .grid import (
    CoordinateMap,
    ScalarField,
    VectorField,
    check_same_grid,
    gradient,
    jacobian_determinant,
    jacobian_matrix,
    sample,
)
from .randorbit import ExpansionBasis, velocity_from_coefficients


@dataclass(frozen=True)
class WhitePrecision:
    """Inverse covariance of white noise: (1/sigma^2(x)) times a Dirac."""

    sigma: float | np.ndarray

    def sigma2_field(self, shape) -> np.ndarray:
        s = np.asarray(self.sigma, dtype=float)
        if s.ndim == 0:
            if float(s) <= 0:
                raise ValueError("noise sigma must be positive")
            return np.full(shape, float(s) ** 2)
        if s.shape != shape:
            raise ValueError(f"sigma field shape {s.shape} does not match grid {shape}")
        if np.min(s) <= 0:
            raise ValueError("noise sigma must be positive everywhere")
        return s**2


@dataclass(frozen=True)
class StationaryPrecision:
    """Inverse covariance of Gaussian-correlated noise.

    Matches the noise channel of the simulator: white noise filtered by a
    periodic Gaussian of width ``corr`` pixels and rescaled to marginal
    standard deviation ``sigma``.  Only supported at the identity map.
    """

    sigma: float
    corr: float

    def __post_init__(self):
        if self.sigma <= 0 or self.corr <= 0:
            raise ValueError("sigma and corr must be positive")


class UnsupportedNoiseError(ValueError):
    """The requested noise precision form is not supported here."""


@dataclass(frozen=True)
class FisherMatrix:
    """n x n information matrix tied to an expansion basis."""

    matrix: np.ndarray
    flavor: str  # "full" or "bayes-small-def"
    basis: ExpansionBasis
    sigma: float | None

    def __post_init__(self):
        m = np.asarray(self.matrix)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("Fisher matrix must be square")

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class CrbMap:
    """Per-pixel lower bound on Var[div v_hat] plus solver diagnostics."""

    values: ScalarField
    pixels: np.ndarray | None  # None when the whole grid was evaluated
    used_pseudoinverse: bool
    rank: int


def _sensitivity_fields(basis: ExpansionBasis, template: ScalarField,
                        phi: CoordinateMap | None) -> np.ndarray:
    """Rows s_k(x) = psi_k(x) . (D phi(x))^{-T} grad I(x), stacked (n, N)."""
    spec = basis.spec
    grad = gradient(template)
    if phi is None:
        wx, wy = grad.x, grad.y
    else:
        jac = jacobian_matrix(phi)
        det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
        # (D phi)^{-T} grad I per node
        wx = (jac[..., 1, 1] * grad.x - jac[..., 1, 0] * grad.y) / det
        wy = (-jac[..., 0, 1] * grad.x + jac[..., 0, 0] * grad.y) / det
    m = basis.n_centers
    n_nodes = spec.nx * spec.ny
    out = np.empty((2 * m, n_nodes))
    green = basis.green
    for k, (ci, cj) in enumerate(basis.centers):
        bump = np.roll(green, (ci, cj), axis=(0, 1))
        out[k] = (bump * wx).ravel()
        out[m + k] = (bump * wy).ravel()
    return out


def fisher_bayes(basis: ExpansionBasis, template: ScalarField, sigma: float) -> FisherMatrix:
    """Bayesian small-deformation Fisher information G + (1/sigma^2) M.

    The prior term is the basis gram matrix (reproducing property); the
    image term is the area-weighted outer product of the basis responses
    against the template gradient.
    """
    check_same_grid(basis.spec, template.spec)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    s = _sensitivity_fields(basis, template, None)
    image_term = (s @ s.T) * (basis.spec.pixel_area / sigma**2)
    matrix = basis.gram + image_term
    matrix = 0.5 * (matrix + matrix.T)
    return FisherMatrix(matrix, "bayes-small-def", basis, sigma)


def fisher_full(
    basis: ExpansionBasis,
    template: ScalarField,
    phi: CoordinateMap | None,
    precision: WhitePrecision | StationaryPrecision,
) -> FisherMatrix:
    """Fisher information of the deformation coefficients at the map ``phi``.

    White noise supports arbitrary maps through the change of variables
    Q^phi(x, y) = Q(phi(x), phi(y)) |D phi(x)| |D phi(y)|; a stationary
    correlated precision is supported at the identity only.
    """
    check_same_grid(basis.spec, template.spec)
    spec = basis.spec
    s = _sensitivity_fields(basis, template, phi)
    if isinstance(precision, WhitePrecision):
        sigma2 = precision.sigma2_field(spec.shape)
        if phi is None:
            weight = 1.0 / sigma2
        else:
            check_same_grid(spec, phi.spec)
            det = jacobian_determinant(phi).values
            ix = (phi.map_x - spec.origin[0]) / spec.dx
            iy = (phi.map_y - spec.origin[1]) / spec.dy
            from .grid import bilinear_gather

            weight = det / bilinear_gather(sigma2, ix, iy)
        matrix = (s * weight.ravel()) @ s.T * spec.pixel_area
    elif isinstance(precision, StationaryPrecision):
        if phi is not None:
            raise UnsupportedNoiseError(
                "stationary correlated precision is only supported at the identity map"
            )
        from .randorbit import _periodic_gaussian_kernel

        kern = _periodic_gaussian_kernel(spec, precision.corr)
        cov_symbol = (np.abs(np.fft.rfft2(kern)) ** 2) / np.sum(kern**2)
        cov_symbol *= precision.sigma**2 * spec.pixel_area
        inv_symbol = 1.0 / cov_symbol
        qs = np.empty_like(s)
        for k in range(s.shape[0]):
            fld = s[k].reshape(spec.shape)
            qs[k] = np.fft.irfft2(np.fft.rfft2(fld) * inv_symbol, s=spec.shape).ravel()
        matrix = (s @ qs.T) * spec.pixel_area**2
    else:
        raise UnsupportedNoiseError(f"unsupported precision spec {type(precision).__name__}")
    matrix = 0.5 * (matrix + matrix.T)
    return FisherMatrix(
        matrix, "full", basis,
        float(precision.sigma) if np.ndim(precision.sigma) == 0 else None,
    )


def divergence_responses(basis: ExpansionBasis) -> tuple[np.ndarray, np.ndarray]:
    """Divergence fields of the Green's function, for x- and y-impulses.

    Periodic centered differences are used so that div psi for a basis
    function centered at c is exactly the origin response rolled by c,
    matching the periodic convolution structure of the kernel itself.
    """
    spec = basis.spec
    g = basis.green
    div_x = (np.roll(g, -1, axis=0) - np.roll(g, 1, axis=0)) / (2.0 * spec.dx)
    div_y = (np.roll(g, -1, axis=1) - np.roll(g, 1, axis=1)) / (2.0 * spec.dy)
    return div_x, div_y


def crb_divergence_map(
    fm: FisherMatrix,
    basis: ExpansionBasis | None = None,
    pixels: np.ndarray | None = None,
) -> CrbMap:
    """Lower bound on Var[div v_hat] per pixel via SPD solves.

    The test functional is the unit-mass single-pixel indicator, so the
    response vector is b_i = div psi_i evaluated at the probe pixel and
    the bound is b^T (I^B)^{-1} b, computed by solving the linear system
    rather than inverting the matrix.  If the Cholesky factorization fails
    (rank-deficient information, e.g. with the prior term removed), an
    eigenvalue-truncated pseudoinverse is used and flagged.
    """
    basis = basis or fm.basis
    spec = basis.spec
    div_x, div_y = divergence_responses(basis)
    m = basis.n_centers
    if pixels is None:
        probe = np.stack(
            np.meshgrid(np.arange(spec.nx), np.arange(spec.ny), indexing="ij"), axis=-1
        ).reshape(-1, 2)
    else:
        probe = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
        if np.any(probe < 0) or np.any(probe[:, 0] >= spec.nx) or np.any(probe[:, 1] >= spec.ny):
            raise ValueError("probe pixels outside the grid")
    # b matrix: (n, P) of div psi_k at probe pixels
    di = (probe[:, 0][None, :] - basis.centers[:, 0][:, None]) % spec.nx
    dj = (probe[:, 1][None, :] - basis.centers[:, 1][:, None]) % spec.ny
    b = np.empty((2 * m, probe.shape[0]))
    b[:m] = div_x[di, dj]
    b[m:] = div_y[di, dj]
    used_pinv = False
    rank = fm.n
    try:
        c, low = cho_factor(fm.matrix)
        z = cho_solve((c, low), b)
    except np.linalg.LinAlgError:
        used_pinv = True
        w, vecs = np.linalg.eigh(fm.matrix)
        keep = w > 1e-12 * np.max(w)
        rank = int(np.sum(keep))
        z = vecs[:, keep] @ ((vecs[:, keep].T @ b) / w[keep][:, None])
    bounds = np.sum(b * z, axis=0)
    if pixels is None:
        values = ScalarField(spec, bounds.reshape(spec.shape))
    else:
        grid_vals = np.zeros(spec.shape)
        grid_vals[probe[:, 0], probe[:, 1]] = bounds
        values = ScalarField(spec, grid_vals)
    return CrbMap(values, None if pixels is None else probe, used_pinv, rank)


def fisher_monte_carlo_check(
    basis: ExpansionBasis,
    template: ScalarField,
    sigma: float,
    theta0: np.ndarray,
    draws: int,
    rng: np.random.Generator,
    fd_step: float = 1e-5,
) -> np.ndarray:
    """Empirical covariance of the log-likelihood score over data draws.

    Simulates the conditionally Gaussian model J = I o phi^{-1} + noise
    (per-pixel noise variance sigma^2 / dA, the discrete realization of
    continuum white noise of level sigma), and differentiates the
    log-likelihood in the expansion coefficients by centered differences.
    Intended as an oracle against :func:`fisher_full` for small bases.
    """
    if basis.n > 20:
        raise ValueError("Monte Carlo check is intended for small bases (n <= 20)")
    if sigma <= 0:
        raise ValueError("degenerate noise model: sigma must be positive")
    spec = basis.spec
    theta0 = np.asarray(theta0, dtype=float)
    if theta0.shape != (basis.n,):
        raise ValueError(f"theta0 must have shape ({basis.n},)")

    def mean_image(theta: np.ndarray) -> np.ndarray:
        v = velocity_from_coefficients(basis, theta)
        inv = invert_displacement(v)
        return sample(template, inv).values

    def log_likelihood(data: np.ndarray, theta: np.ndarray) -> float:
        r = data - mean_image(theta)
        return -0.5 * float(np.sum(r**2)) * spec.pixel_area / sigma**2

    base_mean = mean_image(theta0)
    noise_std = sigma / np.sqrt(spec.pixel_area)
    scores = np.empty((draws, basis.n))
    perturbed = []
    for i in range(basis.n):
        e = np.zeros(basis.n)
        e[i] = fd_step
        perturbed.append((mean_image(theta0 + e), mean_image(theta0 - e)))
    inv_s2 = spec.pixel_area / sigma**2
    for d in range(draws):
        data = base_mean + noise_std * rng.standard_normal(spec.shape)
        for i, (mp, mm) in enumerate(perturbed):
            lp = -0.5 * float(np.sum((data - mp) ** 2)) * inv_s2
            lm = -0.5 * float(np.sum((data - mm) ** 2)) * inv_s2
            scores[d, i] = (lp - lm) / (2 * fd_step)
    centered = scores - scores.mean(axis=0, keepdims=True)
    return centered.T @ centered / draws