"""Template-to-target matching: large-deformation, symmetric and small-deformation.

All three estimators minimize a kinetic-energy-regularized sum-of-squares
objective by gradient descent on the velocity.  The deformed template is
built by semi-Lagrangian advection (one bilinear warp per time step), and
the gradients are the *exact* adjoints of that discrete computation: every
warp is differentiated through :func:`grid.bilinear_gather_grad` and
transposed through :func:`grid.bilinear_scatter`, so the analytic gradient
matches finite differences of the cost to solver precision.  Descent steps
are preconditioned by the Green's kernel K, which leaves the fixed points
unchanged; at convergence the momentum A v_t equals the matching momentum
transported from the endpoint residual, which is parallel to the deformed
template's gradient for the large-deformation matcher.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .flow import FlowResult, VelocitySeries, integrate_flow, invert_displacement
from .grid import (
    CoordinateMap,
    GridSpec,
    ScalarField,
    VectorField,
    _diff_axis,
    bilinear_gather,
    bilinear_gather_grad,
    bilinear_scatter,
    check_same_grid,
    jacobian_determinant,
)
from .kernel import KernelOperator


class NonFiniteCostError(RuntimeError):
    """The matching cost became non-finite."""


class NotDiffeomorphicError(RuntimeError):
    """The estimated map has a nonpositive Jacobian determinant."""


@dataclass(frozen=True)
class MatchConfig:
    """Gradient-descent settings shared by the three matchers.

    ``sigma_image`` weighs the data term (1/sigma_image^2) and
    ``sigma_velocity`` the kinetic term; only their ratio
    ``sigma_effective = sigma_image / sigma_velocity`` affects the
    minimizer.
    """

    sigma_image: float = 0.1
    sigma_velocity: float = 3.33
    step: float = 0.018
    max_iters: int = 500
    rel_tol: float = 1e-6
    n_steps: int = 10
    backtracking: bool = True

    def __post_init__(self):
        if self.sigma_image <= 0 or self.sigma_velocity <= 0 or self.step <= 0:
            raise ValueError("sigma_image, sigma_velocity and step must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")

    @property
    def sigma_effective(self) -> float:
        return self.sigma_image / self.sigma_velocity


@dataclass(frozen=True)
class MatchResult:
    """Estimated deformation plus convergence diagnostics.

    ``velocities`` is None for the small-deformation matcher, which returns
    a single ``displacement`` field instead; ``cost_trace`` rows are
    (kinetic, data, total) per accepted iterate and are non-increasing in
    the total when backtracking is enabled.
    """

    flow: FlowResult
    log_jacobian: ScalarField
    kinetic_energy: float
    data_energy: float
    cost_trace: tuple[tuple[float, float, float], ...]
    converged: bool
    step_collapsed: bool
    config: MatchConfig
    operator: KernelOperator
    method: str = "lddmm"
    target: ScalarField | None = None
    velocities: VelocitySeries | None = None
    displacement: VectorField | None = None

    @property
    def total_energy(self) -> float:
        return self.kinetic_energy + self.data_energy


# ---------------------------------------------------------------------------
# Objectives.  Velocities are handled internally as arrays of shape
# (T, 2, nx, ny) in mm units; ``cost`` and ``cost_grad`` are exact partners.
# ---------------------------------------------------------------------------


class _ObjectiveBase:
    def __init__(self, template: ScalarField, target: ScalarField, cfg: MatchConfig,
                 op: KernelOperator):
        check_same_grid(template.spec, target.spec, op.spec)
        self.spec = template.spec
        self.template = template.values
        self.target = target.values
        self.cfg = cfg
        self.op = op
        nx, ny = self.spec.shape
        self.ix_grid = np.broadcast_to(np.arange(nx, dtype=float)[:, None], (nx, ny))
        self.iy_grid = np.broadcast_to(np.arange(ny, dtype=float)[None, :], (nx, ny))
        self.area = self.spec.pixel_area

    def zero_velocity(self) -> np.ndarray:
        raise NotImplementedError

    def cost(self, v: np.ndarray) -> tuple[float, float, float]:
        raise NotImplementedError

    def cost_grad(self, v: np.ndarray):
        raise NotImplementedError


class LddmmObjective(_ObjectiveBase):
    """Asymmetric large-deformation objective (endpoint SSD on I o phi^-1).

    The inverse map is accumulated as a displacement chain (index units)
    with the semi-Lagrangian update, and the template is sampled once
    through the accumulated map, so the deformed template suffers a single
    interpolation exactly like synthetically generated targets.
    """

    kinetic_weight = 1.0

    def zero_velocity(self) -> np.ndarray:
        return np.zeros((self.cfg.n_steps, 2) + self.spec.shape)

    def _kinetic(self, v: np.ndarray):
        dt = 1.0 / v.shape[0]
        av = np.empty_like(v)
        for t in range(v.shape[0]):
            av[t, 0] = self.op.apply_a_scalar(v[t, 0])
            av[t, 1] = self.op.apply_a_scalar(v[t, 1])
        kin = (
            self.kinetic_weight
            * 0.5
            * dt
            * float(np.sum(av * v))
            * self.area
            / self.cfg.sigma_velocity**2
        )
        return kin, av

    def _inverse_chain(self, v: np.ndarray):
        """Displacement chain d_t = phi_t^{-1} - id (index units) with the
        per-step sample positions; d_{t+1}(x) = -dt v_t(x) + d_t(x - dt v_t(x))."""
        dt = 1.0 / v.shape[0]
        disp = [(np.zeros(self.spec.shape), np.zeros(self.spec.shape))]
        positions = []
        for t in range(v.shape[0]):
            sx = self.ix_grid - dt * v[t, 0] / self.spec.dx
            sy = self.iy_grid - dt * v[t, 1] / self.spec.dy
            positions.append((sx, sy))
            dx_prev, dy_prev = disp[-1]
            disp.append(
                (
                    sx - self.ix_grid + bilinear_gather(dx_prev, sx, sy),
                    sy - self.iy_grid + bilinear_gather(dy_prev, sx, sy),
                )
            )
        return disp, positions

    def _data_terms(self, v):
        disp, positions = self._inverse_chain(v)
        px = self.ix_grid + disp[-1][0]
        py = self.iy_grid + disp[-1][1]
        resid = bilinear_gather(self.template, px, py) - self.target
        data = 0.5 * float(np.sum(resid**2)) * self.area / self.cfg.sigma_image**2
        return data, disp, positions, resid

    def _backprop_inverse_chain(self, v, disp, positions, lam_x, lam_y, grad, sign):
        """Adjoint of the displacement chain; accumulates into ``grad``.

        ``lam_x, lam_y`` is the cost gradient w.r.t. the final displacement
        d_T; ``sign`` carries the -dt/d factor orientation of d(sample
        position)/d(velocity).
        """
        dt = 1.0 / v.shape[0]
        for t in range(v.shape[0] - 1, -1, -1):
            sx, sy = positions[t]
            dx_prev, dy_prev = disp[t]
            gxx, gxy = bilinear_gather_grad(dx_prev, sx, sy)
            gyx, gyy = bilinear_gather_grad(dy_prev, sx, sy)
            # d_{t+1,a}(x) = s_a(x) - x_a + d_{t,a}(s(x)); ds_a/dv_b = sign*dt*delta_ab/d_b
            wx = lam_x * (1.0 + gxx) + lam_y * gyx
            wy = lam_x * gxy + lam_y * (1.0 + gyy)
            grad[t, 0] += sign * dt / self.spec.dx * wx
            grad[t, 1] += sign * dt / self.spec.dy * wy
            lam_x = bilinear_scatter(lam_x, sx, sy, self.spec.shape)
            lam_y = bilinear_scatter(lam_y, sx, sy, self.spec.shape)

    def cost(self, v: np.ndarray):
        kin, _ = self._kinetic(v)
        data = self._data_terms(v)[0]
        return kin + data, kin, data

    def cost_grad(self, v: np.ndarray):
        n_steps = v.shape[0]
        dt = 1.0 / n_steps
        kin, av = self._kinetic(v)
        data, disp, positions, resid = self._data_terms(v)
        grad = np.zeros_like(v)
        px = self.ix_grid + disp[-1][0]
        py = self.iy_grid + disp[-1][1]
        gx, gy = bilinear_gather_grad(self.template, px, py)
        lam = resid * self.area / self.cfg.sigma_image**2
        self._backprop_inverse_chain(v, disp, positions, lam * gx, lam * gy, grad, -1.0)
        grad += (self.kinetic_weight * dt * self.area / self.cfg.sigma_velocity**2) * av
        return kin + data, kin, data, grad

    def precondition(self, grad: np.ndarray) -> np.ndarray:
        """Smooth the raw gradient by K and rescale so it reads in velocity units."""
        dt = 1.0 / grad.shape[0]
        scale = self.cfg.sigma_velocity**2 / (self.kinetic_weight * dt * self.area)
        out = np.empty_like(grad)
        for t in range(grad.shape[0]):
            out[t, 0] = self.op.apply_k_scalar(grad[t, 0]) * scale
            out[t, 1] = self.op.apply_k_scalar(grad[t, 1]) * scale
        return out

    def deformed_template_chain(self, v: np.ndarray):
        """Deformed template I o phi_t^{-1} per step plus its sampled-gradient
        reference, for momentum diagnostics."""
        disp, positions = self._inverse_chain(v)
        frames = []
        for t in range(v.shape[0]):
            px = self.ix_grid + disp[t][0]
            py = self.iy_grid + disp[t][1]
            gx, gy = bilinear_gather_grad(self.template, px, py)
            dxx, dxy = bilinear_gather_grad(disp[t][0], self.ix_grid, self.iy_grid)
            dyx, dyy = bilinear_gather_grad(disp[t][1], self.ix_grid, self.iy_grid)
            # grad of I(x + d(x)): (I + Dd)^T applied to the sampled gradient
            rx = (1.0 + dxx) * gx + dyx * gy
            ry = dxy * gx + (1.0 + dyy) * gy
            frames.append((rx / self.spec.dx, ry / self.spec.dy))
        return frames


class SymmetricObjective(LddmmObjective):
    """Symmetrized objective: two kinetic terms and data terms in both
    mapping directions (I o phi^-1 vs J, and I vs J o phi), one control v."""

    kinetic_weight = 2.0

    def _forward_chain(self, v: np.ndarray):
        """Displacement chain b_t of the partial forward composition
        (id + dt v_{T-1}) o ... o (id + dt v_t); b_t(x) = dt v_t(x) +
        b_{t+1}(x + dt v_t(x)).  b_0 realizes phi_1."""
        dt = 1.0 / v.shape[0]
        n_steps = v.shape[0]
        disp = [None] * (n_steps + 1)
        positions = [None] * n_steps
        disp[n_steps] = (np.zeros(self.spec.shape), np.zeros(self.spec.shape))
        for t in range(n_steps - 1, -1, -1):
            ux = self.ix_grid + dt * v[t, 0] / self.spec.dx
            uy = self.iy_grid + dt * v[t, 1] / self.spec.dy
            positions[t] = (ux, uy)
            bx_next, by_next = disp[t + 1]
            disp[t] = (
                ux - self.ix_grid + bilinear_gather(bx_next, ux, uy),
                uy - self.iy_grid + bilinear_gather(by_next, ux, uy),
            )
        return disp, positions

    def _second_data_term(self, v):
        disp, positions = self._forward_chain(v)
        qx = self.ix_grid + disp[0][0]
        qy = self.iy_grid + disp[0][1]
        resid2 = self.template - bilinear_gather(self.target, qx, qy)
        data2 = 0.5 * float(np.sum(resid2**2)) * self.area / self.cfg.sigma_image**2
        return data2, disp, positions, resid2

    def cost(self, v: np.ndarray):
        kin, _ = self._kinetic(v)
        data1 = self._data_terms(v)[0]
        data2 = self._second_data_term(v)[0]
        return kin + data1 + data2, kin, data1 + data2

    def cost_grad(self, v: np.ndarray):
        n_steps = v.shape[0]
        dt = 1.0 / n_steps
        kin, av = self._kinetic(v)
        data1, disp1, positions1, resid1 = self._data_terms(v)
        data2, disp2, positions2, resid2 = self._second_data_term(v)
        grad = np.zeros_like(v)
        # template-side: I o phi^{-1} vs J, backward chain
        px = self.ix_grid + disp1[-1][0]
        py = self.iy_grid + disp1[-1][1]
        gx, gy = bilinear_gather_grad(self.template, px, py)
        lam = resid1 * self.area / self.cfg.sigma_image**2
        self._backprop_inverse_chain(v, disp1, positions1, lam * gx, lam * gy, grad, -1.0)
        # target-side: I vs J o phi, forward chain (reverse recursion order)
        qx = self.ix_grid + disp2[0][0]
        qy = self.iy_grid + disp2[0][1]
        hx, hy = bilinear_gather_grad(self.target, qx, qy)
        mu = -resid2 * self.area / self.cfg.sigma_image**2
        mu_x = mu * hx
        mu_y = mu * hy
        for t in range(n_steps):
            ux, uy = positions2[t]
            bx_next, by_next = disp2[t + 1]
            gxx, gxy = bilinear_gather_grad(bx_next, ux, uy)
            gyx, gyy = bilinear_gather_grad(by_next, ux, uy)
            wx = mu_x * (1.0 + gxx) + mu_y * gyx
            wy = mu_x * gxy + mu_y * (1.0 + gyy)
            grad[t, 0] += dt / self.spec.dx * wx
            grad[t, 1] += dt / self.spec.dy * wy
            mu_x = bilinear_scatter(mu_x, ux, uy, self.spec.shape)
            mu_y = bilinear_scatter(mu_y, ux, uy, self.spec.shape)
        grad += (self.kinetic_weight * dt * self.area / self.cfg.sigma_velocity**2) * av
        return kin + data1 + data2, kin, data1 + data2, grad


def _cell_average(a: np.ndarray) -> np.ndarray:
    return 0.25 * (a[:-1, :-1] + a[1:, :-1] + a[:-1, 1:] + a[1:, 1:])


def _cell_average_adjoint(w: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    out = np.zeros(shape)
    q = 0.25 * w
    out[:-1, :-1] += q
    out[1:, :-1] += q
    out[:-1, 1:] += q
    out[1:, 1:] += q
    return out


class SmallDefObjective(_ObjectiveBase):
    """Single-displacement objective: phi = id + v, no time series.

    The data residual is evaluated at cell centers (bilinear samples of I
    at center - v, against the cell-averaged target).  Away from zero
    displacement this agrees with nodal sampling to second order, and at
    the v = 0 base point it makes the objective smooth, so its exact
    linearization is the perturbation-response operator.
    """

    def __init__(self, template, target, cfg, op):
        super().__init__(template, target, cfg, op)
        nx, ny = self.spec.shape
        self.cx_grid = np.broadcast_to(
            (np.arange(nx - 1, dtype=float) + 0.5)[:, None], (nx - 1, ny - 1)
        )
        self.cy_grid = np.broadcast_to(
            (np.arange(ny - 1, dtype=float) + 0.5)[None, :], (nx - 1, ny - 1)
        )
        self.target_cells = _cell_average(self.target)

    def zero_velocity(self) -> np.ndarray:
        return np.zeros((1, 2) + self.spec.shape)

    def _sample_positions(self, v: np.ndarray):
        sx = self.cx_grid - _cell_average(v[0, 0]) / self.spec.dx
        sy = self.cy_grid - _cell_average(v[0, 1]) / self.spec.dy
        return sx, sy

    def _terms(self, v: np.ndarray):
        avx = self.op.apply_a_scalar(v[0, 0])
        avy = self.op.apply_a_scalar(v[0, 1])
        kin = (
            0.5
            * float(np.sum(avx * v[0, 0] + avy * v[0, 1]))
            * self.area
            / self.cfg.sigma_velocity**2
        )
        sx, sy = self._sample_positions(v)
        resid = bilinear_gather(self.template, sx, sy) - self.target_cells
        data = 0.5 * float(np.sum(resid**2)) * self.area / self.cfg.sigma_image**2
        return kin, data, avx, avy, sx, sy, resid

    def cost(self, v: np.ndarray):
        kin, data = self._terms(v)[:2]
        return kin + data, kin, data

    def cost_grad(self, v: np.ndarray):
        kin, data, avx, avy, sx, sy, resid = self._terms(v)
        lam = resid * self.area / self.cfg.sigma_image**2
        gx, gy = bilinear_gather_grad(self.template, sx, sy)
        grad = np.empty_like(v)
        grad[0, 0] = _cell_average_adjoint(-lam * gx / self.spec.dx, self.spec.shape)
        grad[0, 1] = _cell_average_adjoint(-lam * gy / self.spec.dy, self.spec.shape)
        grad[0, 0] += self.area / self.cfg.sigma_velocity**2 * avx
        grad[0, 1] += self.area / self.cfg.sigma_velocity**2 * avy
        return kin + data, kin, data, grad

    def precondition(self, grad: np.ndarray) -> np.ndarray:
        scale = self.cfg.sigma_velocity**2 / self.area
        out = np.empty_like(grad)
        out[0, 0] = self.op.apply_k_scalar(grad[0, 0]) * scale
        out[0, 1] = self.op.apply_k_scalar(grad[0, 1]) * scale
        return out


# ---------------------------------------------------------------------------
# Shared descent driver
# ---------------------------------------------------------------------------


def _descend(objective: _ObjectiveBase, cfg: MatchConfig):
    v = objective.zero_velocity()
    total, kin, data, grad = objective.cost_grad(v)
    if not np.isfinite(total):
        raise NonFiniteCostError(f"initial cost is {total}")
    trace = [(kin, data, total)]
    step = cfg.step
    converged = False
    collapsed = False
    for _ in range(cfg.max_iters):
        direction = objective.precondition(grad)
        while True:
            v_new = v - step * direction
            total_new, kin_new, data_new = objective.cost(v_new)
            if not np.isfinite(total_new) and not cfg.backtracking:
                raise NonFiniteCostError("cost became non-finite during descent")
            if np.isfinite(total_new) and (total_new <= total or not cfg.backtracking):
                break
            step *= 0.5
            if step < 1e-12:
                collapsed = True
                break
        if collapsed:
            break
        rel_decrease = (total - total_new) / max(abs(total), 1e-300)
        v = v_new
        total, kin, data = total_new, kin_new, data_new
        trace.append((kin, data, total))
        if rel_decrease < cfg.rel_tol:
            converged = True
            break
        total, kin, data, grad = objective.cost_grad(v)
        if not np.isfinite(total):
            raise NonFiniteCostError("cost became non-finite during descent")
        step = min(step * 2.0, cfg.step)
    return v, trace, converged, collapsed


def _finalize_series(objective, cfg, op, target, method, v, trace, converged, collapsed):
    spec = objective.spec
    series = VelocitySeries(
        tuple(VectorField(spec, v[t, 0], v[t, 1]) for t in range(v.shape[0]))
    )
    flow = integrate_flow(series)
    det = flow.determinants[-1]
    if np.min(det.values) <= 0.0:
        raise NotDiffeomorphicError(
            f"estimated map has minimum Jacobian determinant {np.min(det.values):.3g}"
        )
    kin, data, total = trace[-1]
    return MatchResult(
        flow=flow,
        log_jacobian=ScalarField(spec, np.log(det.values)),
        kinetic_energy=kin,
        data_energy=data,
        cost_trace=tuple(trace),
        converged=converged,
        step_collapsed=collapsed,
        config=cfg,
        operator=op,
        method=method,
        target=target,
        velocities=series,
    )


def lddmm_register(
    template: ScalarField,
    target: ScalarField,
    cfg: MatchConfig | None = None,
    op: KernelOperator | None = None,
) -> MatchResult:
    """Estimate a large-deformation flow matching template to target.

    Gradient descent over the whole velocity series from a zero start;
    the cost is the integrated kinetic energy plus the endpoint
    sum-of-squares between the advected template and the target.
    """
    cfg = cfg or MatchConfig()
    op = op or KernelOperator(template.spec)
    objective = LddmmObjective(template, target, cfg, op)
    v, trace, converged, collapsed = _descend(objective, cfg)
    return _finalize_series(objective, cfg, op, target, "lddmm", v, trace, converged, collapsed)


def symmetric_register(
    template: ScalarField,
    target: ScalarField,
    cfg: MatchConfig | None = None,
    op: KernelOperator | None = None,
) -> MatchResult:
    """Symmetrized variant: mismatch penalized in both mapping directions.

    Uses exactly the same configuration as :func:`lddmm_register`; the
    second data term drives momentum from the (possibly noisy) target's
    gradients as well as the template's.
    """
    cfg = cfg or MatchConfig()
    op = op or KernelOperator(template.spec)
    objective = SymmetricObjective(template, target, cfg, op)
    v, trace, converged, collapsed = _descend(objective, cfg)
    return _finalize_series(objective, cfg, op, target, "symmetric", v, trace, converged, collapsed)


def smalldef_register(
    template: ScalarField,
    target: ScalarField,
    cfg: MatchConfig | None = None,
    op: KernelOperator | None = None,
) -> MatchResult:
    """Small-deformation matching: a single displacement field, phi = id + v."""
    cfg = cfg or MatchConfig()
    op = op or KernelOperator(template.spec)
    objective = SmallDefObjective(template, target, cfg, op)
    v, trace, converged, collapsed = _descend(objective, cfg)
    spec = objective.spec
    disp = VectorField(spec, v[0, 0], v[0, 1])
    xx, yy = spec.coordinate_arrays()
    fwd = CoordinateMap(spec, xx + disp.x, yy + disp.y)
    inv = invert_displacement(disp)
    det = jacobian_determinant(fwd)
    if np.min(det.values) <= 0.0:
        raise NotDiffeomorphicError(
            f"estimated map has minimum Jacobian determinant {np.min(det.values):.3g}"
        )
    ident = CoordinateMap.identity(spec)
    flow = FlowResult(
        (ident, fwd),
        (ident, inv),
        (jacobian_determinant(ident), det),
    )
    kin, data, total = trace[-1]
    return MatchResult(
        flow=flow,
        log_jacobian=ScalarField(spec, np.log(det.values)),
        kinetic_energy=kin,
        data_energy=data,
        cost_trace=tuple(trace),
        converged=converged,
        step_collapsed=collapsed,
        config=cfg,
        operator=op,
        method="smalldef",
        target=target,
        displacement=disp,
    )


# ---------------------------------------------------------------------------
# Momentum diagnostics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NormalityDiagnostic:
    """Worst-case tangential momentum fraction and its per-node field."""

    score: float
    field: ScalarField


def matching_momentum(
    result: MatchResult, template: ScalarField
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-step Eulerian matching momentum at the returned iterate.

    This realizes the optimality form of the momentum, i.e. the transported
    endpoint residual(s) times image gradients — the field that A v_t
    equals at a stationary point.  Evaluating the momentum this way, rather
    than applying A to the iterate, avoids amplifying the unconverged
    high-frequency remainder of gradient descent by the operator symbol.
    """
    if result.velocities is None:
        raise ValueError("momentum diagnostics need a time-resolved velocity series")
    if result.target is None:
        raise ValueError("result does not carry the target it was matched against")
    cls = SymmetricObjective if result.method == "symmetric" else LddmmObjective
    objective = cls(template, result.target, result.config, result.operator)
    v = np.stack([np.stack([s.x, s.y]) for s in result.velocities.steps])
    _, _, _, grad = objective.cost_grad(v)
    dt = 1.0 / v.shape[0]
    scale = result.config.sigma_velocity**2 / (
        objective.kinetic_weight * dt * objective.area
    )
    fields = []
    for t in range(v.shape[0]):
        av_x = result.operator.apply_a_scalar(v[t, 0])
        av_y = result.operator.apply_a_scalar(v[t, 1])
        # grad = (w dt area / sigma_V^2) (A v_t - m_hat_t), so m_hat pops out
        fields.append((av_x - scale * grad[t, 0], av_y - scale * grad[t, 1]))
    return fields


def momentum_normality(
    result: MatchResult,
    template: ScalarField,
    grad_threshold: float = 0.01,
    momentum_threshold: float = 0.05,
) -> NormalityDiagnostic:
    """Tangential fraction of the matching momentum against the deformed
    template's gradient, over time and space.

    Per node the normalized cross component
    |m x grad| / (|m| |grad|) is recorded in the diagnostic field (max over
    time steps); the scalar score is the energy fraction of the momentum
    that is tangential, pooling the thresholded nodes of all steps:
    sqrt(sum (m x ghat)^2 / sum |m|^2).  Nodes where the gradient or the
    momentum falls below its threshold (a fraction of the per-step field
    maximum) are excluded, since the direction is undefined there; a zero
    momentum scores 0.  The asymmetric matcher's momentum rides the
    template's gradients and scores near zero at convergence; momentum
    driven by the target's gradients (the symmetric matcher on noisy data)
    is tangential-rich and scores high.
    """
    if result.velocities is None:
        raise ValueError("momentum diagnostics need a time-resolved velocity series")
    spec = template.spec
    objective = LddmmObjective(
        template, result.target if result.target is not None else template,
        result.config, result.operator,
    )
    v = np.stack([np.stack([s.x, s.y]) for s in result.velocities.steps])
    momenta = matching_momentum(result, template)
    disp, _ = objective._inverse_chain(v)
    field = np.zeros(spec.shape)
    cross_sq = 0.0
    mass = 0.0
    for t in range(v.shape[0]):
        mx, my = momenta[t]
        deformed = bilinear_gather(
            template.values, objective.ix_grid + disp[t][0], objective.iy_grid + disp[t][1]
        )
        gx = _diff_axis(deformed, 0, spec.dx)
        gy = _diff_axis(deformed, 1, spec.dy)
        m_mag = np.hypot(mx, my)
        g_mag = np.hypot(gx, gy)
        if np.max(m_mag) == 0.0:
            continue
        mask = (g_mag >= grad_threshold * np.max(g_mag)) & (
            m_mag >= momentum_threshold * np.max(m_mag)
        )
        if not np.any(mask):
            continue
        ratio = np.zeros(spec.shape)
        cross = mx * gy - my * gx
        ratio[mask] = np.abs(cross[mask]) / (m_mag[mask] * g_mag[mask])
        field = np.maximum(field, ratio)
        cross_sq += float(np.sum((cross[mask] / g_mag[mask]) ** 2))
        mass += float(np.sum(m_mag[mask] ** 2))
    score = np.sqrt(cross_sq / mass) if mass > 0.0 else 0.0
    return NormalityDiagnostic(float(score), ScalarField(spec, field))


def smalldef_momentum_residual(
    result: MatchResult, template: ScalarField, target: ScalarField
) -> float:
    """Relative residual of the small-deformation momentum relation.

    Evaluates A v against the matching momentum
    (1/sigma^2) (I - J o phi) |D phi| (D phi^T)^{-1} grad I with every
    factor realized by the same discrete operators the estimator uses, so
    the residual measures distance from stationarity.
    """
    if result.displacement is None:
        raise ValueError("expected a small-deformation result")
    cfg = result.config
    objective = SmallDefObjective(template, target, cfg, result.operator)
    v = np.stack([np.stack([result.displacement.x, result.displacement.y])])
    _, _, _, grad = objective.cost_grad(v)
    scale = cfg.sigma_velocity**2 / objective.area
    avx = result.operator.apply_a_scalar(v[0, 0])
    avy = result.operator.apply_a_scalar(v[0, 1])
    residual = grad * scale  # equals Av - matching momentum
    num = np.sqrt(np.sum(residual**2))
    den = np.sqrt(np.sum(avx**2 + avy**2))
    if den == 0.0:
        return 0.0 if num == 0.0 else float("inf")
    return float(num / den)
