"""Flows that leave the template invariant: tangent fields and their flows.

A vector field tangent to the template's level lines generates a flow that
moves coordinates without changing the image (the stabilizer of the
template).  Exact stabilizer elements only exist for special symmetries;
here tangency is enforced by pointwise projection (optionally interleaved
with kernel smoothing), and the flow's template residual is reported
rather than asserted to vanish.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flow import FlowResult, VelocitySeries, integrate_flow
from .grid import (
    CoordinateMap,
    ScalarField,
    VectorField,
    check_same_grid,
    gradient,
    sample,
)
from .kernel import KernelOperator


@dataclass(frozen=True)
class TangentField:
    """A vector field projected onto the template's level-line directions."""

    field: VectorField
    template: ScalarField
    residual: float  # max |grad I . w| / (|grad I| |w|) over the gradient set

    def __post_init__(self):
        if self.residual > 1e-8:
            raise ValueError(
                f"projection left a tangency residual of {self.residual:.3e}"
            )


def _tangency_residual(w: VectorField, template: ScalarField, grad_threshold: float) -> float:
    grad = gradient(template)
    g_mag = grad.magnitude()
    w_mag = w.magnitude()
    mask = (g_mag >= grad_threshold * np.max(g_mag)) & (w_mag > 1e-12 * max(np.max(w_mag), 1e-300))
    if not np.any(mask):
        return 0.0
    dots = np.abs(grad.x * w.x + grad.y * w.y)[mask]
    return float(np.max(dots / (g_mag[mask] * w_mag[mask])))


def project_tangent(
    w: VectorField,
    template: ScalarField,
    grad_threshold: float = 0.01,
    op: KernelOperator | None = None,
) -> TangentField:
    """Project a field onto the tangent space of the template's level lines.

    Where the gradient magnitude exceeds ``grad_threshold`` times its
    maximum, the component along the gradient is removed; elsewhere the
    field is unchanged.  If a kernel operator is given, the projected
    field is re-smoothed and projected once more, trading a little
    smoothness for exact tangency (the final pass is always a projection).
    """
    check_same_grid(w.spec, template.spec)
    grad = gradient(template)
    g_mag2 = grad.x**2 + grad.y**2
    peak = np.max(g_mag2)
    if peak == 0.0:
        return TangentField(w, template, 0.0)
    mask = g_mag2 >= (grad_threshold**2) * peak

    def project_once(field: VectorField) -> VectorField:
        dot = grad.x * field.x + grad.y * field.y
        coef = np.where(mask, dot / np.where(mask, g_mag2, 1.0), 0.0)
        return VectorField(
            field.spec, field.x - coef * grad.x, field.y - coef * grad.y
        )

    out = project_once(w)
    if op is not None:
        check_same_grid(op.spec, w.spec)
        out = project_once(op.apply_k(out))
    residual = _tangency_residual(out, template, grad_threshold)
    return TangentField(out, template, residual)


@dataclass(frozen=True)
class StabilizerFlowResult:
    """Unit-time flow of a fixed tangent field plus the template residual."""

    map: CoordinateMap
    flow: FlowResult
    template_residual: float  # ||I o phi - I||_2 / ||I||_2
    max_displacement_px: float


def stabilizer_flow(
    template: ScalarField, w: TangentField, n_steps: int = 10
) -> StabilizerFlowResult:
    """Integrate the autonomous flow of a tangent field for unit time.

    The field is held fixed along the flow (no re-projection onto the
    deformed configuration), matching the autonomous generator of the
    stabilizer subgroup.  Returns the final map and the relative L2
    residual of I o phi against I.
    """
    check_same_grid(template.spec, w.field.spec)
    series = VelocitySeries((w.field,) * n_steps)
    flow = integrate_flow(series)
    final = flow.final_forward
    if np.min(flow.determinants[-1].values) <= 0.0:
        from .flow import DiffeomorphismError

        raise DiffeomorphismError("stabilizer flow lost injectivity")
    warped = sample(template, final)
    norm = np.sqrt(np.sum(template.values**2))
    residual = float(np.sqrt(np.sum((warped.values - template.values) ** 2)) / max(norm, 1e-300))
    spec = template.spec
    xx, yy = spec.coordinate_arrays()
    disp = np.hypot(final.map_x - xx, final.map_y - yy) / spec.dx
    return StabilizerFlowResult(final, flow, residual, float(np.max(disp)))


def render_grid_overlay(map_: CoordinateMap, path: str, stride: int = 4,
                        image: ScalarField | None = None) -> None:
    """Save a PNG of the deformed coordinate grid (optionally over an image)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    spec = map_.spec
    fig, ax = plt.subplots(figsize=(5, 5), dpi=120)
    if image is not None:
        ax.imshow(
            image.values.T,
            origin="lower",
            cmap="gray",
            extent=(
                spec.origin[0] - 0.5 * spec.dx,
                spec.origin[0] + (spec.nx - 0.5) * spec.dx,
                spec.origin[1] - 0.5 * spec.dy,
                spec.origin[1] + (spec.ny - 0.5) * spec.dy,
            ),
        )
    for i in range(0, spec.nx, stride):
        ax.plot(map_.map_x[i, :], map_.map_y[i, :], color="tab:blue", lw=0.6)
    for j in range(0, spec.ny, stride):
        ax.plot(map_.map_x[:, j], map_.map_y[:, j], color="tab:blue", lw=0.6)
    ax.set_aspect("equal")
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)