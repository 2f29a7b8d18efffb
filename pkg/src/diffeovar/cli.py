"""Experiment harness: phantom generation, simulation, batch registration,
RMSE statistics, Cramer-Rao maps and stabilizer demonstrations.

Subcommands mirror the pipeline stages; any flag can also be set through a
plain-text ``key=value`` configuration file (flags override the file), and
the ``DIFFEOVAR_THREADS`` environment variable caps the worker count.
Realizations are seeded as ``base_seed + index`` so that partial runs are
resumable and outputs are byte-identical regardless of worker scheduling.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from multiprocessing import Pool
from pathlib import Path

import numpy as np

from . import fieldio
from .flow import DiffeomorphismError
from .grid import GridSpec, ScalarField, divergence, gradient
from .kernel import KernelOperator
from .match import (
    MatchConfig,
    lddmm_register,
    momentum_normality,
    smalldef_register,
    symmetric_register,
)
from .randorbit import (
    NoiseModel,
    add_noise,
    build_basis,
    draw_ground_truth,
    edge_distance,
    make_phantom,
    suggest_probes,
)

NOISE_LEVELS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
NOISE_CORRELATIONS = (0.0, 1.5)
METHODS = {
    "lddmm": lddmm_register,
    "symmetric": symmetric_register,
    "smalldef": smalldef_register,
}


@dataclass
class ExperimentConfig:
    """All pipeline knobs; flag names mirror the field names."""

    size: int = 128
    spacing: float = 0.125
    kernel_scale: float = 0.25
    kernel_power: int = 4
    sigma_image: float = 0.1
    sigma_velocity: float = 3.33
    step: float = 0.018
    max_iters: int = 500
    rel_tol: float = 1e-6
    n_steps: int = 10
    deformation: str = "random"  # identity | random
    magnitude: float = 2.5  # target peak displacement in pixels
    basis_downsample: int = 4
    grad_threshold: float = 0.01
    noise_std: tuple[float, ...] = NOISE_LEVELS
    noise_corr: tuple[float, ...] = NOISE_CORRELATIONS
    methods: tuple[str, ...] = ("lddmm", "symmetric")
    realizations: int = 100
    base_seed: int = 0
    workers: int = 1

    def match_config(self) -> MatchConfig:
        return MatchConfig(
            sigma_image=self.sigma_image,
            sigma_velocity=self.sigma_velocity,
            step=self.step,
            max_iters=self.max_iters,
            rel_tol=self.rel_tol,
            n_steps=self.n_steps,
        )

    def operator(self, spec: GridSpec) -> KernelOperator:
        return KernelOperator(spec, scale=self.kernel_scale, power=self.kernel_power)


def _worker_count(requested: int) -> int:
    cap = os.environ.get("DIFFEOVAR_THREADS")
    if cap is not None:
        return max(1, min(requested, int(cap)))
    return max(1, requested)


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(tok) for tok in text.split(",") if tok.strip())


def _load_config_file(path: str) -> dict:
    values: dict[str, str] = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line without '=': {line!r}")
        key, val = line.split("=", 1)
        values[key.strip().replace("-", "_")] = val.strip()
    return values


def _apply_config_defaults(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Parse twice so that an optional config file provides defaults that
    explicit flags override."""
    first, _ = parser.parse_known_args(argv)
    if getattr(first, "config", None):
        file_values = _load_config_file(first.config)
        for action in parser._actions:
            if action.dest in file_values:
                raw = file_values[action.dest]
                if action.type is not None:
                    action.default = action.type(raw)
                elif isinstance(action.default, bool):
                    action.default = raw.lower() in ("1", "true", "yes")
                else:
                    action.default = raw
    return parser.parse_args(argv)


# ---------------------------------------------------------------------------
# phantom
# ---------------------------------------------------------------------------


def cmd_phantom(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    phantom = make_phantom(args.size, smooth_px=args.smooth_px, spacing=args.spacing)
    fieldio.write_pgm(out_dir / "template.pgm", phantom.values)
    fieldio.write_field(out_dir / "template.f32", phantom)
    probes = suggest_probes(phantom)
    dist = edge_distance(phantom)
    meta = {
        "size": args.size,
        "spacing": args.spacing,
        "smooth_px": args.smooth_px,
        "probes": probes.as_dict(),
        "probe_edge_distance_px": {
            name: float(dist[tuple(pix)])
            for name, pix in probes.as_dict().items()
        },
    }
    (out_dir / "phantom.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    print(f"wrote {out_dir / 'template.pgm'} and probe suggestions")
    return 0


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def _simulate_one(task) -> list[list]:
    cfg, template_path, out_root, index = task
    template = fieldio.read_field(Path(template_path))
    spec = template.spec
    op = cfg.operator(spec)
    rng = np.random.default_rng(cfg.base_seed + index)
    rows = []
    real_dir = Path(out_root) / f"real{index:04d}"
    real_dir.mkdir(parents=True, exist_ok=True)
    if cfg.deformation == "random":
        basis = build_basis(template, op, cfg.basis_downsample, cfg.grad_threshold)
        v0, shoot, clean, peak = draw_ground_truth(
            template, basis, cfg.magnitude, rng, cfg.n_steps
        )
        log_det = ScalarField(spec, np.log(shoot.flow.determinants[-1].values))
        fieldio.write_field(real_dir / "v0.f32", v0)
    else:
        clean = template
        log_det = ScalarField.zeros(spec)
        peak = 0.0
    fieldio.write_field(real_dir / "log_det_true.f32", log_det)
    fieldio.write_field(real_dir / "target_clean.f32", clean)
    for corr in cfg.noise_corr:
        for std in cfg.noise_std:
            noise_seed = int(
                np.random.default_rng(
                    (cfg.base_seed + index, int(std * 1000), int(corr * 1000))
                ).integers(2**63)
            )
            model = NoiseModel(std=std, corr=corr, seed=noise_seed)
            noisy = add_noise(clean, model)
            name = f"target_std{std:g}_corr{corr:g}.f32"
            fieldio.write_field(real_dir / name, noisy)
            measured = float(np.std(noisy.values - clean.values)) if std > 0 else 0.0
            rows.append(
                [index, cfg.deformation, float(peak), float(std), float(corr),
                 noise_seed, measured]
            )
    return rows


def cmd_simulate(args) -> int:
    cfg = _config_from_args(args)
    out_root = Path(args.out_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    template = fieldio.load_image(args.template, spacing=cfg.spacing)
    fieldio.write_field(out_root / "template.f32", template)
    tasks = []
    for index in range(cfg.realizations):
        marker = out_root / f"real{index:04d}" / "manifest_rows.json"
        if args.resume and marker.exists():
            continue
        tasks.append((cfg, str(out_root / "template.f32"), str(out_root), index))
    workers = _worker_count(cfg.workers)
    if workers > 1 and len(tasks) > 1:
        with Pool(workers) as pool:
            all_rows = pool.map(_simulate_one, tasks)
    else:
        all_rows = [_simulate_one(t) for t in tasks]
    for task, rows in zip(tasks, all_rows):
        index = task[3]
        marker = out_root / f"real{index:04d}" / "manifest_rows.json"
        marker.write_text(json.dumps(rows))
    manifest = []
    for index in range(cfg.realizations):
        marker = out_root / f"real{index:04d}" / "manifest_rows.json"
        if marker.exists():
            manifest.extend(json.loads(marker.read_text()))
    manifest.sort(key=lambda r: (r[0], r[4], r[3]))
    fieldio.write_csv(
        out_root / "manifest.csv",
        ["realization", "mode", "peak_displacement_px", "noise_std", "noise_corr",
         "noise_seed", "measured_noise_std"],
        manifest,
    )
    print(f"simulated {cfg.realizations} realizations into {out_root}")
    return 0


# ---------------------------------------------------------------------------
# register
# ---------------------------------------------------------------------------


def _register_one(task) -> str:
    cfg, dataset, out_root, index, method, std, corr = task
    dataset = Path(dataset)
    out_dir = Path(out_root) / f"real{index:04d}"
    out_dir.mkdir(parents=True, exist_ok=True)
    tag = f"{method}_std{std:g}_corr{corr:g}"
    done = out_dir / f"{tag}.done"
    if done.exists():
        return "skipped"
    template = fieldio.read_field(dataset / "template.f32")
    target = fieldio.read_field(dataset / f"real{index:04d}" / f"target_std{std:g}_corr{corr:g}.f32")
    op = cfg.operator(template.spec)
    try:
        result = METHODS[method](template, target, cfg.match_config(), op)
    except (DiffeomorphismError, RuntimeError) as err:
        (out_dir / f"{tag}.error").write_text(str(err))
        return f"failed: {err}"
    fieldio.write_field(out_dir / f"{tag}_logdet.f32", result.log_jacobian)
    fieldio.write_energy_trace(out_dir / f"{tag}_energy.csv", result.cost_trace)
    if result.velocities is not None:
        score = momentum_normality(result, template).score
    else:
        score = float("nan")
    done.write_text(
        json.dumps(
            {
                "converged": result.converged,
                "step_collapsed": result.step_collapsed,
                "iterations": len(result.cost_trace) - 1,
                "kinetic": result.kinetic_energy,
                "data": result.data_energy,
                "normality_score": score,
            },
            sort_keys=True,
        )
    )
    return "ok"


def cmd_register(args) -> int:
    cfg = _config_from_args(args)
    dataset = Path(args.dataset)
    out_root = Path(args.out_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    tasks = []
    for index in range(cfg.realizations):
        for method in cfg.methods:
            for corr in cfg.noise_corr:
                for std in cfg.noise_std:
                    tasks.append(
                        (cfg, str(dataset), str(out_root), index, method, std, corr)
                    )
    workers = _worker_count(cfg.workers)
    if workers > 1 and len(tasks) > 1:
        with Pool(workers) as pool:
            outcomes = pool.map(_register_one, tasks)
    else:
        outcomes = [_register_one(t) for t in tasks]
    failed = sum(1 for o in outcomes if o.startswith("failed"))
    print(f"registered {len(tasks)} runs ({failed} failures) into {out_root}")
    return 0 if failed == 0 else 1


# ---------------------------------------------------------------------------
# stats
# ---------------------------------------------------------------------------


def cmd_stats(args) -> int:
    cfg = _config_from_args(args)
    dataset = Path(args.dataset)
    runs = Path(args.runs)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    template = fieldio.read_field(dataset / "template.f32")
    probes = suggest_probes(template)
    probe_map = probes.as_dict()
    curve_rows = []
    for corr in cfg.noise_corr:
        for std in cfg.noise_std:
            for method in cfg.methods:
                tag = f"{method}_std{std:g}_corr{corr:g}"
                sq_sum = None
                count = 0
                for index in range(cfg.realizations):
                    logdet_path = runs / f"real{index:04d}" / f"{tag}_logdet.f32"
                    if not logdet_path.exists():
                        continue
                    est = fieldio.read_field(logdet_path).values
                    true = fieldio.read_field(
                        dataset / f"real{index:04d}" / "log_det_true.f32"
                    ).values
                    err = est - true
                    sq_sum = err**2 if sq_sum is None else sq_sum + err**2
                    count += 1
                if count < 2:
                    raise SystemExit(
                        f"need at least 2 realizations for {tag}, found {count}"
                    )
                rmse = ScalarField(template.spec, np.sqrt(sq_sum / count))
                fieldio.write_field(out_dir / f"rmse_{tag}.f32", rmse)
                fieldio.write_heatmap_png(
                    out_dir / f"rmse_{tag}.png", rmse, title=f"RMSE log|Dphi| {tag}"
                )
                for name, pix in probe_map.items():
                    curve_rows.append(
                        [float(std), method, float(corr), name,
                         int(pix[0]), int(pix[1]), float(rmse.values[tuple(pix)])]
                    )
                interior = edge_distance(template) >= args.interior_margin
                curve_rows.append(
                    [float(std), method, float(corr), "interior_mean", -1, -1,
                     float(np.mean(rmse.values[interior]))]
                )
    curve_rows.sort(key=lambda r: (r[2], r[0], r[1], r[3]))
    fieldio.write_csv(
        out_dir / "rmse_curves.csv",
        ["noise_std", "method", "noise_corr", "probe", "pixel_i", "pixel_j", "rmse"],
        curve_rows,
    )
    print(f"wrote RMSE maps and curves to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# crb
# ---------------------------------------------------------------------------


def cmd_crb(args) -> int:
    from .crb import crb_divergence_map, fisher_bayes

    cfg = _config_from_args(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    template = fieldio.load_image(args.template, spacing=cfg.spacing)
    op = cfg.operator(template.spec)
    downsamples = [int(d) for d in args.downsample.split(",")]
    sigma_vs = [float("inf") if tok in ("inf", "Inf") else float(tok)
                for tok in args.sigma_v.split(",")]
    rows = []
    for ds in downsamples:
        basis = build_basis(template, op, ds, cfg.grad_threshold)
        for sigma_v in sigma_vs:
            # information = (1/sigma_V^2) G + (1/sigma_I^2) M; sigma_V = inf
            # removes the prior term entirely (image-dominant regime)
            fm = fisher_bayes(basis, template, 1.0)  # unit-sigma image term
            m_term = fm.matrix - basis.gram
            if np.isinf(sigma_v):
                info = m_term / cfg.sigma_image**2
            else:
                info = basis.gram / sigma_v**2 + m_term / cfg.sigma_image**2
            from .crb import FisherMatrix

            crb = crb_divergence_map(
                FisherMatrix(info, "bayes-small-def", basis, None), basis
            )
            tag = f"down{ds}_sigmaV{sigma_v:g}"
            fieldio.write_field(out_dir / f"crb_{tag}.f32", crb.values)
            fieldio.write_heatmap_png(
                out_dir / f"crb_{tag}.png", crb.values,
                title=f"CRB div v, {tag} (n={basis.n})",
            )
            vals = crb.values.values
            rows.append(
                [ds, basis.n, float(sigma_v), int(crb.used_pseudoinverse),
                 crb.rank, float(np.min(vals)), float(np.median(vals)), float(np.max(vals))]
            )
            print(f"crb {tag}: n={basis.n} rank={crb.rank} "
                  f"median={np.median(vals):.4g}")
    fieldio.write_csv(
        out_dir / "crb_summary.csv",
        ["downsample", "n", "sigma_v", "pseudoinverse", "rank", "min", "median", "max"],
        rows,
    )
    return 0


# ---------------------------------------------------------------------------
# stabilizer
# ---------------------------------------------------------------------------


def cmd_stabilizer(args) -> int:
    from .stabilizer import project_tangent, render_grid_overlay, stabilizer_flow

    cfg = _config_from_args(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    template = fieldio.load_image(args.template, spacing=cfg.spacing)
    op = cfg.operator(template.spec)
    spec = template.spec
    rows = []
    from .grid import CoordinateMap, VectorField, sample

    panels = {"identity": None}
    rng = np.random.default_rng(cfg.base_seed)
    for k in range(2):
        raw = VectorField(
            spec,
            op.apply_k_scalar(rng.standard_normal(spec.shape)),
            op.apply_k_scalar(rng.standard_normal(spec.shape)),
        )
        scale = args.displacement_px * spec.dx / max(np.max(raw.magnitude()), 1e-300)
        raw = VectorField(spec, raw.x * scale, raw.y * scale)
        panels[f"tangent{k}"] = project_tangent(raw, template, cfg.grad_threshold, op)
    for name, tangent in panels.items():
        if tangent is None:
            map_ = CoordinateMap.identity(spec)
            residual = 0.0
            max_disp = 0.0
        else:
            flow = stabilizer_flow(template, tangent, cfg.n_steps)
            map_, residual, max_disp = flow.map, flow.template_residual, flow.max_displacement_px
        warped = sample(template, map_)
        fieldio.write_png(out_dir / f"{name}_image.png", warped.values)
        render_grid_overlay(map_, out_dir / f"{name}_grid.png", stride=4)
        rows.append([name, float(residual), float(max_disp)])
        print(f"{name}: residual {residual:.3e}, max displacement {max_disp:.2f} px")
    fieldio.write_csv(
        out_dir / "stabilizer.csv",
        ["panel", "template_residual", "max_displacement_px"], rows,
    )
    return 0


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------


def _config_from_args(args) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for name in vars(cfg):
        if hasattr(args, name):
            setattr(cfg, name, getattr(args, name))
    if hasattr(args, "noise_std") and isinstance(args.noise_std, str):
        cfg.noise_std = _parse_floats(args.noise_std)
    if hasattr(args, "noise_corr") and isinstance(args.noise_corr, str):
        cfg.noise_corr = _parse_floats(args.noise_corr)
    if hasattr(args, "methods") and isinstance(args.methods, str):
        cfg.methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
        unknown = set(cfg.methods) - set(METHODS)
        if unknown:
            raise SystemExit(f"unknown methods: {sorted(unknown)}")
    return cfg


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key=value file supplying flag defaults")
    p.add_argument("--spacing", type=float, default=0.125)
    p.add_argument("--kernel-scale", dest="kernel_scale", type=float, default=0.25)
    p.add_argument("--kernel-power", dest="kernel_power", type=int, default=4)
    p.add_argument("--grad-threshold", dest="grad_threshold", type=float, default=0.01)
    p.add_argument("--base-seed", dest="base_seed", type=int, default=0)
    p.add_argument("--n-steps", dest="n_steps", type=int, default=10)
    p.add_argument("--workers", type=int, default=1)


def _add_match_flags(p: argparse.ArgumentParser):
    p.add_argument("--sigma-image", dest="sigma_image", type=float, default=0.1)
    p.add_argument("--sigma-velocity", dest="sigma_velocity", type=float, default=3.33)
    p.add_argument("--step", type=float, default=0.018)
    p.add_argument("--max-iters", dest="max_iters", type=int, default=500)
    p.add_argument("--rel-tol", dest="rel_tol", type=float, default=1e-6)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffeovar",
        description="Diffeomorphic matching with variance bounds on the volume form",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="write the synthetic template")
    _add_common(p)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--smooth-px", dest="smooth_px", type=float, default=0.0)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("simulate", help="draw deformations and noisy targets")
    _add_common(p)
    p.add_argument("--template", required=True, help="template image (PGM/PNG)")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--realizations", type=int, default=100)
    p.add_argument("--deformation", choices=("identity", "random"), default="random")
    p.add_argument("--magnitude", type=float, default=2.5)
    p.add_argument("--basis-downsample", dest="basis_downsample", type=int, default=4)
    p.add_argument("--noise-std", dest="noise_std", default="0,0.1,0.2,0.3,0.4,0.5")
    p.add_argument("--noise-corr", dest="noise_corr", default="0,1.5")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("register", help="run matchers over a simulated dataset")
    _add_common(p)
    _add_match_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--realizations", type=int, default=100)
    p.add_argument("--methods", default="lddmm,symmetric")
    p.add_argument("--noise-std", dest="noise_std", default="0,0.1,0.2,0.3,0.4,0.5")
    p.add_argument("--noise-corr", dest="noise_corr", default="0,1.5")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("stats", help="per-pixel RMSE maps and probe curves")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--runs", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--realizations", type=int, default=100)
    p.add_argument("--methods", default="lddmm,symmetric")
    p.add_argument("--noise-std", dest="noise_std", default="0,0.1,0.2,0.3,0.4,0.5")
    p.add_argument("--noise-corr", dest="noise_corr", default="0,1.5")
    p.add_argument("--interior-margin", dest="interior_margin", type=float, default=8.0)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("crb", help="Cramer-Rao bound maps")
    _add_common(p)
    p.add_argument("--template", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--sigma-image", dest="sigma_image", type=float, default=0.1)
    p.add_argument("--downsample", default="8,4,1")
    p.add_argument("--sigma-v", dest="sigma_v", default="0.01,0.1,3.33,inf")
    p.set_defaults(func=cmd_crb)

    p = sub.add_parser("stabilizer", help="template-preserving flow panels")
    _add_common(p)
    p.add_argument("--template", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--displacement-px", dest="displacement_px", type=float, default=2.0)
    p.set_defaults(func=cmd_stabilizer)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = _apply_config_defaults(parser, list(sys.argv[1:] if argv is None else argv))
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())