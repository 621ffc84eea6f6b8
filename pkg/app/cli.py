"""Command-line frontend.

    python -m app.cli web --model configs/standard.toml --order 2 --out out/
    python -m app.cli verify --model configs/standard.toml --out out/
    python -m app.cli chain --model configs/standard.toml --path path.csv --eps 1e-3 --out out/

Exit codes: 0 success, 1 unreadable input or I/O failure, 2 validation
failure, 3 path clearance failure, 4 numerical failure.
"""

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field

from app.config.settings import settings
from app.exceptions.custom_exceptions import (
    NUMERICAL_ERRORS,
    VALIDATION_ERRORS,
    BaseCustomException,
    ClearanceError,
    HypothesisError,
)
from app.models.model_file import ModelConfig, load_model_file
from app.models.reports import ResonanceLine, SimulationSummary, WebReport
from app.utils import io
from app.utils.logger import bind_run, get_logger

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_VALIDATION = 2
EXIT_CLEARANCE = 3
EXIT_NUMERICAL = 4


class RunConfig(BaseModel):
    """Effective configuration of one CLI invocation."""

    command: str = Field(..., description="Sub-command")
    model_path: Optional[str] = Field(None, description="Model file path")
    out: str = Field("out", description="Output directory")
    seed: int = Field(0, description="RNG seed recorded in every output header")
    params: Dict[str, Any] = Field(default_factory=dict, description="Command-specific parameters")
    tolerances: Dict[str, float] = Field(default_factory=dict, description="Effective numerical tolerances")


def parse_eps(text: Optional[str]) -> List[float]:
    if not text:
        return [1e-3]
    return [float(x) for x in text.split(",") if x.strip()]


def parse_grid(text: Optional[str]) -> Optional[np.ndarray]:
    """'lo:hi:n' per axis, comma separated, into a product grid of shape (m, d)."""
    if not text:
        return None
    axes = []
    for part in text.split(","):
        lo, hi, n = part.split(":")
        axes.append(np.linspace(float(lo), float(hi), int(n)))
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))


def parse_vector(text: Optional[str]) -> Optional[np.ndarray]:
    if text is None:
        return None
    return np.array([float(x) for x in text.split(",")])


def parse_box(text: Optional[str]) -> Optional[List[List[float]]]:
    if not text:
        return None
    return [[float(v) for v in part.split(":")] for part in text.split(",")]


def parse_resonance(text: str):
    """'k1,...,kd|l' into (k, l)."""
    k_text, _, l_text = text.partition("|")
    return tuple(int(x) for x in k_text.split(",")), int(l_text or 0)


class Run:
    """One invocation: loaded model, header and artifact bookkeeping."""

    def __init__(self, args: argparse.Namespace):
        from app.services.hamiltonian import build_model

        self.args = args
        self.out = Path(args.out)
        config = load_model_file(args.model)
        box = parse_box(getattr(args, "box", None))
        if box is not None:
            data = config.model_dump(mode="json")
            data["domain"]["box"] = box
            config = ModelConfig.model_validate(data)
        self.config = config
        self.model = build_model(config)
        params = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out")}
        self.run_config = RunConfig(
            command=args.command,
            model_path=str(args.model),
            out=str(self.out),
            seed=args.seed,
            params=params,
            tolerances={
                "tol_res": settings.tol_res,
                "newton_tol": settings.newton_tol,
                "quad_abs_tol": settings.quad_abs_tol,
                "link_tol": settings.link_tol,
                "rk_tol": settings.rk_tol,
            },
        )
        canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True)
        self.head = io.header(io.config_hash(canonical, params), args.seed)
        bind_run(command=args.command, config_hash=self.head["config_hash"][:12], seed=args.seed)
        self.meta = io.RunMeta(self.out, args.command)

    def csv(self, name: str, columns: Sequence[str], rows, **plot) -> Path:
        return self.meta.add(io.write_csv(self.out / name, columns, rows, self.head, plot or None))

    def json(self, name: str, payload: Any) -> Path:
        return self.meta.add(io.write_json(self.out / name, payload, self.head))

    def finish(self) -> None:
        self.json("run.config.json", self.run_config)
        self.meta.close()


# Commands


def _domain(run: Run):
    from app.services.resonance import build_reduced_domain, build_web, default_tube_radius

    web = build_web(run.model, run.args.order)
    domain = build_reduced_domain(web, run.args.delta)
    L = run.args.L or (default_tube_radius(domain) if web.secular else None)
    domain.L = L
    return web, domain


def cmd_web(run: Run) -> int:
    web, domain = _domain(run)
    summary = web.summary()
    lines = [ResonanceLine(**r) for r in summary["resonances"]]
    rows = []
    for r in web.resonances:
        hyper = r.hyperplane()
        rows.append([r.label, " ".join(map(str, r.k)), r.l, r.order,
                     " ".join(str(x) for x in hyper[0]) if hyper else "", str(hyper[1]) if hyper else ""])
    run.csv("resonances.csv", ["label", "k", "l", "order", "normal", "offset"], rows)
    report = WebReport(
        order=web.order,
        lines=lines,
        lines_per_order={str(j): n for j, n in summary["lines_per_order"].items()},
        delta=domain.delta,
        tube_radius=domain.L,
        components=domain.describe()["components"],
    )
    run.json("web.json", report)
    return EXIT_OK


def cmd_verify(run: Run) -> int:
    from app.services.scattering import verify_hypotheses

    report = verify_hypotheses(
        run.model,
        action_grid=run.args.action_grid,
        points=run.args.angle_grid,
        eps=parse_eps(run.args.eps)[0],
        delta=run.args.delta,
    )
    run.json("hypotheses.json", report)
    return EXIT_OK if report.passed else EXIT_VALIDATION


def cmd_melnikov(run: Run) -> int:
    from app.services.melnikov import MelnikovEval, residue_L
    from app.services.scattering import ScatteringMap, angle_grid

    model = run.model
    ev = MelnikovEval(model)
    if run.args.oracle:
        rng = np.random.default_rng(run.args.seed)
        rows, worst_abs, worst_rel = [], 0.0, 0.0
        for _ in range(run.args.samples):
            I = rng.uniform(model.box[:, 0], model.box[:, 1])
            phi = rng.uniform(0.0, 2.0 * np.pi, model.d)
            tau = rng.uniform(-2.0, 2.0)
            quad = ev.L(tau, I, phi)
            closed = float(residue_L(model, tau, I, phi))
            diff = abs(quad - closed)
            worst_abs = max(worst_abs, diff)
            worst_rel = max(worst_rel, diff / max(abs(closed), 1e-300))
            rows.append(list(I) + list(phi) + [tau, quad, closed, diff])
        columns = model.action_names + model.angle_names + ["tau", "quadrature", "residue", "abs_diff"]
        run.csv("melnikov_oracle.csv", columns, rows, x="tau", y=["quadrature", "residue"])
        run.json("melnikov_oracle.json", {"samples": run.args.samples, "max_abs_diff": worst_abs, "max_rel_diff": worst_rel})
        return EXIT_OK
    I = parse_vector(run.args.I)
    if I is None:
        I = model.box.mean(axis=1)
    thetas = angle_grid(model.d, run.args.angle_grid)
    fields = ScatteringMap(model, melnikov=ev).fields(I, thetas)
    rows = [list(t) + [tau, v] + list(g) + [int(ok)]
            for t, tau, v, g, ok in zip(thetas, fields.tau, fields.value, fields.grad, fields.ok)]
    columns = (model.angle_names + ["tau_star", "L_star"] + [f"dL_d{a}" for a in model.angle_names] + ["ok"])
    run.csv("melnikov.csv", columns, rows, x=model.angle_names[0], y=["L_star"])
    return EXIT_OK


def cmd_scatter(run: Run) -> int:
    from app.services.resonance import sample_polyline
    from app.services.scattering import ScatteringMap, angle_grid, gradient_range

    model = run.model
    smap = ScatteringMap(model)
    I = parse_vector(run.args.I)
    if I is None:
        I = model.box.mean(axis=1)
    rows = []
    for eps in parse_eps(run.args.eps):
        fields = smap.fields(I, angle_grid(model.d, run.args.angle_grid))
        for theta, g, ok in zip(fields.thetas, fields.grad, fields.ok):
            if ok:
                rows.append([eps] + list(theta) + list(g) + list(I + eps * g))
    columns = (["eps"] + model.angle_names + [f"dL_d{a}" for a in model.angle_names]
               + [f"{a}_new" for a in model.action_names])
    run.csv("scatter.csv", columns, rows, x=model.angle_names[0], y=[f"dL_d{a}" for a in model.angle_names])
    if run.args.path:
        path = io.read_path_csv(run.args.path)
        rows = []
        for point in sample_polyline(path, run.args.spacing):
            gr = gradient_range(smap, point, run.args.angle_grid)
            rows.append(list(point) + list(gr.lower) + list(gr.upper) + [gr.largest])
        columns = (model.action_names + [f"min_dL_d{a}" for a in model.angle_names]
                   + [f"max_dL_d{a}" for a in model.angle_names] + ["max_norm"])
        run.csv("gradient_range.csv", columns, rows, x=model.action_names[0], y=["max_norm"])
    return EXIT_OK


def cmd_chain(run: Run) -> int:
    from app.services.scattering import build_chain
    from app.services.simulate import drift_demo

    if not run.args.path:
        raise FileNotFoundError("chain needs --path")
    path = io.read_path_csv(run.args.path)
    _, domain = _domain(run)
    eps = parse_eps(run.args.eps)[0]
    chain = build_chain(run.model, path, eps, spacing=run.args.spacing, domain=domain, L=domain.L,
                        points=run.args.angle_grid)
    run.json("chain.json", chain.to_report())
    rows = [[i, lv.chart, lv.branch or ""] + list(lv.action) + [lv.residual or 0.0, lv.margin or 0.0]
            for i, lv in enumerate(chain.levels)]
    columns = ["index", "chart", "branch"] + run.model.action_names + ["residual", "margin"]
    run.csv("chain.csv", columns, rows, x=run.model.action_names[0], y=[run.model.action_names[-1]])
    if run.args.demo:
        orbit = drift_demo(run.model, chain, eps, reverse=run.args.reverse)
        run.csv("pseudo_orbit.csv", ["t"] + run.model.action_names + ["deviation"], orbit.rows(),
                x=run.model.action_names[0], y=[run.model.action_names[-1]])
        run.json("pseudo_orbit.json", {"max_deviation": orbit.max_deviation, "links": len(orbit.jumps),
                                       "flagged": orbit.flagged,
                                       "unsteered": sum(not j["steered"] for j in orbit.jumps)})
    return EXIT_OK


def cmd_sim(run: Run) -> int:
    from app.services.simulate import (
        initial_state,
        integrate,
        quasi_invariance_experiment,
        scattering_experiment,
    )

    model = run.model
    eps_values = parse_eps(run.args.eps)
    I = parse_vector(run.args.I)
    if I is None:
        I = model.box.mean(axis=1)
    phi = parse_vector(run.args.phi)
    if phi is None:
        phi = np.zeros(model.d)
    if run.args.experiment == "scattering":
        rng = np.random.default_rng(run.args.seed)
        points = [(rng.uniform(model.box[:, 0], model.box[:, 1]).tolist(), rng.uniform(0, 2 * np.pi, model.d).tolist())
                  for _ in range(run.args.points)]
        summary = scattering_experiment(model, eps_values, points)
        rows = [[eps] + p["I"] + p["theta"] + [disc] for p in summary["points"] if "discrepancy" in p
                for eps, disc in zip(eps_values, p["discrepancy"])]
        run.csv("scattering_experiment.csv", ["eps"] + model.action_names + model.angle_names + ["discrepancy"], rows,
                x="eps", y=["discrepancy"], logscale=True)
        run.json("scattering_experiment.json", SimulationSummary(kind="scattering", eps=eps_values, values=summary,
                                                               exponent=summary["exponent"]))
        return EXIT_OK
    if run.args.experiment == "invariance":
        summary = quasi_invariance_experiment(model, eps_values, I, phi, run.args.T)
        rows = [[r["eps"], r["averaged"], r["raw"], r["constant"], r["ratio"]] for r in summary["rows"]]
        run.csv("invariance.csv", ["eps", "averaged", "raw", "constant", "ratio"], rows, x="eps",
                y=["averaged", "raw"], logscale=True)
        constants = [r["constant"] for r in summary["rows"] if r["eps"] > 0]
        run.json("invariance.json", SimulationSummary(kind="invariance", eps=eps_values, values=summary,
                                                      constant=max(constants) if constants else None))
        return EXIT_OK
    p = parse_vector(run.args.p)
    q = parse_vector(run.args.q)
    x0 = initial_state(model, I, phi, p, q, 0.0)
    for eps in eps_values:
        traj = integrate(model, x0, eps, run.args.T, run.args.scheme, run.args.step, run.args.samples)
        run.csv(f"trajectory_eps{eps:g}.csv", traj.columns(), traj.rows(), x="t", y=model.action_names)
        run.json(f"trajectory_eps{eps:g}.json", {"eps": eps, "scheme": traj.scheme, "step": traj.step,
                                                 "energy_drift": traj.energy_drift})
    return EXIT_OK


def cmd_normal_form(run: Run) -> int:
    from app.services.averaging import averaged_coefficients_grid, normalize, resonant_keep, resonant_normal_form
    from app.services.resonance import build_web

    model = run.model
    grid = parse_grid(run.args.grid)
    if grid is None:
        grid = model.box_grid(5)
    if run.args.resonance:
        k, l = parse_resonance(run.args.resonance)
        web = build_web(model, run.args.order)
        res = web.find(k, l)
        if res is None:
            raise HypothesisError("H5", f"{run.args.resonance} is not a resonance of the web")
        norm = normalize(model, res.order, keep=resonant_keep(res.index))
        E_hat = parse_vector(run.args.E_hat)
        if E_hat is None:
            E_hat = np.delete(model.box.mean(axis=1), int(np.flatnonzero(res.k)[0]))
        nf = resonant_normal_form(model, res.k, res.l, E_hat, order=res.order, norm=norm)
        run.json("normal_form.json", nf.to_dict())
    else:
        norm = normalize(model, run.args.order)
    rows = [[r["order"], " ".join(map(str, r["k"])), r["l"]] + r["I"] + [r["cos"], r["sin"]]
            for r in averaged_coefficients_grid(norm, grid)]
    run.csv("averaged_coefficients.csv", ["order", "k", "l"] + model.action_names + ["cos", "sin"], rows,
            x=model.action_names[0], y=["cos", "sin"])
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    uvicorn.run("app.main:app", host=args.host or settings.host, port=args.port or settings.port,
                log_level=settings.log_level.lower())
    return EXIT_OK


COMMANDS = {
    "web": cmd_web,
    "verify": cmd_verify,
    "melnikov": cmd_melnikov,
    "scatter": cmd_scatter,
    "chain": cmd_chain,
    "sim": cmd_sim,
    "normal-form": cmd_normal_form,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="resonet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", required=True, help="model file (TOML)")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--seed", type=int, default=settings.seed, help="RNG seed")
    common.add_argument("--eps", default=None, help="comma separated perturbation sizes")
    common.add_argument("--order", type=int, default=2, help="activation order of the web")
    common.add_argument("--delta", type=float, default=0.05, help="radius of the removed set B_delta")
    common.add_argument("--L", type=float, default=None, help="tube radius around secular resonances")
    common.add_argument("--box", default=None, help="override the action box, 'lo:hi' per axis")
    common.add_argument("--angle-grid", type=int, default=settings.angle_grid, help="angle grid points per axis")
    common.add_argument("--I", default=None, help="action point, comma separated")

    sub.add_parser("web", parents=[common], help="resonance web and the removed set B")

    p = sub.add_parser("verify", parents=[common], help="check the standing hypotheses")
    p.add_argument("--action-grid", type=int, default=17, help="action grid points per axis")

    p = sub.add_parser("melnikov", parents=[common], help="reduced Poincare function over an angle grid")
    p.add_argument("--oracle", action="store_true", help="compare quadrature with the residue closed form")
    p.add_argument("--samples", type=int, default=800, help="oracle sample count")

    p = sub.add_parser("scatter", parents=[common], help="scattering map and gradient ranges")
    p.add_argument("--path", default=None, help="polyline CSV (columns I1..Id)")
    p.add_argument("--spacing", type=float, default=0.05, help="sample spacing along the path")

    p = sub.add_parser("chain", parents=[common], help="transition chain along a path")
    p.add_argument("--path", default=None, help="polyline CSV (columns I1..Id)")
    p.add_argument("--spacing", type=float, default=1.0, help="fraction of the admissible jump used per link")
    p.add_argument("--demo", action="store_true", help="replay the chain as a pseudo-orbit")
    p.add_argument("--reverse", action="store_true", help="walk the chain backwards in the demo")

    p = sub.add_parser("sim", parents=[common], help="direct integration and experiments")
    p.add_argument("--experiment", choices=["trajectory", "scattering", "invariance"], default="trajectory")
    p.add_argument("--scheme", choices=["split", "rk8"], default="rk8")
    p.add_argument("--step", type=float, default=None, help="splitting step")
    p.add_argument("--T", type=float, default=10.0, help="integration time")
    p.add_argument("--samples", type=int, default=1001, help="output samples")
    p.add_argument("--points", type=int, default=5, help="random (I, theta) points of the scattering experiment")
    p.add_argument("--phi", default=None, help="initial angles")
    p.add_argument("--p", default=None, help="initial pendulum momenta")
    p.add_argument("--q", default=None, help="initial pendulum positions")

    p = sub.add_parser("normal-form", parents=[common], help="averaged coefficients and resonant normal forms")
    p.add_argument("--resonance", default=None, help="'k1,...,kd|l'")
    p.add_argument("--E-hat", dest="E_hat", default=None, help="level of the non-resonant integrals")
    p.add_argument("--grid", default=None, help="'lo:hi:n' per axis, comma separated")

    p = sub.add_parser("serve", help="HTTP surface")
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None)
    return parser


def _fail(code: int, exc: BaseException, **extra) -> int:
    payload = {"error": str(exc), "error_code": getattr(exc, "error_code", type(exc).__name__), **extra}
    print(json.dumps(payload, sort_keys=True, default=str), file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "serve":
        return cmd_serve(args)
    try:
        run = Run(args)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        return _fail(EXIT_INPUT, exc)
    except VALIDATION_ERRORS as exc:
        return _fail(EXIT_VALIDATION, exc, witness=getattr(exc, "witness", None))
    try:
        code = COMMANDS[args.command](run)
        run.finish()
    except ClearanceError as exc:
        return _fail(EXIT_CLEARANCE, exc, witness=exc.witness, sample=exc.sample)
    except VALIDATION_ERRORS as exc:
        return _fail(EXIT_VALIDATION, exc, witness=getattr(exc, "witness", None))
    except NUMERICAL_ERRORS as exc:
        return _fail(EXIT_NUMERICAL, exc, segment=getattr(exc, "segment", None))
    except (OSError, ValueError) as exc:
        return _fail(EXIT_INPUT, exc)
    except BaseCustomException as exc:
        return _fail(EXIT_NUMERICAL, exc)
    logger.info("Command finished", command=args.command, exit_code=code, out=str(run.out))
    return code


if __name__ == "__main__":
    sys.exit(main())
