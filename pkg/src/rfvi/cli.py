"""Command-line front end: ``rfvi {train,eval,ablate,export,oracle}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as C
from .evaluation import (
    GridSpec,
    MassSweepSpec,
    SuccessCriterion,
    SWEEP_PARAMETER,
    compare_to_grid,
    evaluate,
    export_slice,
    grid_oracle_pendulum,
    mass_sweep,
    write_matrix_csv,
    write_reports,
)
from .solver import train
from .value_net import CheckpointError, load_checkpoint

log = logging.getLogger("rfvi")

EXIT_OK, EXIT_ABORTED, EXIT_USAGE = 0, 3, 2


class CliError(Exception):
    pass


def _resolved(args) -> dict:
    cfg = C.load_config(args.config) if args.config else C.resolve({})
    extra = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        extra.append(f"seed={args.seed}")
    if getattr(args, "threads", None) is not None:
        extra.append(f"threads={args.threads}")
    return C.apply_overrides(cfg, extra) if extra else cfg


def _out_dir(args, default_name: str) -> Path:
    return Path(args.out) if args.out else C.output_root() / default_name


def _run_name(cfg) -> str:
    a = cfg["adversary"]
    scale = a["global_scale"] if a["enabled"] else 0.0
    return f"{cfg['system']['name']}_{cfg['solver']['mode']}_scale{scale:g}_seed{cfg['seed']}"


def _load_policy(path, system):
    try:
        psi = load_checkpoint(path)
    except FileNotFoundError:
        raise CliError(f"checkpoint not found: {path}") from None
    if len(psi.wrap_mask) != system.n or not np.array_equal(psi.wrap_mask, system.wrap_mask):
        raise CliError(
            f"checkpoint {path} was trained for a {len(psi.wrap_mask)}-dimensional state, "
            f"config selects {system.name} with {system.n}"
        )
    return psi


def _criterion(cfg):
    e = cfg["eval"]
    return SuccessCriterion(e["angle_tol_deg"], e["velocity_tol"])


# --------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = _resolved(args)
    system, reward_spec, sets, scfg = C.build(cfg)
    out = _out_dir(args, _run_name(cfg))
    out.mkdir(parents=True, exist_ok=True)
    C.dump_config(cfg, out / "resolved_config.json")
    res = train(scfg, system, reward_spec, sets, out_dir=out)
    rep = evaluate(
        res.params, system, reward_spec, scfg, n_rollouts=cfg["eval"]["rollouts"], seed=cfg["seed"],
        duration=cfg["eval"]["duration"], criterion=_criterion(cfg),
    )
    write_reports(out / "eval_report.json", out / "eval_report.csv", [rep.summary()])
    print(json.dumps({"out": str(out), "aborted": res.aborted, **rep.summary()}, indent=2))
    return EXIT_ABORTED if res.aborted else EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolved(args)
    system, reward_spec, _, scfg = C.build(cfg)
    psi = _load_policy(args.checkpoint, system)
    out = _out_dir(args, "eval")
    e = cfg["eval"]
    if args.mass_sweep:
        policies = {"policy": psi}
        if args.compare:
            policies = {"rfvi": psi, "cfvi": _load_policy(args.compare, system)}
        sweep = MassSweepSpec(e["parameter"] or SWEEP_PARAMETER[system.name], tuple(e["multipliers"]), e["rollouts"])
        res = mass_sweep(policies, system, reward_spec, scfg, sweep, seed=cfg["seed"])
        rows = res.rows()
        out.mkdir(parents=True, exist_ok=True)
        write_reports(out / "mass_sweep.json", out / "mass_sweep.csv", rows)
    else:
        rep = evaluate(
            psi, system, reward_spec, scfg, n_rollouts=e["rollouts"], seed=cfg["seed"], duration=e["duration"],
            criterion=_criterion(cfg),
        )
        rows = [rep.summary()]
        out.mkdir(parents=True, exist_ok=True)
        write_reports(out / "eval_report.json", out / "eval_report.csv", rows)
    C.dump_config(cfg, out / "resolved_config.json")
    print(json.dumps(rows, indent=2))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _resolved(args)
    try:
        scales = [float(s) for s in args.scales.split(",") if s.strip()]
    except ValueError:
        raise C.ConfigError(f"--scales must be comma-separated numbers, got {args.scales!r}") from None
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    for m in modes:
        if m not in ("dp", "rtdp"):
            raise C.ConfigError(f"unknown mode {m!r} in --modes")
    out = _out_dir(args, f"ablate_{cfg['system']['name']}_seed{cfg['seed']}")
    out.mkdir(parents=True, exist_ok=True)
    dump = dict(cfg, ablation={"scales": scales, "modes": modes})
    C.dump_config(dump, out / "resolved_config.json")
    summary = []
    status = EXIT_OK
    for mode in modes:
        for scale in scales:
            run_cfg = C.apply_overrides(cfg, [f"solver.mode={json.dumps(mode)}", f"adversary.global_scale={scale}"])
            system, reward_spec, sets, scfg = C.build(run_cfg)
            run_dir = out / f"{mode}_scale{scale:g}"
            res = train(scfg, system, reward_spec, sets, out_dir=run_dir)
            (run_dir / "metrics.csv").replace(out / f"curve_{mode}_scale{scale:g}.csv")
            rep = evaluate(
                res.params, system, reward_spec, scfg, n_rollouts=cfg["eval"]["rollouts"], seed=cfg["seed"],
                duration=cfg["eval"]["duration"], criterion=_criterion(cfg),
            )
            summary.append({"mode": mode, "global_scale": scale, "aborted": bool(res.aborted), **rep.summary()})
    write_reports(out / "ablation.json", out / "ablation.csv", summary)
    print(json.dumps([{k: r[k] for k in ("mode", "global_scale", "success_rate", "median_state")} for r in summary], indent=2))
    return status


def _parse_grid(text: str, parts: int) -> tuple[int, ...]:
    try:
        vals = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        raise C.ConfigError(f"grid spec {text!r} must look like " + "x".join(["N"] * parts)) from None
    if len(vals) != parts or min(vals) < 2:
        raise C.ConfigError(f"grid spec {text!r} needs {parts} sizes >= 2")
    return vals


def cmd_export(args) -> int:
    cfg = _resolved(args)
    system, reward_spec, _, _ = C.build(cfg)
    psi = _load_policy(args.checkpoint, system)
    shape = _parse_grid(args.grid, 2)
    dims = tuple(int(d) for d in args.dims.split(","))
    if len(dims) != 2:
        raise CliError("--dims needs two comma-separated state indices")
    try:
        gi, gj, V, U = export_slice(psi, system, reward_spec, dims, shape)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    out = _out_dir(args, "export")
    out.mkdir(parents=True, exist_ok=True)
    names = system.state_names
    write_matrix_csv(out / "value.csv", gi, gj, V, names[dims[0]], names[dims[1]])
    for k in range(system.m):
        suffix = "" if system.m == 1 else f"_{k}"
        write_matrix_csv(out / f"policy{suffix}.csv", gi, gj, U[..., k], names[dims[0]], names[dims[1]])
    print(json.dumps({"out": str(out), "V_max": float(V.max()), "abs_u_max": float(np.abs(U).max())}))
    return EXIT_OK


def cmd_oracle(args) -> int:
    cfg = _resolved(args)
    system, reward_spec, sets, scfg = C.build(cfg)
    if system.name != "pendulum":
        raise CliError("the grid oracle supports the pendulum only")
    na, nv, nu = _parse_grid(args.grid, 3)
    spec = GridSpec(n_angle=na, n_velocity=nv, n_actions=nu, rho=scfg.rho, energy_amplitude=args.energy_amplitude)
    t0 = time.perf_counter()
    grid = grid_oracle_pendulum(system, reward_spec, sets, spec)
    info = {"sweeps": grid.sweeps, "residual": grid.residual, "converged": grid.converged,
            "seconds": time.perf_counter() - t0}
    out = _out_dir(args, "oracle")
    out.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(out / "grid_value.csv", grid.angles, grid.velocities, grid.V, "theta", "theta_dot")
    write_matrix_csv(out / "grid_policy.csv", grid.angles, grid.velocities, grid.policy, "theta", "theta_dot")
    if args.checkpoint:
        info.update(compare_to_grid(_load_policy(args.checkpoint, system), system, reward_spec, grid))
    (out / "oracle.json").write_text(json.dumps(info, indent=2) + "\n")
    print(json.dumps(info, indent=2))
    return EXIT_OK if grid.converged else EXIT_ABORTED


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rfvi", description="Robust fitted value iteration")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="JSON run configuration (defaults if omitted)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. adversary.global_scale=0")
        sp.add_argument("--out", help=f"output directory (default under ${C.OUTPUT_ROOT_ENV} or ./runs)")
        if seed:
            sp.add_argument("--seed", type=int)
            sp.add_argument("--threads", type=int, help="worker threads for target computation")

    sp = sub.add_parser("train", help="run DP or RTDP training")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--mass-sweep", action="store_true", help="evaluate across mass multipliers")
    sp.add_argument("--compare", help="second (non-robust) checkpoint for a paired sweep")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="train across adversary scales for DP and RTDP")
    common(sp)
    sp.add_argument("--scales", default="0,0.25,0.5,1")
    sp.add_argument("--modes", default="dp,rtdp")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("export", help="write value/policy slices as CSV matrices")
    common(sp, seed=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--grid", default="101x101")
    sp.add_argument("--dims", default="0,1")
    sp.set_defaults(func=cmd_export)

    sp = sub.add_parser("oracle", help="tabular min-max value iteration (pendulum)")
    common(sp, seed=False)
    sp.add_argument("--grid", default="101x101x41", help="angles x velocities x actions")
    sp.add_argument("--checkpoint", help="compare a trained value function against the grid")
    sp.add_argument("--energy-amplitude", type=float, default=1.0)
    sp.set_defaults(func=cmd_oracle)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (C.ConfigError, CheckpointError, CliError) as exc:
        print(f"rfvi {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
