"""Command-line entry point: ``semires run | fit | gluing | wavefront``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .gluing import MODES, gluing_csv, gluing_report
from .harness import PRESETS, ExperimentConfig, fit_report, fit_report_csv, load_curve, run_experiment
from .microlocal import coherent_state, fbi_transform, wavefront_mask
from .operators import DEFAULT_LAYOUT, POTENTIAL_FAMILIES, make_grid, make_potential
from .resolvent import Factorization, outgoing_operator


def _h_list(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _emit(text: str, out: str | None, name: str) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    (path / name).write_text(text, newline="\n")


def cmd_run(args) -> int:
    overrides = {}
    if args.preset:
        overrides["preset"] = args.preset
    for key in ("potential", "E", "out", "seed"):
        val = getattr(args, key)
        if val is not None:
            overrides[key] = val
    if args.h_list:
        overrides["h_list"] = args.h_list
    for item in args.set or ():
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.config:
        cfg = ExperimentConfig.from_file(args.config, overrides)
    else:
        cfg = ExperimentConfig.from_mapping(overrides)
    rep = run_experiment(cfg)
    for s in rep.stages.values():
        print(f"{s.name:12s} {s.status:8s} {s.seconds:8.2f}s {s.message}")
    sys.stdout.write(rep.claims_csv())
    print(f"results in {cfg.out} (config hash {rep.config_hash})")
    return 0 if rep.passed else 1


def cmd_fit(args) -> int:
    curve = load_curve(args.input)
    rows = fit_report({curve.label or Path(args.input).name: curve}, N_max=args.N_max)
    sys.stdout.write(fit_report_csv(rows))
    return 0


def cmd_gluing(args) -> int:
    V = make_potential(args.potential)
    rows, fit = gluing_report(args.mode, _h_list(args.h_list), V, args.E, DEFAULT_LAYOUT, tol=args.tol)
    _emit(gluing_csv(rows), args.out, f"gluing_{args.mode}.csv")
    print(f"fitted decay orders {np.round(fit.slopes, 2).tolist()} superpolynomial={fit.superpolynomial}", file=sys.stderr)
    return 0 if fit.superpolynomial else 1


def cmd_wavefront(args) -> int:
    h = args.h
    grid = make_grid(args.L, h / args.points_per_h)
    f = coherent_state(grid, h, args.x0, args.xi0)
    if args.apply == "resolvent":
        V = make_potential(args.potential, grid)
        u = Factorization(outgoing_operator(grid, V, h, DEFAULT_LAYOUT), args.E).solve(f)
    else:
        u = f
    field_ = fbi_transform(u, grid, h, xi_max=args.xi_max)
    mask = wavefront_mask(field_, args.tau)
    _emit(field_.to_csv(), args.out, "amplitude.csv")
    print(f"mask cells {int(mask.mask.sum())}, components {mask.n_components()}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semires", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the staged experiment pipeline")
    r.add_argument("--config", help="flat key = value file")
    r.add_argument("--preset", choices=sorted(PRESETS))
    r.add_argument("--h-list", help="decreasing h values, comma or space separated")
    r.add_argument("--potential", choices=POTENTIAL_FAMILIES)
    r.add_argument("--E", type=float)
    r.add_argument("--out")
    r.add_argument("--seed", type=int)
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="any config key; repeatable")
    r.set_defaults(func=cmd_run)

    f = sub.add_parser("fit", help="classify the a(h) curve of a run directory")
    f.add_argument("--in", dest="input", required=True)
    f.add_argument("--N-max", dest="N_max", type=float, default=3.0)
    f.set_defaults(func=cmd_fit)

    g = sub.add_parser("gluing", help="error-norm report for one gluing mode")
    g.add_argument("--mode", choices=MODES, required=True)
    g.add_argument("--potential", choices=POTENTIAL_FAMILIES, default="nontrap_bump")
    g.add_argument("--h-list", default="0.1 0.07 0.05 0.035 0.025")
    g.add_argument("--E", type=float, default=1.0)
    g.add_argument("--tol", type=float, default=1e-6)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gluing)

    w = sub.add_parser("wavefront", help="FBI amplitude of a packet or its outgoing resolvent image")
    w.add_argument("--h", type=float, default=0.05)
    w.add_argument("--x0", type=float, default=4.5)
    w.add_argument("--xi0", type=float, default=1.0)
    w.add_argument("--apply", choices=("none", "resolvent"), default="resolvent")
    w.add_argument("--potential", choices=POTENTIAL_FAMILIES, default="zero")
    w.add_argument("--E", type=float, default=1.0)
    w.add_argument("--L", type=float, default=13.0)
    w.add_argument("--points-per-h", dest="points_per_h", type=float, default=10.0)
    w.add_argument("--xi-max", dest="xi_max", type=float, default=2.0)
    w.add_argument("--tau", type=float, default=1e-3)
    w.add_argument("--out")
    w.set_defaults(func=cmd_wavefront)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
