"""``msplin`` command line: run, converge, bench, energies."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .experiments import (SCHEMES, ConfigError, RunConfig, bench, converge, run,
                          write_report, write_rows)
from .linalg import SolverError

log = logging.getLogger("msplin")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(args) -> RunConfig:
    data = {}
    if args.config:
        with open(args.config) as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        data[key.strip()] = _parse_value(value)
    if args.seed is not None:
        data["seed"] = args.seed
    if getattr(args, "stride", None) is not None:
        data["stride"] = args.stride
    if args.out is not None:
        data["out"] = args.out
    return RunConfig.from_dict(data)


def _levels(text: str):
    return [_parse_value(v) for v in text.split(",") if v.strip()]


def cmd_run(args) -> int:
    cfg = load_config(args)
    rep = run(cfg, write=False)
    out = cfg.out or "."
    write_report(rep, out)
    summary = rep.summary()
    log.info("wrote %s", out)
    print(json.dumps({k: summary[k] for k in ("steps", "drift_polarised", "drift_plain",
                                               "eps_shape", "eps_phase", "l2_error")}))
    return 0


def cmd_energies(args) -> int:
    cfg = load_config(args)
    rep = run(cfg, write=False)
    rows = [{"step": i + 1, "t": float(rep.times[i]),
             "energy_polarised": float(rep.energy_polarised[i]),
             "energy_plain": float(rep.energy_plain[i])} for i in range(rep.n_steps)]
    out = Path(cfg.out or ".")
    write_rows(out / "energies.csv", rows)
    print(json.dumps({"conserved": rep.conserved,
                      "drift_polarised": rep.drift("polarised"),
                      "drift_plain": rep.drift("plain")}))
    return 0


def cmd_converge(args) -> int:
    cfg = load_config(args)
    rows = converge(cfg, args.axis, _levels(args.levels))
    out = Path(cfg.out or ".")
    write_rows(out / f"converge_{args.axis}.csv", rows)
    for r in rows:
        order = "" if r["order"] is None else f"{r['order']:.3f}"
        print(f"{r['h']:.6g}\t{r['error']:.6e}\t{order}")
    return 0


def cmd_bench(args) -> int:
    base = load_config(args)
    schemes = args.schemes.split(",") if args.schemes else [base.scheme]
    for s in schemes:
        if s not in SCHEMES:
            raise ConfigError(f"unknown scheme {s!r}")
    sizes = [int(m) for m in _levels(args.sizes)] if args.sizes else [base.M]
    configs = [base.replace(scheme=s, M=m, My=None if base.My is None else m)
               for m in sizes for s in schemes]
    rows = bench(configs, repeats=args.repeats)
    out = Path(base.out or ".")
    write_rows(out / "bench.csv", rows)
    for r in rows:
        print(f"{r['scheme']}\tM={r['M']}\t{r['median_seconds']:.4g}s\t"
              f"solves/step={r['linear_solves_per_step']:.2f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msplin", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (value parsed as JSON when possible)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--stride", type=int, help="snapshot every n steps")

    p = sub.add_parser("run", help="run one trajectory and write its report")
    common(p)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("energies", help="write the energy traces of one trajectory")
    common(p)
    p.set_defaults(func=cmd_energies)
    p = sub.add_parser("converge", help="convergence study against the exact soliton")
    common(p)
    p.add_argument("--axis", choices=("space", "time"), required=True)
    p.add_argument("--levels", required=True, help="comma separated M values or step sizes")
    p.set_defaults(func=cmd_converge)
    p = sub.add_parser("bench", help="median wall time over repeated runs")
    common(p)
    p.add_argument("--schemes", help="comma separated list, default: the config scheme")
    p.add_argument("--sizes", help="comma separated grid sizes")
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"msplin: error: {exc}", file=sys.stderr)
        return 2
    except SolverError as exc:
        print(f"msplin: solver failure: {exc}", file=sys.stderr)
        return 3
