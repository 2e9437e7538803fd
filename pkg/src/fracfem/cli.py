"""Command line entry point: ``fracfem solve`` and ``fracfem study``.

Exit codes: 0 success, 2 invalid configuration, 3 solver non-convergence
(tables and reports are still written).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .study import ConfigError, load_config, run_single, run_study

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fracfem", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in (("solve", "solve on one mesh and export the solution"),
                       ("study", "run a convergence study and write table.csv / report.json")):
        c = sub.add_parser(name, help=text)
        c.add_argument("--config", required=True, help="JSON configuration file")
        c.add_argument("--out", default=None, help="output directory (overrides output.dir)")
        c.add_argument("--workers", type=int, default=None, help="process pool size for study rows")
        c.add_argument("--seed", type=int, default=None,
                       help="seed for the multistart control initializations")
        c.add_argument("-v", "--verbose", action="store_true")
    return p


def _write(path, text: str) -> None:
    with open(path, "w") as fh:
        fh.write(text)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_default) + "\n"


def _default(obj):
    import numpy as np
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not serializable: {type(obj)}")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.workers is not None and args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
    except ConfigError as exc:
        print(f"{args.config}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or cfg.out or "."
    os.makedirs(out, exist_ok=True)

    if args.command == "solve":
        row, sol = run_single(cfg, seed=args.seed)
        _write(os.path.join(out, "solution.json"), _json(sol))
        _write(os.path.join(out, "report.json"),
               _json({"converged": row.converged, "h": row.h, "N": row.mesh.n_dofs, **row.stats}))
        ok = row.converged
    else:
        result = run_study(cfg, workers=args.workers, seed=args.seed)
        _write(os.path.join(out, "table.csv"), result.table.to_csv())
        _write(os.path.join(out, "report.json"), _json(result.report))
        ok = result.converged
    if not ok:
        print("solver did not converge; partial results written to " + out, file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
