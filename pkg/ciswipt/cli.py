"""Command-line entry point: ci-swipt {gen,solve,check,sweep,ser}."""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional

from ciswipt import bench, ci_precoder, conventional_precoder
from ciswipt.conic import SolverError
from ciswipt.model import (
    ArgumentError,
    CiSolution,
    Constellation,
    DomainError,
    InfeasibleError,
    NoiseModel,
    SymbolFrame,
    channels_from_dict,
    channels_to_dict,
    linear_to_db,
    solution_from_dict,
    solution_to_dict,
    uniform_requirements,
)
from ciswipt.verify import SolutionKind, check_solution, symbol_mc_ser


# Configuration
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
LOG_LEVEL_ENV = "CI_SWIPT_LOG_LEVEL"
EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INFEASIBLE = 2

SCHEMES = {
    "ci-dc": bench.Scheme.CI_DC,
    "ci-sub": bench.Scheme.CI_SUBOPT,
    "ci-sinr": bench.Scheme.CI_SINR_ONLY,
    "conv-sca": bench.Scheme.CONV_SCA,
    "conv-sinr": bench.Scheme.CONV_SINR_ONLY,
}

logger = logging.getLogger("ciswipt")


def _read_json(path: str) -> Any:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ArgumentError(f"{path} is not valid JSON: {e}") from e


def _write_json(path: Optional[str], doc: Dict[str, Any]) -> None:
    text = json.dumps(doc, indent=2)
    if path:
        Path(path).write_text(text)
        logger.info(f"Wrote {path}")
    else:
        print(text)


def _parse_indices(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ArgumentError(f"Symbol indices must be comma-separated integers, got {text!r}") from e


def cmd_gen(args: argparse.Namespace) -> int:
    channels = bench.gen_channels(args.k, args.n, args.seed)
    _write_json(args.out, channels_to_dict(channels, seed=args.seed))
    return EXIT_OK


def cmd_solve(args: argparse.Namespace) -> int:
    doc = _read_json(args.channels)
    channels = channels_from_dict(doc)
    constellation = Constellation(args.mod)
    noise = NoiseModel(args.n0, args.nc)
    requirements = uniform_requirements(channels.K, args.sinr_db, args.eh_db)

    if args.frame:
        frame = SymbolFrame.from_indices(_parse_indices(args.frame), constellation)
    else:
        seed = args.frame_seed
        if seed is None:
            seed = int(doc.get("seed", 0)) if isinstance(doc, dict) else 0
        frame = bench.draw_frame(channels.K, constellation, seed)
    if frame.K != channels.K:
        raise ArgumentError(f"Frame has {frame.K} symbols for {channels.K} users")

    config = bench.SweepConfig(K=channels.K, N=channels.N, modulation=args.mod, n0=args.n0, nc=args.nc,
                               sinr_db=args.sinr_db, eh_db=args.eh_db, values=(args.sinr_db,),
                               dc_init=args.dc_init, sca_starts=args.starts)
    scheme = SCHEMES[args.scheme]
    solution = bench.solve_scheme(scheme, config, channels, frame, requirements, args.seed)

    power = solution.transmit_power
    logger.info(f"{scheme.value}: P_T = {power:.6f} ({linear_to_db(power):.3f} dB)")
    _write_json(args.out, solution_to_dict(
        solution,
        scheme=scheme.value,
        frame=frame.indices(constellation).tolist(),
        sinr_db=args.sinr_db,
        eh_db=args.eh_db,
        n0=args.n0,
        nc=args.nc,
        mod=args.mod,
        transmit_power=power,
        transmit_power_db=linear_to_db(power),
    ))
    return EXIT_OK


def _solution_context(args: argparse.Namespace):
    channels = channels_from_dict(_read_json(args.channels))
    doc = _read_json(args.solution)
    solution = solution_from_dict(doc)
    try:
        constellation = Constellation(int(doc.get("mod", 4)))
        noise = NoiseModel(float(doc.get("n0", 1.0)), float(doc.get("nc", 1.0)))
        frame = SymbolFrame.from_indices(doc["frame"], constellation)
        eh_db = doc.get("eh_db")
        requirements = uniform_requirements(channels.K, float(doc["sinr_db"]), eh_db)
    except KeyError as e:
        raise ArgumentError(f"Solution document lacks {e}") from e
    if doc.get("scheme") in (bench.Scheme.CI_SINR_ONLY.value, bench.Scheme.CONV_SINR_ONLY.value):
        requirements = uniform_requirements(channels.K, float(doc["sinr_db"]), None)
    return channels, doc, solution, constellation, noise, frame, requirements


def cmd_check(args: argparse.Namespace) -> int:
    channels, _doc, solution, constellation, noise, frame, requirements = _solution_context(args)
    kind = SolutionKind.CI if isinstance(solution, CiSolution) else SolutionKind.CONV
    report = check_solution(kind, solution, channels, frame, requirements, noise, constellation)
    print(json.dumps(report.to_dict(), indent=2))
    if not report.passed:
        logger.error(f"Audit FAILED with min slack {report.min_slack:.3e}")
        return EXIT_ERROR
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    if args.config:
        config = bench.SweepConfig.from_json(Path(args.config).read_text())
    else:
        config = bench.PRESETS[args.preset]()
    overrides: Dict[str, Any] = {}
    if args.instances is not None:
        overrides["instances"] = args.instances
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.mean_of_db:
        overrides["averaging"] = bench.Averaging.DB
    if args.timing:
        overrides["record_timing"] = True
    if overrides:
        config = replace(config, **overrides)

    _rows, text = bench.run_sweep(config, Path(args.out) if args.out else None)
    if not args.out:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_ser(args: argparse.Namespace) -> int:
    channels, doc, solution, constellation, noise, frame, requirements = _solution_context(args)
    if not isinstance(solution, CiSolution):
        raise ArgumentError("SER simulation needs a CI solution")

    precoder = None
    if args.redesign:
        scheme = bench.Scheme(doc.get("scheme", bench.Scheme.CI_SUBOPT.value))
        if scheme is bench.Scheme.CI_DC:
            def precoder(rot):
                init = ci_precoder.find_feasible_start(rot, requirements, noise, constellation=constellation)
                return ci_precoder.solve_dc(rot, requirements, noise, init, constellation=constellation)[0]
        elif scheme is bench.Scheme.CI_SINR_ONLY:
            def precoder(rot):
                return ci_precoder.solve_sinr_only(rot, requirements, noise, constellation=constellation)

    report = symbol_mc_ser(solution, channels, frame, requirements, noise, constellation,
                           n_symbols=args.symbols, seed=args.seed, redesign=args.redesign,
                           precoder=precoder, workers=args.workers)
    _write_json(args.out, report.to_dict())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ci-swipt", description="CI precoding for SWIPT: solvers and sweeps")
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="draw a seeded Rayleigh channel")
    gen.add_argument("--k", type=int, required=True)
    gen.add_argument("--n", type=int, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out")
    gen.set_defaults(func=cmd_gen)

    solve = sub.add_parser("solve", help="solve one instance with one scheme")
    solve.add_argument("--scheme", choices=sorted(SCHEMES), required=True)
    solve.add_argument("--channels", required=True)
    solve.add_argument("--sinr-db", type=float, required=True)
    solve.add_argument("--eh-db", type=float, default=None)
    solve.add_argument("--n0", type=float, default=1.0)
    solve.add_argument("--nc", type=float, default=1.0)
    solve.add_argument("--mod", type=int, default=4)
    solve.add_argument("--frame", help="comma-separated symbol indices, one per user")
    solve.add_argument("--frame-seed", type=int, default=None)
    solve.add_argument("--dc-init", choices=["feasible", "suboptimal"], default="feasible")
    solve.add_argument("--starts", type=int, default=conventional_precoder.SCA_STARTS)
    solve.add_argument("--seed", type=int, default=0, help="seed for random SCA starts")
    solve.add_argument("--out")
    solve.set_defaults(func=cmd_solve)

    check = sub.add_parser("check", help="audit a solution against its channels")
    check.add_argument("--channels", required=True)
    check.add_argument("--solution", required=True)
    check.set_defaults(func=cmd_check)

    sweep = sub.add_parser("sweep", help="run a Monte Carlo sweep to CSV")
    source = sweep.add_mutually_exclusive_group(required=True)
    source.add_argument("--config")
    source.add_argument("--preset", choices=sorted(bench.PRESETS))
    sweep.add_argument("--out")
    sweep.add_argument("--instances", type=int, default=None)
    sweep.add_argument("--workers", type=int, default=None)
    sweep.add_argument("--mean-of-db", action="store_true")
    sweep.add_argument("--timing", action="store_true", help="fill the seconds column")
    sweep.set_defaults(func=cmd_sweep)

    ser = sub.add_parser("ser", help="Monte Carlo symbol error rate of a CI solution")
    ser.add_argument("--channels", required=True)
    ser.add_argument("--solution", required=True)
    ser.add_argument("--symbols", type=int, default=100_000)
    ser.add_argument("--seed", type=int, default=0)
    ser.add_argument("--redesign", action="store_true", help="redraw the frame and re-solve each slot")
    ser.add_argument("--workers", type=int, default=1)
    ser.add_argument("--out")
    ser.set_defaults(func=cmd_ser)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    level = logging.DEBUG if args.verbose else os.environ.get(LOG_LEVEL_ENV, "INFO").upper()
    logging.basicConfig(level=level, format=LOG_FORMAT)

    try:
        return args.func(args)
    except InfeasibleError as e:
        logger.error(f"Infeasible: {e}")
        return EXIT_INFEASIBLE
    except (ArgumentError, DomainError, SolverError, bench.AuditError, OSError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
