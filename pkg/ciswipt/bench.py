"""Seeded channel generation and Monte Carlo power sweeps over both precoding schemes."""

import json
import logging
import math
import os
import threading
import time
from dataclasses import asdict, dataclass, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ciswipt import ci_precoder, conventional_precoder
from ciswipt.conic import SolverError
from ciswipt.model import (
    ArgumentError,
    ChannelInstance,
    Constellation,
    InfeasibleError,
    NoiseModel,
    SymbolFrame,
    UserRequirement,
    channels_to_dict,
    linear_to_db,
    rotate_channels,
    solution_to_dict,
    uniform_requirements,
)
from ciswipt.store import ResultStore
from ciswipt.verify import SolutionKind, check_solution


# Configuration
DEFAULT_SINR_AXIS = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0)
DEFAULT_EH_AXIS = (0.0, 4.0, 8.0, 12.0, 16.0, 20.0)
DEFAULT_ANTENNA_AXIS = (4, 6, 8, 10, 12)
CSV_COLUMNS = ["axis", "scheme", "mean_power_db", "std_db", "feasible", "iters", "seconds"]
WORKERS_ENV = "CI_SWIPT_WORKERS"
STATUS_SOLVED = "solved"
STATUS_INFEASIBLE = "infeasible"
STATUS_SOLVER_ERROR = "solver_error"

logger = logging.getLogger(__name__)


class AuditError(RuntimeError):
    """A solver returned a point that fails the independent constraint audit.

    Attributes:
        dump: JSON-ready diagnostic document (channels, frame, solution, slacks).
    """

    def __init__(self, message: str, dump: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.dump = dump or {}


class SweepAxis(str, Enum):
    SINR_DB = "SINR_DB"
    EH_DB = "EH_DB"
    ANTENNAS = "ANTENNAS"


class Scheme(str, Enum):
    CI_DC = "CI_DC"
    CI_SUBOPT = "CI_SUBOPT"
    CONV_SCA = "CONV_SCA"
    CONV_SINR_ONLY = "CONV_SINR_ONLY"
    CI_SINR_ONLY = "CI_SINR_ONLY"


class Averaging(str, Enum):
    LINEAR = "linear"   # dB of the mean linear power
    DB = "db"           # mean of per-instance dB values


@dataclass(frozen=True)
class SweepConfig:
    """One Monte Carlo sweep along a single axis.

    sinr_db and eh_db are the fixed targets for the axes they do not sweep;
    eh_db=None drops the EH requirement.
    """

    K: int = 4
    N: int = 4
    modulation: int = 4
    n0: float = 1.0
    nc: float = 1.0
    axis: SweepAxis = SweepAxis.SINR_DB
    values: Tuple[float, ...] = DEFAULT_SINR_AXIS
    sinr_db: float = 20.0
    eh_db: Optional[float] = 10.0
    instances: int = 100
    base_seed: int = 0
    schemes: Tuple[Scheme, ...] = tuple(Scheme)
    dc_init: str = "feasible"
    averaging: Averaging = Averaging.LINEAR
    record_timing: bool = False
    dc_tol: float = ci_precoder.DC_TOL
    dc_max_outer: int = ci_precoder.DC_MAX_OUTER
    sca_starts: int = conventional_precoder.SCA_STARTS
    workers: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "axis", SweepAxis(self.axis))
        object.__setattr__(self, "averaging", Averaging(self.averaging))
        object.__setattr__(self, "schemes", tuple(Scheme(s) for s in self.schemes))
        object.__setattr__(self, "values", tuple(self.values))
        if self.instances < 1:
            raise ArgumentError("instances must be >= 1")
        if not self.values:
            raise ArgumentError("Sweep axis needs at least one value")
        if not self.schemes:
            raise ArgumentError("Sweep needs at least one scheme")
        if self.K < 1 or self.N < 1:
            raise ArgumentError("K and N must be >= 1")
        if self.dc_init not in ("feasible", "suboptimal"):
            raise ArgumentError(f"dc_init must be 'feasible' or 'suboptimal', got {self.dc_init!r}")
        if self.axis is SweepAxis.ANTENNAS and any(int(v) != v or v < 1 for v in self.values):
            raise ArgumentError("Antenna counts must be positive integers")

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "SweepConfig":
        """Build from a config document, rejecting unknown keys."""
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ArgumentError(f"Unknown sweep config keys: {unknown}")
        try:
            return cls(**doc)
        except (TypeError, ValueError) as e:
            if isinstance(e, ArgumentError):
                raise
            raise ArgumentError(f"Invalid sweep config: {e}") from e

    @classmethod
    def from_json(cls, text: str) -> "SweepConfig":
        """Parse a JSON config document."""
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ArgumentError(f"Malformed sweep config JSON: {e}") from e
        if not isinstance(doc, dict):
            raise ArgumentError("Sweep config must be a JSON object")
        return cls.from_dict(doc)

    def to_dict(self) -> Dict[str, Any]:
        """JSON-ready document; enums are stored by value."""
        doc = asdict(self)
        doc["axis"] = self.axis.value
        doc["averaging"] = self.averaging.value
        doc["schemes"] = [s.value for s in self.schemes]
        doc["values"] = list(self.values)
        return doc

    @property
    def constellation(self) -> Constellation:
        """PSK alphabet of the sweep."""
        return Constellation(self.modulation)

    @property
    def noise(self) -> NoiseModel:
        """Noise powers of the sweep."""
        return NoiseModel(self.n0, self.nc)

    def point(self, value: float) -> Tuple[int, List[UserRequirement]]:
        """Antenna count and requirements at one axis value."""
        sinr_db, eh_db, n = self.sinr_db, self.eh_db, self.N
        if self.axis is SweepAxis.SINR_DB:
            sinr_db = float(value)
        elif self.axis is SweepAxis.EH_DB:
            eh_db = float(value)
        else:
            n = int(value)
        return n, uniform_requirements(self.K, sinr_db, eh_db)


def figure2(**overrides: Any) -> SweepConfig:
    """Power versus SINR target at E = 10 dB."""
    return replace(SweepConfig(axis=SweepAxis.SINR_DB, values=DEFAULT_SINR_AXIS, eh_db=10.0), **overrides)


def figure3(**overrides: Any) -> SweepConfig:
    """Power versus EH target at Gamma = 20 dB."""
    return replace(SweepConfig(axis=SweepAxis.EH_DB, values=DEFAULT_EH_AXIS, sinr_db=20.0), **overrides)


def figure4(**overrides: Any) -> SweepConfig:
    """Power versus antenna count at Gamma = E = 20 dB."""
    return replace(SweepConfig(axis=SweepAxis.ANTENNAS, values=DEFAULT_ANTENNA_AXIS,
                               sinr_db=20.0, eh_db=20.0), **overrides)


PRESETS = {"fig2": figure2, "fig3": figure3, "fig4": figure4}


@dataclass(frozen=True)
class SweepRow:
    axis: Any
    scheme: Scheme
    mean_power_db: Optional[float]
    std_db: Optional[float]
    feasible: int
    iters: Optional[float]
    seconds: Optional[float] = None

    def to_record(self) -> Dict[str, Any]:
        """CSV record keyed by CSV_COLUMNS."""
        return {
            "axis": self.axis,
            "scheme": self.scheme.value,
            "mean_power_db": self.mean_power_db,
            "std_db": self.std_db,
            "feasible": self.feasible,
            "iters": self.iters,
            "seconds": self.seconds,
        }


# ---------------------------------------------------------------------------
# Data generation
# ---------------------------------------------------------------------------

def gen_channels(K: int, N: int, seed: int) -> ChannelInstance:
    """Rayleigh channel with i.i.d. CN(0, 1) entries, deterministic in seed."""
    if K < 1 or N < 1:
        raise ArgumentError(f"K and N must be >= 1, got K={K}, N={N}")
    rng = np.random.default_rng(seed)
    h = (rng.standard_normal((K, N)) + 1j * rng.standard_normal((K, N))) / math.sqrt(2.0)
    return ChannelInstance(h)


def draw_frame(K: int, constellation: Constellation, seed: int) -> SymbolFrame:
    """Uniform random symbol frame; its stream is independent of the channel's."""
    rng = np.random.default_rng([seed, 1])
    return SymbolFrame.from_indices(rng.integers(0, constellation.order, size=K), constellation)


def aggregate(powers: Sequence[float], averaging: Averaging = Averaging.LINEAR) -> float:
    """Mean power in dB: 10 log10 of the linear mean, or the mean of dB values.

    Raises:
        ArgumentError: If powers is empty.
    """
    powers = np.asarray(powers, dtype=float)
    if powers.size == 0:
        raise ArgumentError("Cannot aggregate an empty power list")
    if Averaging(averaging) is Averaging.DB:
        return float(np.mean(10.0 * np.log10(powers)))
    return linear_to_db(float(np.mean(powers)))


# ---------------------------------------------------------------------------
# Per-instance work
# ---------------------------------------------------------------------------

def solve_scheme(
    scheme: Scheme,
    config: SweepConfig,
    channels: ChannelInstance,
    frame: SymbolFrame,
    requirements: List[UserRequirement],
    seed: int,
):
    noise, cons = config.noise, config.constellation
    if scheme is Scheme.CONV_SINR_ONLY:
        return conventional_precoder.solve_sinr_only(channels, requirements, noise)
    if scheme is Scheme.CONV_SCA:
        return conventional_precoder.solve_multistart(
            channels, requirements, noise, starts=config.sca_starts, seed=seed,
            tol=config.dc_tol, max_outer=config.dc_max_outer,
        )

    rotated = rotate_channels(channels, frame)
    if scheme is Scheme.CI_SINR_ONLY:
        return ci_precoder.solve_sinr_only(rotated, requirements, noise, constellation=cons)
    if scheme is Scheme.CI_SUBOPT:
        return ci_precoder.solve_suboptimal(rotated, requirements, noise)
    if config.dc_init == "suboptimal":
        init = ci_precoder.solve_suboptimal(rotated, requirements, noise)
    else:
        init = ci_precoder.find_feasible_start(rotated, requirements, noise, constellation=cons)
    solution, _ = ci_precoder.solve_dc(rotated, requirements, noise, init, config.dc_tol,
                                       config.dc_max_outer, cons)
    return solution


def run_instance(config: SweepConfig, value: float, instance: int) -> Dict[Scheme, Dict[str, Any]]:
    """Run every configured scheme on one seeded instance and audit each result.

    Returns:
        Per-scheme records with status, power, feasible, iterations and seconds.
        A numerical solver failure is recorded with status solver_error and
        feasible None.

    Raises:
        AuditError: If a returned solution fails check_solution.
    """
    n, requirements = config.point(value)
    seed = config.base_seed + instance
    channels = gen_channels(config.K, n, seed)
    frame = draw_frame(config.K, config.constellation, seed)

    records: Dict[Scheme, Dict[str, Any]] = {}
    for scheme in config.schemes:
        sinr_only = scheme in (Scheme.CI_SINR_ONLY, Scheme.CONV_SINR_ONLY)
        audited = [UserRequirement(r.gamma) for r in requirements] if sinr_only else requirements
        started = time.perf_counter()
        try:
            solution = solve_scheme(scheme, config, channels, frame, requirements, seed)
        except InfeasibleError:
            logger.warning(f"{scheme.value} infeasible at axis={value} instance={instance}")
            records[scheme] = {"status": STATUS_INFEASIBLE, "feasible": False, "power": None,
                               "iterations": 0, "seconds": None}
            continue
        except SolverError as e:
            # Feasibility is unknown; kept out of both the solved and the infeasible counts
            logger.error(f"{scheme.value} solver failure at axis={value} instance={instance}: {e}")
            records[scheme] = {"status": STATUS_SOLVER_ERROR, "feasible": None, "power": None,
                               "iterations": 0, "seconds": None, "error": str(e)}
            continue
        elapsed = time.perf_counter() - started

        kind = SolutionKind.CONV if scheme.value.startswith("CONV") else SolutionKind.CI
        report = check_solution(kind, solution, channels, frame, audited, config.noise, config.constellation)
        if not report.passed:
            dump = {
                "scheme": scheme.value,
                "axis_value": value,
                "instance": instance,
                "seed": seed,
                "frame": frame.indices(config.constellation).tolist(),
                "requirements": [{"gamma": r.gamma, "energy": r.energy} for r in audited],
                "noise": {"n0": config.noise.n0, "nc": config.noise.nc},
                "report": report.to_dict(),
            }
            dump.update(channels_to_dict(channels))
            dump["solution"] = solution_to_dict(solution)
            raise AuditError(
                f"{scheme.value} failed the audit at axis={value} instance={instance} "
                f"(min slack {report.min_slack:.3e})",
                dump,
            )
        records[scheme] = {
            "status": STATUS_SOLVED,
            "feasible": True,
            "power": solution.transmit_power,
            "iterations": solution.iterations,
            "seconds": elapsed,
        }
    return records


class SweepWorker:
    """Processes a share of (axis value, instance) jobs into a ResultStore."""

    def __init__(self, store: ResultStore, config: SweepConfig, jobs: List[Tuple[int, int]], name: str = "worker"):
        """Initialize the worker.

        Args:
            store: ResultStore receiving one record per (axis index, instance, scheme).
            config: Sweep configuration (read-only).
            jobs: (axis index, instance) pairs to process in order.
            name: Label used in log lines.
        """
        self.store = store
        self.config = config
        self.jobs = jobs
        self.name = name
        self.running = False

    def run(self) -> None:
        """Process jobs until done, stopped, or a job fails."""
        self.running = True
        logger.info(f"Sweep {self.name} started with {len(self.jobs)} jobs")
        for axis_index, instance in self.jobs:
            if not self.running:
                break
            value = self.config.values[axis_index]
            try:
                records = run_instance(self.config, value, instance)
            except Exception as e:
                logger.error(f"Sweep {self.name} failed at axis={value} instance={instance}: {e}")
                self.store.add_error((axis_index, instance), e)
                self.running = False
                break
            for scheme, record in records.items():
                self.store.add_result((axis_index, instance, list(Scheme).index(scheme)), record)
        logger.info(f"Sweep {self.name} stopped")

    def stop(self) -> None:
        """Stop the worker after its current job."""
        self.running = False


def default_workers() -> int:
    """Worker count from CI_SWIPT_WORKERS (default 1)."""
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        raise ArgumentError(f"{WORKERS_ENV} must be an integer")


def start_workers(store: ResultStore, config: SweepConfig, n_workers: int) -> List[Tuple[SweepWorker, threading.Thread]]:
    """Fan the sweep's jobs out round-robin to n_workers background threads.

    Returns:
        (worker, thread) pairs; threads are already started.
    """
    jobs = [(a, i) for a in range(len(config.values)) for i in range(config.instances)]
    started = []
    for w in range(n_workers):
        worker = SweepWorker(store, config, jobs[w::n_workers], name=f"worker-{w}")
        thread = threading.Thread(target=worker.run, daemon=True, name=worker.name)
        thread.start()
        started.append((worker, thread))
    return started


def summarize(config: SweepConfig, snapshot: Dict[str, Any]) -> List[SweepRow]:
    """Reduce per-instance records to one row per (axis value, scheme), in fixed order."""
    grouped: Dict[Tuple[int, int], List[Dict[str, Any]]] = {}
    for (axis_index, _instance, scheme_index), record in snapshot['records']:
        grouped.setdefault((axis_index, scheme_index), []).append(record)

    order = list(Scheme)
    rows = []
    for axis_index, value in enumerate(config.values):
        for scheme in config.schemes:
            records = grouped.get((axis_index, order.index(scheme)), [])
            ok = [r for r in records if r["feasible"]]
            powers = [r["power"] for r in ok]
            mean_db = std_db = iters = seconds = None
            if powers:
                mean_db = aggregate(powers, config.averaging)
                in_db = 10.0 * np.log10(powers)
                std_db = float(np.std(in_db, ddof=1)) if len(powers) > 1 else 0.0
                iters = float(np.mean([r["iterations"] for r in ok]))
                if config.record_timing:
                    seconds = float(np.mean([r["seconds"] for r in ok]))
            axis_value = int(value) if config.axis is SweepAxis.ANTENNAS else float(value)
            rows.append(SweepRow(axis_value, scheme, mean_db, std_db, len(ok), iters, seconds))
    return rows


def rows_to_csv(rows: Sequence[SweepRow]) -> str:
    """Render summary rows as CSV text with fixed float formatting."""
    frame = pd.DataFrame([row.to_record() for row in rows], columns=CSV_COLUMNS)
    return frame.to_csv(index=False, float_format="%.6f", lineterminator="\n")


def solver_failures(config: SweepConfig, snapshot: Dict[str, Any]) -> List[Dict[str, Any]]:
    """Instances whose solver broke down, in (axis, instance, scheme) order."""
    order = list(Scheme)
    failures = []
    for (axis_index, instance, scheme_index), record in snapshot["records"]:
        if record.get("status") == STATUS_SOLVER_ERROR:
            failures.append({
                "axis": config.values[axis_index],
                "instance": instance,
                "scheme": order[scheme_index].value,
                "error": record.get("error", ""),
            })
    return failures


def sweep_metadata(config: SweepConfig, failures: Sequence[Dict[str, Any]] = ()) -> Dict[str, Any]:
    """Content of the <out>.meta.json sidecar."""
    return {
        "config": config.to_dict(),
        "averaging": config.averaging.value,
        "noise_reading": "N0 = NC = noise powers of the antenna and conversion stages",
        "columns": CSV_COLUMNS,
        "std_db": "sample standard deviation of per-instance powers in dB",
        "feasible": "instances solved; solver failures are listed separately",
        "solver_failures": list(failures),
    }


def run_sweep(config: SweepConfig, out_path: Optional[Path] = None) -> Tuple[List[SweepRow], str]:
    """Run a full sweep, audit every solution and emit the CSV.

    Args:
        config: Sweep configuration.
        out_path: If given, the CSV is written there with a <out>.meta.json
            sidecar; audit failures are dumped to <out>.audit.json.

    Returns:
        Summary rows and the CSV text.

    Raises:
        AuditError: If any solver output fails the audit.
    """
    n_workers = config.workers or default_workers()
    n_workers = max(1, min(n_workers, len(config.values) * config.instances))
    logger.info(
        f"Sweep over {config.axis.value} {list(config.values)}: {config.instances} instances, "
        f"{len(config.schemes)} schemes, {n_workers} workers"
    )

    store = ResultStore()
    started = start_workers(store, config, n_workers)
    for _worker, thread in started:
        thread.join()

    failure = store.first_error()
    if failure is not None:
        (axis_index, instance), error = failure
        if isinstance(error, AuditError) and out_path is not None:
            dump_path = Path(f"{out_path}.audit.json")
            dump_path.write_text(json.dumps(error.dump, indent=2))
            logger.error(f"Audit dump written to {dump_path}")
        raise error

    snapshot = store.snapshot()
    rows = summarize(config, snapshot)
    failures = solver_failures(config, snapshot)
    if failures:
        logger.error(f"{len(failures)} solver failures excluded from the averages")
    text = rows_to_csv(rows)
    if out_path is not None:
        out_path = Path(out_path)
        out_path.write_text(text)
        Path(f"{out_path}.meta.json").write_text(json.dumps(sweep_metadata(config, failures), indent=2))
        logger.info(f"Sweep results written to {out_path}")
    logger.info(f"Sweep finished: {len(rows)} rows")
    return rows, text
