"""Scenario runner, weight sweep and command-line front-end.

Outputs are plain CSV/JSON so that plotting stays with external tools.  Data
files carry no timestamps; repeated runs with the same configuration produce
byte-identical output.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .cascade import (
    HARD,
    SmoothingParams,
    metrics,
    simulate,
    trajectory_summary,
    write_trajectory_csv,
)
from .netmodel import PowerNetwork, ieee57_path, load_case, sever
from .protection import (
    DisturbanceEvent,
    ProtectionOutcome,
    identify_disturbance,
    outcome_report,
    run_nps,
    run_rps,
)
from .solver import NPS, RPS, SolverConfig, SolverDivergenceError

log = logging.getLogger(__name__)

NONE = "none"
SCHEMES = (NONE, NPS, RPS)
EXIT_OK, EXIT_ERROR, EXIT_UNVERIFIED = 0, 1, 2
STABLE_FROM = 4.0
STABLE_REL = 1e-3


def default_gammas() -> list[float]:
    return [round(0.1 * k, 1) for k in range(1, 11)] + [float(k) for k in range(2, 11)]


@dataclass
class WeightSpec:
    """Bus weights: uniform, per bus kind, or an explicit vector."""

    kind: str = "uniform"  # uniform | per_kind | vector
    load: float = 1.0
    generator: float = 1.0
    vector: Optional[list[float]] = None

    def resolve(self, network: PowerNetwork) -> np.ndarray:
        if self.kind == "uniform":
            return np.ones(network.n)
        if self.kind == "per_kind":
            if self.load <= 0 or self.generator <= 0:
                raise ValueError("weights must be positive")
            return np.where(network.is_generator, self.generator, self.load).astype(float)
        if self.kind == "vector":
            w = np.asarray(self.vector, dtype=float)
            if w.shape != (network.n,) or np.any(w <= 0):
                raise ValueError(f"weight vector must hold {network.n} positive entries")
            return w
        raise ValueError(f"unknown weight spec {self.kind!r}")

    @classmethod
    def from_gamma(cls, gamma: float) -> "WeightSpec":
        """Generator weight ``gamma`` relative to a unit load weight."""
        return cls("per_kind", load=1.0, generator=float(gamma))


@dataclass
class ScenarioConfig:
    case_path: str = str(ieee57_path())
    sever: list[int] = field(default_factory=list)
    delta: Optional[list[float]] = None
    scheme: str = NONE
    m: int = 4
    rps_steps: Optional[tuple[int, int]] = None
    threshold: Optional[float] = 1.0
    threshold_overrides: dict[int, float] = field(default_factory=dict)
    sigma: float = 1e3
    hard: bool = False  # hard-threshold prediction (unprotected runs only)
    replay_hard: bool = True
    solver: SolverConfig = field(default_factory=SolverConfig)
    weights: WeightSpec = field(default_factory=WeightSpec)
    output_dir: Optional[str] = None

    def __post_init__(self):
        self.scheme = self.scheme.lower()
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.rps_steps is not None:
            a, b = (int(v) for v in self.rps_steps)
            if b != a + 1:
                raise ValueError(f"rps steps must be consecutive, got {a},{b}")
            self.rps_steps = (a, b)
            if self.scheme == RPS:
                self.m = b
        if self.scheme == NPS and self.m < 2:
            raise ValueError(f"NPS needs m >= 2, got {self.m}")
        if self.scheme == RPS and self.m < 3:
            raise ValueError(f"RPS needs m >= 3, got {self.m}")
        if self.sever and self.delta is not None:
            raise ValueError("give either sever or delta, not both")

    @property
    def smoothing(self) -> SmoothingParams:
        return SmoothingParams(self.sigma, hard_threshold=self.hard)

    @property
    def replay(self) -> SmoothingParams:
        return HARD if self.replay_hard else SmoothingParams(self.sigma)


@dataclass
class SweepConfig:
    base: ScenarioConfig = field(default_factory=ScenarioConfig)
    gamma_values: list[float] = field(default_factory=default_gammas)
    nps_m: int = 4
    rps_steps: tuple[int, int] = (3, 4)
    workers: int = 1

    def __post_init__(self):
        if not self.gamma_values:
            raise ValueError("gamma_values must be nonempty")
        if any(not g > 0 for g in self.gamma_values):
            raise ValueError("gamma values must be positive")


@dataclass
class ScenarioResult:
    status: int
    report: dict
    network: Optional[PowerNetwork] = None
    outcome: Optional[ProtectionOutcome] = None


def load_network(config: ScenarioConfig) -> PowerNetwork:
    net = load_case(config.case_path)
    if config.threshold is not None or config.threshold_overrides:
        net = net.with_thresholds(config.threshold,
                                  {int(k): v for k, v in config.threshold_overrides.items()})
    return net.with_weights(config.weights.resolve(net))


def scenario_event(network: PowerNetwork, config: ScenarioConfig) -> Optional[DisturbanceEvent]:
    if config.delta is not None:
        delta = np.asarray(config.delta, dtype=float)
    else:
        delta = sever(network, config.sever)
    from .netmodel import apply_disturbance
    return identify_disturbance(network, apply_disturbance(network, delta))


def step_mismatch(network: PowerNetwork, outcome: ProtectionOutcome) -> float:
    """Squared injection change ``||P - P0||^2`` of the last planned step."""
    last = max(outcome.plan.per_step)
    return float(np.sum(np.square(outcome.plan.per_step[last] - network.p0)))


def execute(config: ScenarioConfig) -> ScenarioResult:
    """Run one scenario in memory (no files)."""
    net = load_network(config)
    event = scenario_event(net, config)
    report: dict = {"scheme": config.scheme, "disturbance": None}
    if event is None:
        report.update(no_disturbance=True, final_metrics=metrics(
            net, simulate(net, net.admittance, net.p0, config.smoothing).final).as_dict())
        return ScenarioResult(EXIT_OK, report, net)
    report["disturbance"] = {"severed": list(event.severed_branches),
                             "changed": int(np.count_nonzero(event.delta))}
    report["no_disturbance"] = False
    if config.scheme == NONE:
        Y1 = net.admittance + event.delta
        traj = simulate(net, np.clip(Y1, 0, None), net.p0, config.smoothing)
        report["cascade"] = trajectory_summary(net, traj)
        report["final_metrics"] = report["cascade"]["final"]
        return ScenarioResult(EXIT_OK, report, net)
    if config.hard:
        raise ValueError("protection schemes need a finite sigma (hard=False)")
    runner = run_nps if config.scheme == NPS else run_rps
    outcome = runner(net, event, config.m, config.solver, config.smoothing,
                     replay=config.replay)
    report.update(outcome_report(net, outcome))
    report["mismatch"] = step_mismatch(net, outcome)
    report["cascade"] = trajectory_summary(net, outcome.trajectory)
    stable, ratio = stable_after(outcome.solver.trajectory) if outcome.solver else (None, None)
    report["stable_after_4s"] = stable
    report["stability_ratio"] = ratio
    status = EXIT_OK if outcome.verified else EXIT_UNVERIFIED
    return ScenarioResult(status, report, net, outcome)


def run_scenario(config: ScenarioConfig) -> int:
    """Run a scenario and write its files to ``config.output_dir``.

    Returns the exit status: 0 on success, 2 when protection could not be
    verified, 1 on error.
    """
    out = Path(config.output_dir) if config.output_dir else None
    try:
        result = execute(config)
    except (OSError, ValueError, KeyError, SolverDivergenceError) as exc:
        log.error("%s", exc)
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            _dump_json(out / "metrics.json", {"error": str(exc)})
        return EXIT_ERROR
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _dump_json(out / "metrics.json", result.report)
        if result.outcome is not None:
            write_trajectory_csv(result.network, result.outcome.trajectory, out / "cascade.csv")
            emit_plot_data(result.network, result.outcome, out)
        elif not result.report.get("no_disturbance"):
            net = result.network
            event = scenario_event(net, config)
            traj = simulate(net, net.admittance + event.delta, net.p0, config.smoothing)
            write_trajectory_csv(net, traj, out / "cascade.csv")
    return result.status


# --------------------------------------------------------------------------
# plot data

def stable_after(trajectory, t0: float = STABLE_FROM, rel: float = STABLE_REL):
    """Whether every component varies by at most ``rel`` of its overall
    range once ``t >= t0``.  Returns ``(flag, worst ratio)``; constant
    components are ignored."""
    t = np.asarray(trajectory.times)
    T = t.size
    X = np.concatenate([trajectory.primal.reshape(T, -1), trajectory.lam.reshape(T, -1),
                        trajectory.tau_upper.reshape(T, -1),
                        trajectory.tau_lower.reshape(T, -1)], axis=1)
    late = X[t >= t0 - 1e-12]
    if late.shape[0] < 2:
        return True, 0.0
    rng = X.max(axis=0) - X.min(axis=0)
    var = late.max(axis=0) - late.min(axis=0)
    moving = rng > 0
    if not moving.any():
        return True, 0.0
    ratio = float(np.max(var[moving] / rng[moving]))
    return ratio <= rel, ratio


def _trajectory_columns(network: PowerNetwork, outcome: ProtectionOutcome) -> list[str]:
    problem = outcome.problem
    steps = sorted(outcome.plan.per_step) if problem.n_steps > 1 else [None]
    order = np.argsort(network.bus_ids)
    ids = [network.bus_ids[i] for i in order]
    tag = (lambda k: "" if k is None else f"{k}_")
    cols = ["time"]
    cols += [f"P_{tag(k)}{b}" for k in steps for b in ids]
    cols += [f"lam_{network.branches[e].id}" for e in problem.edges]
    cols += [f"tau_up_{tag(k)}{b}" for k in steps for b in ids]
    cols += [f"tau_lo_{tag(k)}{b}" for k in steps for b in ids]
    return cols


def emit_plot_data(network: PowerNetwork, outcome: ProtectionOutcome, out_dir) -> dict:
    """Write ``solver_trajectory.csv``, ``shed.csv`` and ``plot_summary.json``.

    Bus columns are in ascending bus id; multipliers follow constraint order.
    """
    if outcome.solver is None:
        raise ValueError("outcome carries no solver trajectory")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tr = outcome.solver.trajectory
    order = np.argsort(network.bus_ids)
    T = tr.times.size
    rows = np.concatenate([
        tr.times[:, None],
        tr.primal[:, :, order].reshape(T, -1),
        tr.lam,
        tr.tau_upper[:, :, order].reshape(T, -1),
        tr.tau_lower[:, :, order].reshape(T, -1),
    ], axis=1)
    with open(out / "solver_trajectory.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_trajectory_columns(network, outcome))
        w.writerows([[repr(float(v)) for v in r] for r in rows])

    shed = outcome.plan.shed_amounts(network.p0)
    steps = sorted(shed)
    with open(out / "shed.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bus"] + [f"shed_step_{k}" for k in steps])
        for i in order:
            w.writerow([network.bus_ids[i]] + [repr(float(shed[k][i])) for k in steps])

    stable, ratio = stable_after(tr)
    summary = {"stable_after_4s": stable, "stability_ratio": ratio,
               "final_time": float(tr.times[-1]), "converged": outcome.solver.converged}
    _dump_json(out / "plot_summary.json", summary)
    return summary


def _dump_json(path: Path, data) -> None:
    with open(path, "w") as fh:
        json.dump(_plain(data), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return x


# --------------------------------------------------------------------------
# sweep

SWEEP_FIELDS = ["gamma", "scheme", "status", "n_connected", "n_active",
                "total_power", "mismatch", "objective", "fallback_used", "error"]


def _sweep_row(base: ScenarioConfig, gamma: float, scheme: str, m: int,
               rps_steps) -> dict:
    row = {"gamma": gamma, "scheme": scheme}
    try:
        cfg = replace(base, scheme=scheme, m=m, rps_steps=rps_steps,
                      weights=WeightSpec.from_gamma(gamma), output_dir=None)
        res = execute(cfg)
        fm = res.report["final_metrics"]
        row.update(status=res.status, n_connected=fm["n_connected"], n_active=fm["n_active"],
                   total_power=fm["total_power"], mismatch=res.report.get("mismatch"),
                   objective=res.report.get("objective"),
                   fallback_used=res.report.get("fallback_used"), error="")
    except Exception as exc:  # noqa: BLE001  recorded per row, sweep continues
        row.update(status=EXIT_ERROR, error=f"{type(exc).__name__}: {exc}")
    return row


def weight_sweep(config: SweepConfig) -> list[dict]:
    """NPS and RPS metrics for each generator/load weight ratio."""
    jobs = []
    for g in config.gamma_values:
        jobs.append((g, NPS, config.nps_m, None))
        jobs.append((g, RPS, config.rps_steps[1], tuple(config.rps_steps)))
    run = lambda j: _sweep_row(config.base, *j)  # noqa: E731
    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            return list(pool.map(run, jobs))
    return [run(j) for j in jobs]


def write_sweep_csv(rows: Sequence[dict], path_or_file) -> None:
    if hasattr(path_or_file, "write"):
        _write_rows(rows, path_or_file)
        return
    with open(path_or_file, "w", newline="") as fh:
        _write_rows(rows, fh)


def _write_rows(rows, fh) -> None:
    w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: r.get(k, "") for k in SWEEP_FIELDS})


# --------------------------------------------------------------------------
# CLI

def parse_gammas(text: str) -> list[float]:
    """``"0.1:10"`` gives the default grid clipped to that range; otherwise a
    comma-separated list."""
    if ":" in text:
        lo, hi = (float(v) for v in text.split(":"))
        grid = [g for g in default_gammas() if lo - 1e-12 <= g <= hi + 1e-12]
        if not grid:
            raise ValueError(f"no grid values in {text}")
        return grid
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with any of the flags below")
    p.add_argument("--case")
    p.add_argument("--sever", type=_ints)
    p.add_argument("--sigma", type=float)
    p.add_argument("--dt", type=float)
    p.add_argument("--horizon", type=float)
    p.add_argument("--threshold", type=float)
    p.add_argument("--smooth-replay", action="store_true", default=None,
                   help="replay the protected cascade with the smooth survival rule")
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridshed",
                                     description="Cascading outage and load-shedding experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one scenario")
    _add_common(run)
    run.add_argument("--scheme", choices=SCHEMES)
    run.add_argument("--m", type=int)
    run.add_argument("--rps-steps", type=_ints)
    run.add_argument("--gamma", type=float)
    run.add_argument("--hard", action="store_true", default=None)
    sw = sub.add_parser("sweep", help="generator/load weight-ratio sweep")
    _add_common(sw)
    sw.add_argument("--gammas", type=parse_gammas)
    sw.add_argument("--workers", type=int)
    return parser


_KEYS = {"case": "case_path", "out": "output_dir"}


def _merge(args: argparse.Namespace) -> dict:
    opts: dict = {}
    if args.config:
        with open(args.config) as fh:
            opts.update(json.load(fh))
    for k, v in vars(args).items():
        if k in ("config", "command", "verbose") or v is None:
            continue
        opts[k] = v
    return {_KEYS.get(k.replace("-", "_"), k.replace("-", "_")): v for k, v in opts.items()}


def scenario_from_options(opts: dict) -> ScenarioConfig:
    opts = dict(opts)
    solver = SolverConfig(**{k: opts.pop(k) for k in ("dt", "horizon", "convergence_tol",
                                                      "kkt_tol") if k in opts})
    gamma = opts.pop("gamma", None)
    weights = WeightSpec.from_gamma(gamma) if gamma is not None else WeightSpec()
    if opts.pop("smooth_replay", False):
        opts["replay_hard"] = False
    if "rps_steps" in opts and opts["rps_steps"] is not None:
        opts["rps_steps"] = tuple(opts["rps_steps"])
    for k in ("gammas", "workers"):
        opts.pop(k, None)
    known = {f for f in ScenarioConfig.__dataclass_fields__}
    unknown = set(opts) - known
    if unknown:
        raise ValueError(f"unknown options {sorted(unknown)}")
    return ScenarioConfig(solver=solver, weights=weights, **opts)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        opts = _merge(args)
        if args.command == "run":
            return run_scenario(scenario_from_options(opts))
        gammas = opts.pop("gammas", None) or default_gammas()
        workers = int(opts.pop("workers", 1))
        base = scenario_from_options(opts)
        rows = weight_sweep(SweepConfig(base, list(gammas), workers=workers))
        if base.output_dir:
            Path(base.output_dir).mkdir(parents=True, exist_ok=True)
            write_sweep_csv(rows, Path(base.output_dir) / "sweep.csv")
        else:
            write_sweep_csv(rows, sys.stdout)
        return EXIT_ERROR if any(r["status"] == EXIT_ERROR for r in rows) else EXIT_OK
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
