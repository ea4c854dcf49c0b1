"""End-to-end protection episodes: predict the cascade, shed load, verify.

One episode follows a single disturbance:

1. compare the observed admittance with the reference grid,
2. predict the unprotected cascade with the smooth outage model,
3. solve the shedding problem by saddle dynamics,
4. replay the cascade with the shedding plan in force and check the flows.

The one-shot scheme (NPS) sheds once at step ``m``.  The two-step scheme (RPS)
sheds at ``m-1`` and ``m`` using a linearised flow model, re-checks the exact
step-``m`` flows, and falls back to the one-shot plan when they violate a
limit.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .cascade import (
    HARD,
    CascadeTrajectory,
    CascadeMetrics,
    SmoothingParams,
    band_edges,
    metrics,
    simulate,
    MAX_STEPS,
)
from .netmodel import PowerNetwork
from .powerflow import LIVE_TOL, solve_flow
from .solver import (
    NPS,
    RPS,
    SaddleSolution,
    SheddingProblem,
    SolverConfig,
    build_nps_problem,
    build_rps_problem,
    integrate,
    kkt_residual,
    two_step_flows,
)

FLOW_TOL = 1e-6


@dataclass(frozen=True)
class DisturbanceEvent:
    delta: np.ndarray
    detected_at_step: int = 1
    severed_branches: tuple[int, ...] = ()


def identify_disturbance(reference: PowerNetwork, observed_admittance) -> Optional[DisturbanceEvent]:
    """Disturbance implied by an observed admittance vector.

    Returns ``None`` when nothing changed, in which case no protection is
    needed.
    """
    observed = np.asarray(observed_admittance, dtype=float)
    if observed.shape != (reference.n_branches,):
        raise ValueError(f"observed admittance must have length {reference.n_branches}")
    if np.any(observed < 0):
        raise ValueError("observed admittance must be nonnegative")
    delta = observed - reference.admittance
    if not np.any(np.abs(delta) > 0):
        return None
    severed = tuple(
        br.id for br, y, y0 in zip(reference.branches, observed, reference.admittance)
        if y <= LIVE_TOL and y0 > 0
    )
    return DisturbanceEvent(delta, 1, severed)


@dataclass(frozen=True)
class FlowCheck:
    ok: bool
    violations: list  # (branch id, |flow|, limit)


def verify_flows(network: PowerNetwork, Y, P, limits=None) -> FlowCheck:
    """Exact DC flows checked against ``limits`` (default: branch thresholds)."""
    Y = np.asarray(Y, dtype=float)
    limits = network.thresholds if limits is None else np.asarray(limits, dtype=float)
    flows = solve_flow(network, Y, P).branch_flows
    bad = [
        (network.branches[l].id, float(abs(flows[l])), float(limits[l]))
        for l in np.flatnonzero((Y > LIVE_TOL) & (np.abs(flows) > limits + FLOW_TOL))
    ]
    return FlowCheck(not bad, bad)


def optimizer_limits(network: PowerNetwork, smoothing: SmoothingParams) -> np.ndarray:
    """Flow limits handed to the optimiser.

    A branch loaded exactly to its threshold keeps only half its admittance
    under the smooth survival function, so the limit is pulled in to the lower
    edge of the transition band, the largest flow that survives intact.
    """
    if smoothing.hard_threshold:
        return network.thresholds.copy()
    lo, _ = band_edges(network.thresholds, smoothing)
    if np.any(lo <= 0):
        raise ValueError(
            f"sigma={smoothing.sigma} is too small for the flow thresholds: "
            "no nonzero flow survives intact"
        )
    return np.minimum(network.thresholds, lo)


@dataclass
class SheddingPlan:
    per_step: dict[int, np.ndarray]
    scheme: str
    fallback_used: bool = False

    def schedule(self, p0) -> dict[int, np.ndarray]:
        sched = {1: np.asarray(p0, dtype=float)}
        sched.update(self.per_step)
        return sched

    def shed_amounts(self, p0) -> dict[int, np.ndarray]:
        """Per-step ``P - P0``: positive where load is cut, negative where a
        generator's output is reduced."""
        return {k: v - p0 for k, v in sorted(self.per_step.items())}


@dataclass
class ProtectionOutcome:
    plan: SheddingPlan
    objective: float
    final_metrics: CascadeMetrics
    verified: bool
    trajectory: CascadeTrajectory
    unprotected: CascadeTrajectory
    m: int
    problem: Optional[SheddingProblem] = None
    solver: Optional[SaddleSolution] = None
    step_costs: dict = field(default_factory=dict)
    violations: list = field(default_factory=list)
    exact_check: Optional[FlowCheck] = None

    @property
    def scheme(self) -> str:
        return self.plan.scheme


def _episode_start(network: PowerNetwork, event: Optional[DisturbanceEvent]) -> np.ndarray:
    if event is None:
        return network.admittance.copy()
    from .netmodel import apply_disturbance
    return apply_disturbance(network, event.delta)


def _weighted_cost(network: PowerNetwork, weights, P) -> float:
    return float(np.sum(np.square(weights * (P - network.p0))))


def _finish(network, Y1, plan, replay, max_steps):
    traj = simulate(network, Y1, plan.schedule(network.p0), replay, max_steps=max_steps)
    final = traj.final
    check = verify_flows(network, final.admittance, final.injections)
    return traj, traj.quiescent and check.ok, check.violations


def _solve_nps(network, unprotected, m, solver_config, smoothing, weights):
    problem = build_nps_problem(network, unprotected, m, weights=weights,
                                flow_limits=optimizer_limits(network, smoothing))
    sol = integrate(problem, solver_config)
    P = np.clip(sol.solution.P, network.pmin, network.pmax)
    return problem, sol, P


def run_nps(network: PowerNetwork, event: Optional[DisturbanceEvent], m: int,
            solver_config: SolverConfig = SolverConfig(),
            smoothing: SmoothingParams = SmoothingParams(),
            weights=None, replay: SmoothingParams = HARD,
            max_steps: int = MAX_STEPS) -> ProtectionOutcome:
    """One-shot shedding at cascading step ``m``.

    ``smoothing`` drives the prediction; ``replay`` is the outage rule used
    when re-running the cascade with the plan in force.
    """
    if m < 2:
        raise ValueError(f"one-shot shedding needs m >= 2, got {m}")
    weights = network.weights if weights is None else np.asarray(weights, dtype=float)
    Y1 = _episode_start(network, event)
    unprotected = simulate(network, Y1, network.p0, smoothing, max_steps=max(max_steps, m))
    problem, sol, P = _solve_nps(network, unprotected, m, solver_config, smoothing, weights)
    plan = SheddingPlan({m: P}, NPS)
    traj, verified, violations = _finish(network, Y1, plan, replay, max_steps)
    cost = _weighted_cost(network, weights, P)
    return ProtectionOutcome(
        plan=plan, objective=cost, final_metrics=metrics(network, traj.final),
        verified=verified, trajectory=traj, unprotected=unprotected, m=m,
        problem=problem, solver=sol, step_costs={m: cost}, violations=violations,
    )


def run_rps(network: PowerNetwork, event: Optional[DisturbanceEvent], m: int,
            solver_config: SolverConfig = SolverConfig(),
            smoothing: SmoothingParams = SmoothingParams(),
            weights=None, replay: SmoothingParams = HARD,
            max_steps: int = MAX_STEPS) -> ProtectionOutcome:
    """Two-step shedding at steps ``m-1`` and ``m`` with one-shot fallback."""
    if m < 3:
        raise ValueError(f"two-step shedding needs m >= 3, got {m}")
    if smoothing.hard_threshold:
        raise ValueError("two-step shedding needs a finite smoothing parameter")
    weights = network.weights if weights is None else np.asarray(weights, dtype=float)
    Y1 = _episode_start(network, event)
    unprotected = simulate(network, Y1, network.p0, smoothing, max_steps=max(max_steps, m))
    problem = build_rps_problem(network, unprotected, m, smoothing, weights=weights,
                                flow_limits=optimizer_limits(network, smoothing))
    sol = integrate(problem, solver_config)
    P_prev = np.clip(sol.solution.primal[0], network.pmin, network.pmax)
    P_curr = np.clip(sol.solution.primal[1], network.pmin, network.pmax)

    Y_next, flows = two_step_flows(network, problem.frozen_admittance, P_prev, P_curr, smoothing)
    live = Y_next > LIVE_TOL
    over = live & (np.abs(flows) > network.thresholds + FLOW_TOL)
    exact = FlowCheck(
        not over.any(),
        [(network.branches[l].id, float(abs(flows[l])), float(network.thresholds[l]))
         for l in np.flatnonzero(over)],
    )
    if exact.ok:
        plan = SheddingPlan({m - 1: P_prev, m: P_curr}, RPS, fallback_used=False)
        costs = {m - 1: _weighted_cost(network, weights, P_prev),
                 m: _weighted_cost(network, weights, P_curr)}
        used_problem, used_sol = problem, sol
    else:
        nps_problem, nps_sol, P = _solve_nps(network, unprotected, m, solver_config,
                                             smoothing, weights)
        plan = SheddingPlan({m: P}, RPS, fallback_used=True)
        costs = {m: _weighted_cost(network, weights, P)}
        used_problem, used_sol = nps_problem, nps_sol
    traj, verified, violations = _finish(network, Y1, plan, replay, max_steps)
    return ProtectionOutcome(
        plan=plan, objective=float(sum(costs.values())),
        final_metrics=metrics(network, traj.final), verified=verified, trajectory=traj,
        unprotected=unprotected, m=m, problem=used_problem, solver=used_sol,
        step_costs=costs, violations=violations, exact_check=exact,
    )


def outcome_report(network: PowerNetwork, outcome: ProtectionOutcome) -> dict:
    """JSON-ready summary of a protection episode."""
    shed = outcome.plan.shed_amounts(network.p0)
    report = {
        "scheme": outcome.scheme,
        "m": outcome.m,
        "objective": outcome.objective,
        "step_costs": {str(k): v for k, v in sorted(outcome.step_costs.items())},
        "fallback_used": outcome.plan.fallback_used,
        "verified": outcome.verified,
        "terminated_at": outcome.trajectory.terminated_at,
        "quiescent": outcome.trajectory.quiescent,
        "shed": {
            str(k): {str(b.id): float(v[i]) for i, b in enumerate(network.buses)}
            for k, v in shed.items()
        },
        "negative_shed_buses": sorted({
            network.buses[i].id for v in shed.values() for i in np.flatnonzero(v < -FLOW_TOL)
        }),
        "final_metrics": outcome.final_metrics.as_dict(),
        "violations": [list(v) for v in outcome.violations],
    }
    if outcome.solver is not None and outcome.problem is not None:
        report["solver"] = {
            "converged": outcome.solver.converged,
            "steps": outcome.solver.steps,
            "time": float(outcome.solver.solution.time),
            "kkt": kkt_residual(outcome.solver.solution, outcome.problem).as_dict(),
        }
    return report


def write_report(network: PowerNetwork, outcome: ProtectionOutcome, path) -> None:
    with open(path, "w") as fh:
        json.dump(outcome_report(network, outcome), fh, indent=2, sort_keys=True)
