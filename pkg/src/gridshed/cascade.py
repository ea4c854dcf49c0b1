"""Branch survival and the step-wise cascading outage model."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Mapping, Union

import numpy as np

from .netmodel import PowerNetwork
from .powerflow import solve_flow

QUIESCENCE_TOL = 1e-9
CONNECTED_TOL = 1e-9
ACTIVE_TOL = 1e-6
MAX_STEPS = 50


@dataclass(frozen=True)
class SmoothingParams:
    """Sharpness of the survival function.

    ``hard_threshold`` switches to the step-function limit (a branch survives
    iff ``|flow| <= c``).
    """

    sigma: float = 1e3
    hard_threshold: bool = False

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


HARD = SmoothingParams(hard_threshold=True)


def band_edges(c, params: SmoothingParams):
    """Lower and upper |flow| edges of the transition band."""
    c2 = np.square(np.asarray(c, dtype=float))
    half = np.pi / (2.0 * params.sigma)
    return np.sqrt(np.clip(c2 - half, 0.0, None)), np.sqrt(c2 + half)


def survival_factor(flow, c, params: SmoothingParams):
    flow = np.asarray(flow, dtype=float)
    c = np.asarray(c, dtype=float)
    if np.any(c <= 0):
        raise ValueError("flow threshold must be positive")
    a = np.abs(flow)
    if params.hard_threshold:
        out = (a <= c).astype(float)
    else:
        lo, hi = band_edges(c, params)
        mid = 0.5 * (1.0 - np.sin(params.sigma * (flow * flow - c * c)))
        out = np.where(a >= hi, 0.0, np.where(a <= lo, 1.0, mid))
    return out[()] if out.ndim == 0 else out


def survival_derivative(flow, c, params: SmoothingParams):
    """d survival_factor / d flow (zero outside the transition band)."""
    if params.hard_threshold:
        raise NotImplementedError("survival function has no derivative in hard-threshold mode")
    flow = np.asarray(flow, dtype=float)
    c = np.asarray(c, dtype=float)
    a = np.abs(flow)
    lo, hi = band_edges(c, params)
    inside = (a > lo) & (a < hi)
    d = -params.sigma * flow * np.cos(params.sigma * (flow * flow - c * c))
    out = np.where(inside, d, 0.0)
    return out[()] if out.ndim == 0 else out


@dataclass(frozen=True)
class CascadeState:
    step: int
    admittance: np.ndarray
    flows: np.ndarray
    injections: np.ndarray


@dataclass
class CascadeTrajectory:
    states: list[CascadeState]
    terminated_at: int
    quiescent: bool

    @property
    def final(self) -> CascadeState:
        return self.states[-1]

    def state_at(self, step: int) -> CascadeState:
        """State at ``step``; past termination the final state repeats."""
        if step < self.states[0].step:
            raise IndexError(f"trajectory starts at step {self.states[0].step}")
        for s in self.states:
            if s.step == step:
                return s
        if self.quiescent:
            return self.final
        raise IndexError(f"step {step} beyond non-quiescent trajectory end {self.terminated_at}")


def make_state(network: PowerNetwork, step: int, Y, P) -> CascadeState:
    Y = np.asarray(Y, dtype=float).copy()
    P = np.asarray(P, dtype=float).copy()
    return CascadeState(step, Y, solve_flow(network, Y, P).branch_flows, P)


def next_admittance(network: PowerNetwork, Y, P, params: SmoothingParams) -> np.ndarray:
    flows = solve_flow(network, Y, P).branch_flows
    return survival_factor(flows, network.thresholds, params) * np.asarray(Y, dtype=float)


def cascade_step(network: PowerNetwork, state: CascadeState, injections,
                 params: SmoothingParams) -> CascadeState:
    """Advance one cascading step with ``injections`` in force at ``state``."""
    Y = next_admittance(network, state.admittance, injections, params)
    return make_state(network, state.step + 1, Y, injections)


Injections = Union[np.ndarray, Mapping[int, np.ndarray]]


def _schedule(injections: Injections, first: int) -> dict[int, np.ndarray]:
    if isinstance(injections, Mapping):
        sched = {int(k): np.asarray(v, dtype=float) for k, v in injections.items()}
        if first not in sched:
            earlier = [k for k in sched if k <= first]
            if not earlier:
                raise ValueError(f"schedule has no injections in force at step {first}")
            sched[first] = sched[max(earlier)]
        return sched
    return {first: np.asarray(injections, dtype=float)}


def _in_force(sched: dict[int, np.ndarray], step: int) -> np.ndarray:
    return sched[max(k for k in sched if k <= step)]


def simulate(network: PowerNetwork, Y1, injections: Injections, params: SmoothingParams,
             max_steps: int = MAX_STEPS, first_step: int = 1) -> CascadeTrajectory:
    """Iterate the cascade from ``Y1`` until the admittance stops changing.

    ``injections`` is either one bus vector or a mapping ``{step: P}`` where
    each entry stays in force from that step on.  Quiescence is only declared
    once no scheduled change is pending.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be at least 1")
    sched = _schedule(injections, first_step)
    last_change = max(sched)
    state = make_state(network, first_step, Y1, _in_force(sched, first_step))
    states = [state]
    while True:
        P_next = _in_force(sched, state.step + 1)
        Y_next = survival_factor(state.flows, network.thresholds, params) * state.admittance
        settled = np.max(np.abs(Y_next - state.admittance), initial=0.0) <= QUIESCENCE_TOL
        if settled and state.step >= last_change:
            return CascadeTrajectory(states, state.step, True)
        if len(states) >= max_steps:
            return CascadeTrajectory(states, state.step, False)
        state = make_state(network, state.step + 1, Y_next, P_next)
        states.append(state)


@dataclass(frozen=True)
class CascadeMetrics:
    n_connected: int
    n_active: int
    total_power: float
    shed_power: float

    def as_dict(self) -> dict:
        return {"n_connected": self.n_connected, "n_active": self.n_active,
                "total_power": self.total_power, "shed_power": self.shed_power}


def metrics(network: PowerNetwork, state: CascadeState) -> CascadeMetrics:
    return CascadeMetrics(
        n_connected=int(np.count_nonzero(state.admittance > CONNECTED_TOL)),
        n_active=int(np.count_nonzero(np.abs(state.flows) > ACTIVE_TOL)),
        total_power=float(np.abs(state.flows).sum()),
        shed_power=float(np.abs(network.p0 - state.injections).sum()),
    )


def write_trajectory_csv(network: PowerNetwork, traj: CascadeTrajectory, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "branch", "admittance", "flow"])
        for s in traj.states:
            for br, y, f in zip(network.branches, s.admittance, s.flows):
                w.writerow([s.step, br.id, repr(float(y)), repr(float(f))])


def trajectory_summary(network: PowerNetwork, traj: CascadeTrajectory) -> dict:
    return {
        "terminated_at": traj.terminated_at,
        "quiescent": traj.quiescent,
        "steps": [{"step": s.step, **metrics(network, s).as_dict()} for s in traj.states],
        "final": metrics(network, traj.final).as_dict(),
    }


def write_trajectory_json(network: PowerNetwork, traj: CascadeTrajectory, path) -> None:
    with open(path, "w") as fh:
        json.dump(trajectory_summary(network, traj), fh, indent=2, sort_keys=True)
