"""Optimal load shedding by projected primal-dual (saddle point) dynamics.

Both protection schemes share one problem shape.  The decision variable is a
stack of ``K`` injection vectors (``K = 1`` for the one-shot scheme, ``K = 2``
for shedding at two consecutive steps) and the constrained branch flows are
affine in that stack::

    h(P) = offset + sum_k coeffs[k] @ P[k]

    minimise   sum_k || W o (P[k] - P0) ||^2
    subject to h_e(P)^2 <= limit_e^2          for every constrained edge e
               pmin <= P[k] <= pmax            for every k

The Lagrangian is convex in ``P`` and linear in the multipliers, and the
dynamics descend in ``P`` while ascending in the multipliers, which are kept
nonnegative by the switching projection ``[x]^+_y``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .cascade import CascadeTrajectory, SmoothingParams, survival_derivative, survival_factor
from .netmodel import PowerNetwork
from .powerflow import (
    LIVE_TOL,
    flow_jacobian_admittance,
    flow_jacobian_injections,
    generalized_inverse,
    laplacian,
)

NPS = "nps"
RPS = "rps"


class SolverDivergenceError(RuntimeError):
    def __init__(self, step: int, time: float):
        super().__init__(f"saddle dynamics diverged at Euler step {step} (t={time:g} s)")
        self.step = step
        self.time = time


@dataclass(frozen=True)
class SolverConfig:
    dt: float = 0.1
    horizon: float = 10.0
    convergence_tol: float = 1e-6
    kkt_tol: float = 1e-4

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.horizon < self.dt:
            raise ValueError("horizon must be at least one Euler step")


@dataclass(frozen=True)
class LinearFlowModel:
    """First-order model of step-``m`` flows around ``(P0, P0)``.

    ``evaluate(Pp, Pc) = constant + coeff_prev @ (Pp - P0) + coeff_curr @ Pc``
    where ``Pp`` is applied at step ``m-1`` and ``Pc`` at step ``m``.
    """

    constant: np.ndarray
    coeff_prev: np.ndarray
    coeff_curr: np.ndarray
    p0: np.ndarray
    admittance_prev: np.ndarray
    admittance_next: np.ndarray

    def evaluate(self, P_prev, P_curr) -> np.ndarray:
        return self.constant + self.coeff_prev @ (np.asarray(P_prev) - self.p0) + \
            self.coeff_curr @ np.asarray(P_curr)


@dataclass
class SheddingProblem:
    variant: str
    network: PowerNetwork
    frozen_admittance: np.ndarray
    base_injection: np.ndarray
    weights: np.ndarray
    pmin: np.ndarray
    pmax: np.ndarray
    flow_limits: np.ndarray
    edges: np.ndarray
    coeffs: np.ndarray  # (K, E, n)
    offset: np.ndarray  # (E,)
    step: int = 0
    model: Optional[LinearFlowModel] = None

    def __post_init__(self):
        if np.any(self.weights <= 0):
            raise ValueError("weights must be positive")
        if np.any(self.flow_limits <= 0):
            raise ValueError("flow limits must be positive")
        tol = 1e-9
        if np.any(self.base_injection < self.pmin - tol) or np.any(self.base_injection > self.pmax + tol):
            raise ValueError("base injection violates the box bounds")

    @property
    def n_steps(self) -> int:
        return self.coeffs.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edges.size

    @property
    def limits(self) -> np.ndarray:
        return self.flow_limits[self.edges]

    def constrained_flows(self, primal) -> np.ndarray:
        primal = np.asarray(primal, dtype=float).reshape(self.n_steps, -1)
        return self.offset + np.einsum("ken,kn->e", self.coeffs, primal)

    def objective(self, primal) -> float:
        primal = np.asarray(primal, dtype=float).reshape(self.n_steps, -1)
        return float(np.sum(np.square(self.weights * (primal - self.base_injection))))

    def initial_state(self) -> "SaddleState":
        K, n = self.n_steps, self.base_injection.size
        return SaddleState(
            primal=np.tile(self.base_injection, (K, 1)),
            lam=np.zeros(self.n_edges),
            tau_upper=np.zeros((K, n)),
            tau_lower=np.zeros((K, n)),
        )


@dataclass
class SaddleState:
    primal: np.ndarray  # (K, n)
    lam: np.ndarray  # (E,)
    tau_upper: np.ndarray  # (K, n)
    tau_lower: np.ndarray  # (K, n)
    time: float = 0.0

    @property
    def P(self) -> np.ndarray:
        """Injections at the last controlled step."""
        return self.primal[-1]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.primal.ravel(), self.lam, self.tau_upper.ravel(),
                               self.tau_lower.ravel()])

    def copy(self) -> "SaddleState":
        return SaddleState(self.primal.copy(), self.lam.copy(), self.tau_upper.copy(),
                           self.tau_lower.copy(), self.time)

    def __add__(self, other: "SaddleState") -> "SaddleState":
        return SaddleState(self.primal + other.primal, self.lam + other.lam,
                           self.tau_upper + other.tau_upper, self.tau_lower + other.tau_lower,
                           self.time)

    def scaled(self, a: float) -> "SaddleState":
        return SaddleState(a * self.primal, a * self.lam, a * self.tau_upper,
                           a * self.tau_lower, self.time)


# --------------------------------------------------------------------------
# problem construction

def _frozen_step(traj: CascadeTrajectory, m: int):
    if m < 1:
        raise ValueError(f"cascading step must be >= 1, got {m}")
    return traj.state_at(min(m, traj.terminated_at) if traj.quiescent else m)


def nps_problem(network: PowerNetwork, Y_m, step: int = 0, weights=None,
                flow_limits=None) -> SheddingProblem:
    """One-shot problem with flows frozen at admittance ``Y_m``."""
    Y_m = np.asarray(Y_m, dtype=float)
    edges = np.flatnonzero(Y_m > LIVE_TOL)
    jac = flow_jacobian_injections(network, Y_m)
    return SheddingProblem(
        variant=NPS,
        network=network,
        frozen_admittance=Y_m.copy(),
        base_injection=network.p0.copy(),
        weights=network.weights.copy() if weights is None else np.asarray(weights, dtype=float),
        pmin=network.pmin.copy(),
        pmax=network.pmax.copy(),
        flow_limits=network.thresholds.copy() if flow_limits is None else np.asarray(flow_limits, float),
        edges=edges,
        coeffs=jac[edges][None, :, :],
        offset=np.zeros(edges.size),
        step=step,
    )


def build_nps_problem(network: PowerNetwork, cascade: CascadeTrajectory, m: int,
                      weights=None, flow_limits=None) -> SheddingProblem:
    """Freeze the unprotected admittance of step ``m`` and set up the problem.

    A trajectory that went quiet before ``m`` contributes its final state.
    """
    state = _frozen_step(cascade, m)
    return nps_problem(network, state.admittance, m, weights, flow_limits)


def rps_linearize(network: PowerNetwork, Y_prev, P0, params: SmoothingParams) -> LinearFlowModel:
    """Linearise the step-``m`` flows in ``(P_{m-1}, P_m)`` about ``(P0, P0)``.

    The step-``m`` admittance depends on the step-``m-1`` flows through the
    survival function, so by the chain rule::

        d f_m / d P_{m-1} = (d f_m / d Y_m) diag(g'(f_{m-1}) Y_{m-1}) (d f_{m-1} / d P_{m-1})
        d f_m / d P_m     = flow Jacobian at Y_m
    """
    Y_prev = np.asarray(Y_prev, dtype=float)
    P0 = np.asarray(P0, dtype=float)
    Bp_prev = generalized_inverse(laplacian(network, Y_prev))
    jac_prev = flow_jacobian_injections(network, Y_prev, Bp_prev)
    f_prev = jac_prev @ P0
    c = network.thresholds
    Y_next = survival_factor(f_prev, c, params) * Y_prev
    dg = survival_derivative(f_prev, c, params)
    Bp_next = generalized_inverse(laplacian(network, Y_next))
    coeff_curr = flow_jacobian_injections(network, Y_next, Bp_next)
    chain = dg * Y_prev
    if np.any(chain != 0):
        jac_y = flow_jacobian_admittance(network, Y_next, P0, Bp_next)
        coeff_prev = jac_y @ (chain[:, None] * jac_prev)
    else:
        coeff_prev = np.zeros_like(coeff_curr)
    exact = coeff_curr @ P0
    constant = exact - coeff_curr @ P0
    return LinearFlowModel(constant, coeff_prev, coeff_curr, P0.copy(), Y_prev.copy(), Y_next)


def rps_problem(network: PowerNetwork, Y_prev, params: SmoothingParams, step: int = 0,
                weights=None, flow_limits=None) -> SheddingProblem:
    """Two-step problem controlling injections at steps ``m-1`` and ``m``.

    ``Y_prev`` is the unprotected admittance at step ``m-1``.
    """
    P0 = network.p0
    model = rps_linearize(network, Y_prev, P0, params)
    edges = np.flatnonzero(model.admittance_next > LIVE_TOL)
    coeffs = np.stack([model.coeff_prev[edges], model.coeff_curr[edges]])
    offset = model.constant[edges] - model.coeff_prev[edges] @ P0
    return SheddingProblem(
        variant=RPS,
        network=network,
        frozen_admittance=np.asarray(Y_prev, dtype=float).copy(),
        base_injection=P0.copy(),
        weights=network.weights.copy() if weights is None else np.asarray(weights, dtype=float),
        pmin=network.pmin.copy(),
        pmax=network.pmax.copy(),
        flow_limits=network.thresholds.copy() if flow_limits is None else np.asarray(flow_limits, float),
        edges=edges,
        coeffs=coeffs,
        offset=offset,
        step=step,
        model=model,
    )


def build_rps_problem(network: PowerNetwork, cascade: CascadeTrajectory, m: int,
                      params: SmoothingParams, weights=None, flow_limits=None) -> SheddingProblem:
    if m < 2:
        raise ValueError(f"two-step shedding needs m >= 2, got {m}")
    state = _frozen_step(cascade, m - 1)
    return rps_problem(network, state.admittance, params, m, weights, flow_limits)


def two_step_flows(network: PowerNetwork, Y_prev, P_prev, P_curr,
                   params: SmoothingParams) -> tuple[np.ndarray, np.ndarray]:
    """Exact step-``m`` admittance and flows after injecting ``P_prev`` at ``m-1``."""
    from .cascade import next_admittance
    from .powerflow import solve_flow

    Y_next = next_admittance(network, Y_prev, P_prev, params)
    return Y_next, solve_flow(network, Y_next, P_curr).branch_flows


# --------------------------------------------------------------------------
# Lagrangian and dynamics

def lagrangian(state: SaddleState, problem: SheddingProblem) -> float:
    h = problem.constrained_flows(state.primal)
    value = problem.objective(state.primal)
    value += float(state.lam @ (h * h - problem.limits ** 2))
    value += float(np.sum(state.tau_upper * (state.primal - problem.pmax)))
    value += float(np.sum(state.tau_lower * (problem.pmin - state.primal)))
    return value


def nps_lagrangian(state: SaddleState, problem: SheddingProblem) -> float:
    if problem.variant != NPS:
        raise ValueError("nps_lagrangian needs a one-shot problem")
    return lagrangian(state, problem)


def rps_lagrangian(state: SaddleState, problem: SheddingProblem) -> float:
    if problem.variant != RPS:
        raise ValueError("rps_lagrangian needs a two-step problem")
    return lagrangian(state, problem)


def projection(x, y):
    """``[x]^+_y``: ``x`` if ``y > 0``, else ``max(x, 0)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(y < 0):
        raise ValueError("projection requires a nonnegative multiplier")
    out = np.where(y > 0, x, np.maximum(x, 0.0))
    return out[()] if out.ndim == 0 else out


def primal_gradient(state: SaddleState, problem: SheddingProblem) -> np.ndarray:
    """Gradient of the Lagrangian with respect to every controlled injection."""
    h = problem.constrained_flows(state.primal)
    W2 = problem.weights ** 2
    grad = 2.0 * W2 * (state.primal - problem.base_injection)
    grad += 2.0 * np.einsum("ken,e->kn", problem.coeffs, state.lam * h)
    grad += state.tau_upper - state.tau_lower
    return grad


def saddle_rhs(state: SaddleState, problem: SheddingProblem) -> SaddleState:
    h = problem.constrained_flows(state.primal)
    return SaddleState(
        primal=-primal_gradient(state, problem),
        lam=projection(h * h - problem.limits ** 2, state.lam),
        tau_upper=projection(state.primal - problem.pmax, state.tau_upper),
        tau_lower=projection(problem.pmin - state.primal, state.tau_lower),
        time=state.time,
    )


def nps_rhs(state: SaddleState, problem: SheddingProblem) -> SaddleState:
    if problem.variant != NPS:
        raise ValueError("nps_rhs needs a one-shot problem")
    return saddle_rhs(state, problem)


def rps_rhs(state: SaddleState, problem: SheddingProblem,
            model: LinearFlowModel | None = None) -> SaddleState:
    if problem.variant != RPS:
        raise ValueError("rps_rhs needs a two-step problem")
    if model is not None and model is not problem.model:
        problem = replace(
            problem,
            coeffs=np.stack([model.coeff_prev[problem.edges], model.coeff_curr[problem.edges]]),
            offset=model.constant[problem.edges] - model.coeff_prev[problem.edges] @ model.p0,
            model=model,
        )
    return saddle_rhs(state, problem)


# --------------------------------------------------------------------------
# integration

@dataclass
class SaddleTrajectory:
    times: np.ndarray
    primal: np.ndarray  # (T, K, n)
    lam: np.ndarray  # (T, E)
    tau_upper: np.ndarray  # (T, K, n)
    tau_lower: np.ndarray  # (T, K, n)


@dataclass
class SaddleSolution:
    solution: SaddleState
    trajectory: SaddleTrajectory
    converged: bool
    steps: int


def integrate(problem: SheddingProblem, config: SolverConfig = SolverConfig(),
              rhs: Callable[[SaddleState, SheddingProblem], SaddleState] | None = None,
              initial: SaddleState | None = None, run_to_horizon: bool = False) -> SaddleSolution:
    """Forward-Euler integration of the saddle dynamics.

    Starts at ``P = P0`` with zero multipliers unless ``initial`` is given.
    Multipliers are clamped at zero after every step.  Integration stops at
    the horizon, or earlier once a step changes no component by more than
    ``convergence_tol`` (unless ``run_to_horizon``).
    """
    rhs = rhs or saddle_rhs
    state = (initial or problem.initial_state()).copy()
    n_steps = int(round(config.horizon / config.dt))
    rec = [state.copy()]
    converged = False
    k = 0
    for k in range(1, n_steps + 1):
        # overflow shows up as non-finite values and is reported below
        with np.errstate(over="ignore", invalid="ignore"):
            d = rhs(state, problem)
            new = state + d.scaled(config.dt)
        new.lam = np.maximum(new.lam, 0.0)
        new.tau_upper = np.maximum(new.tau_upper, 0.0)
        new.tau_lower = np.maximum(new.tau_lower, 0.0)
        new.time = k * config.dt
        if not np.all(np.isfinite(new.flat())):
            raise SolverDivergenceError(k, new.time)
        change = np.max(np.abs(new.flat() - state.flat()), initial=0.0)
        state = new
        rec.append(state.copy())
        if change <= config.convergence_tol:
            converged = True
            if not run_to_horizon:
                break
    traj = SaddleTrajectory(
        times=np.array([s.time for s in rec]),
        primal=np.array([s.primal for s in rec]),
        lam=np.array([s.lam for s in rec]),
        tau_upper=np.array([s.tau_upper for s in rec]),
        tau_lower=np.array([s.tau_lower for s in rec]),
    )
    return SaddleSolution(state, traj, converged, k)


# --------------------------------------------------------------------------
# optimality

@dataclass(frozen=True)
class KKTResidual:
    stationarity: float
    primal_feas: float
    dual_feas: float
    comp_slack: float

    def max(self) -> float:
        return max(self.stationarity, self.primal_feas, self.dual_feas, self.comp_slack)

    def as_dict(self) -> dict:
        return {"stationarity": self.stationarity, "primal_feas": self.primal_feas,
                "dual_feas": self.dual_feas, "comp_slack": self.comp_slack}


def _inf(*arrays) -> float:
    return float(max((np.max(np.abs(a), initial=0.0) for a in arrays), default=0.0))


def kkt_residual(state: SaddleState, problem: SheddingProblem) -> KKTResidual:
    h = problem.constrained_flows(state.primal)
    g_flow = h * h - problem.limits ** 2
    g_up = state.primal - problem.pmax
    g_lo = problem.pmin - state.primal
    return KKTResidual(
        stationarity=_inf(primal_gradient(state, problem)),
        primal_feas=_inf(np.maximum(g_flow, 0), np.maximum(g_up, 0), np.maximum(g_lo, 0)),
        dual_feas=_inf(np.minimum(state.lam, 0), np.minimum(state.tau_upper, 0),
                       np.minimum(state.tau_lower, 0)),
        comp_slack=_inf(state.lam * g_flow, state.tau_upper * g_up, state.tau_lower * g_lo),
    )
