"""DC power flow on (possibly islanded) networks, and flow sensitivities."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .netmodel import PowerNetwork

PINV_RTOL = 1e-9
SYMMETRY_TOL = 1e-10
LIVE_TOL = 1e-9
IMBALANCE_TOL = 1e-6


class ContractViolation(ValueError):
    pass


class InfeasibleFlowError(ValueError):
    pass


class NonSmoothWarning(RuntimeWarning):
    """Derivative taken along a direction that changes the Laplacian rank."""


def laplacian(network: PowerNetwork, Y) -> np.ndarray:
    """Weighted Laplacian ``A^T diag(Y) A``."""
    A = network.incidence
    Y = np.asarray(Y, dtype=float)
    return A.T @ (Y[:, None] * A)


def generalized_inverse(B) -> np.ndarray:
    """Moore-Penrose pseudoinverse of a symmetric PSD matrix.

    Eigenvalues below ``1e-9 * max eigenvalue`` are treated as the null space.
    """
    B = np.asarray(B, dtype=float)
    if B.ndim != 2 or B.shape[0] != B.shape[1]:
        raise ContractViolation(f"expected a square matrix, got shape {B.shape}")
    scale = max(1.0, float(np.abs(B).max(initial=0.0)))
    if np.abs(B - B.T).max(initial=0.0) > SYMMETRY_TOL * scale:
        raise ContractViolation("generalized_inverse requires a symmetric matrix")
    w, V = np.linalg.eigh(0.5 * (B + B.T))
    top = np.abs(w).max(initial=0.0)
    if top == 0.0:
        return np.zeros_like(B)
    keep = w > PINV_RTOL * top
    Vk = V[:, keep]
    return (Vk / w[keep]) @ Vk.T


def components(network: PowerNetwork, Y) -> tuple[int, np.ndarray]:
    """Connected components of the live graph (branches with ``Y > 1e-9``)."""
    A = network.incidence
    live = np.asarray(Y) > LIVE_TOL
    src = A[live].argmax(axis=1)
    dst = A[live].argmin(axis=1)
    adj = coo_matrix((np.ones(src.size), (src, dst)), shape=(network.n, network.n))
    return connected_components(adj, directed=False)


@dataclass(frozen=True)
class FlowSolution:
    angles: np.ndarray
    branch_flows: np.ndarray
    laplacian_pinv: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)
    # net injection per island; B+ spreads it evenly over the island's buses
    imbalance: np.ndarray = field(repr=False)

    @property
    def balanced(self) -> bool:
        return bool(np.all(np.abs(self.imbalance) <= IMBALANCE_TOL))


def solve_flow(network: PowerNetwork, Y, P, strict: bool = False) -> FlowSolution:
    """DC flow ``theta = B^+ P``, ``flow_l = Y_l (theta_from - theta_to)``.

    Islands whose injections do not sum to zero are still solved (the
    pseudoinverse removes each island's mean injection) and the residual is
    reported in ``imbalance``.  With ``strict=True`` such islands raise
    :class:`InfeasibleFlowError` instead.
    """
    Y = np.asarray(Y, dtype=float)
    P = np.asarray(P, dtype=float)
    if Y.shape != (network.n_branches,):
        raise ValueError(f"admittance must have length {network.n_branches}")
    if P.shape != (network.n,):
        raise ValueError(f"injections must have length {network.n}")
    if np.any(Y < 0):
        raise ValueError("admittance must be nonnegative")
    ncomp, labels = components(network, Y)
    imbalance = np.bincount(labels, weights=P, minlength=ncomp)
    if strict:
        bad = np.flatnonzero(np.abs(imbalance) > IMBALANCE_TOL)
        if bad.size:
            buses = [network.buses[i].id for i in np.flatnonzero(labels == bad[0])]
            raise InfeasibleFlowError(
                f"island with buses {buses} has net injection {imbalance[bad[0]]:.3e} pu"
            )
    Bp = generalized_inverse(laplacian(network, Y))
    theta = Bp @ P
    flows = Y * (network.incidence @ theta)
    flows[Y == 0] = 0.0
    return FlowSolution(theta, flows, Bp, labels, imbalance)


def branch_flows(network: PowerNetwork, Y, P) -> np.ndarray:
    return solve_flow(network, Y, P).branch_flows


def flow_jacobian_injections(network: PowerNetwork, Y, Bp=None) -> np.ndarray:
    """d(branch flows)/dP, shape ``(n_branches, n)``.

    Flows are linear in ``P`` at fixed admittance, so ``jac @ P`` reproduces
    :func:`solve_flow` exactly.
    """
    Y = np.asarray(Y, dtype=float)
    if Bp is None:
        Bp = generalized_inverse(laplacian(network, Y))
    return Y[:, None] * (network.incidence @ Bp)


def rank_changing_branches(network: PowerNetwork, Y) -> np.ndarray:
    """Dead branches whose endpoints lie in different islands.

    Perturbing the admittance of such a branch merges two islands, so flows
    are not differentiable there.
    """
    Y = np.asarray(Y, dtype=float)
    _, labels = components(network, Y)
    A = network.incidence
    src, dst = A.argmax(axis=1), A.argmin(axis=1)
    return np.flatnonzero((Y <= LIVE_TOL) & (labels[src] != labels[dst]))


def flow_jacobian_admittance(network: PowerNetwork, Y, P, Bp=None) -> np.ndarray:
    """d(branch flows)/dY at fixed injections, shape ``(n_branches, n_branches)``.

    With ``d = A B^+ P`` (angle difference across each branch) and
    ``K = A B^+ A^T``::

        d flow_l / d Y_q = [l == q] d_l - Y_l K_lq d_q

    which uses ``dB^+/dY_q = -B^+ a_q a_q^T B^+`` and is valid while the
    Laplacian rank does not change; a :class:`NonSmoothWarning` is issued when
    some direction would reconnect two islands.
    """
    Y = np.asarray(Y, dtype=float)
    P = np.asarray(P, dtype=float)
    A = network.incidence
    if Bp is None:
        Bp = generalized_inverse(laplacian(network, Y))
    d = A @ (Bp @ P)
    K = A @ Bp @ A.T
    jac = np.diag(d) - (Y[:, None] * K) * d[None, :]
    bad = rank_changing_branches(network, Y)
    if bad.size and np.any(np.abs(jac[:, bad]) > 0):
        warnings.warn(
            f"admittance derivative is non-smooth along branches "
            f"{[network.branches[i].id for i in bad]}",
            NonSmoothWarning,
            stacklevel=2,
        )
    return jac
