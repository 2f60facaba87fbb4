"""Geodesics, Riemannian energy, and the analytic feedback gain.

The minimal geodesic between the desired and actual state is discretized on
Chebyshev-Gauss-Lobatto nodes; the energy integral

    E(x_d, x) = int_0^1 gamma_s(s)^T M(gamma(s)) gamma_s(s) ds

uses the Chebyshev differentiation matrix for gamma_s and clamped
Clenshaw-Curtis quadrature, and the interior nodes are optimized by
quasi-Newton descent from the straight-line initialization.

The tracking feedback solves, in closed form, the min-norm problem

    min |k|^2  s.t.  2 gbar_s(1)^T M(x) xdot_k - 2 gbar_s(0)^T M(x_d) xdot_d
                     <= -2 lam E(x_d, x),

whose constraint is affine in k for control-affine dynamics: with
phi_0 + phi_1^T k <= 0, the solution is k = 0 when phi_0 <= 0 and
k = -phi_0 phi_1 / |phi_1|^2 otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import minimize

from .metric import ContractionMetric


def cgl_nodes(n_nodes: int) -> np.ndarray:
    """Chebyshev-Gauss-Lobatto nodes mapped to [0, 1], ascending."""
    k = np.arange(n_nodes)
    return 0.5 * (1.0 - np.cos(np.pi * k / (n_nodes - 1)))


def cheb_diff_matrix(n_nodes: int) -> np.ndarray:
    """Differentiation matrix on the [0, 1] CGL nodes."""
    n = n_nodes - 1
    x = np.cos(np.pi * np.arange(n_nodes) / n)  # standard nodes, descending
    c = np.ones(n_nodes)
    c[0] = c[-1] = 2.0
    c = c * (-1.0) ** np.arange(n_nodes)
    xdiff = x[:, None] - x[None, :] + np.eye(n_nodes)
    d = np.outer(c, 1.0 / c) / xdiff
    d -= np.diag(d.sum(axis=1))
    # s_j = (1 - x_j)/2 is ascending in j already; d/ds = -2 d/dx
    return -2.0 * d


def clenshaw_curtis_weights(n_nodes: int) -> np.ndarray:
    """Clamped Clenshaw-Curtis weights on the [0, 1] CGL nodes."""
    n = n_nodes - 1
    theta = np.pi * np.arange(n_nodes) / n
    w = np.zeros(n_nodes)
    v = np.ones(n - 1)
    inner = theta[1:-1]
    if n % 2 == 0:
        w[0] = w[-1] = 1.0 / (n ** 2 - 1)
        for k in range(1, n // 2):
            v -= 2.0 * np.cos(2 * k * inner) / (4 * k ** 2 - 1)
        v -= np.cos(n * inner) / (n ** 2 - 1)
    else:
        w[0] = w[-1] = 1.0 / n ** 2
        for k in range(1, (n - 1) // 2 + 1):
            v -= 2.0 * np.cos(2 * k * inner) / (4 * k ** 2 - 1)
    w[1:-1] = 2.0 * v / n
    return 0.5 * w  # scale [-1, 1] -> [0, 1]; weights are node-symmetric


@dataclass
class Geodesic:
    """Solved geodesic: collocation nodes, tangent, energy, and status."""

    nodes: np.ndarray       # (K, n) states gamma(s_k)
    tangent: np.ndarray     # (K, n) gamma_s(s_k)
    energy: float
    converged: bool
    grad_norm: float

    @property
    def start_tangent(self) -> np.ndarray:
        return self.tangent[0]

    @property
    def end_tangent(self) -> np.ndarray:
        return self.tangent[-1]


class GeodesicSolver:
    """Energy minimizer over interior CGL nodes with warm starting.

    One instance per control loop: it owns per-call scratch state (the warm
    start) and is not safe to share across concurrent loops.
    """

    def __init__(self, metric: ContractionMetric, n_nodes: int = 11,
                 grad_tol: float = 1e-8, max_iter: int = 200):
        self.metric = metric
        self.n_nodes = n_nodes
        self.grad_tol = grad_tol
        self.max_iter = max_iter
        self.s = cgl_nodes(n_nodes)
        self.diff = cheb_diff_matrix(n_nodes)
        self.weights = clenshaw_curtis_weights(n_nodes)
        self._warm: np.ndarray | None = None
        self._warm_ends: tuple[np.ndarray, np.ndarray] | None = None

    # -- energy and gradient ------------------------------------------------

    def _energy_grad(self, nodes: np.ndarray) -> tuple[float, np.ndarray]:
        """Energy and its gradient with respect to all nodes, (K, n)."""
        k_nodes, n = nodes.shape
        tangent = self.diff @ nodes
        ms = np.empty((k_nodes, n, n))
        md = np.empty((k_nodes, n))
        energy = 0.0
        grad = np.zeros_like(nodes)
        constant = self.metric.is_constant()
        m_const = self.metric.M(nodes[0]) if constant else None
        for k in range(k_nodes):
            m = m_const if constant else self.metric.M(nodes[k])
            ms[k] = m
            md[k] = m @ tangent[k]
            energy += self.weights[k] * tangent[k] @ md[k]
            if not constant:
                dm = self.metric.dM(nodes[k])
                grad[k] += self.weights[k] * np.einsum(
                    "ijk,j,k->i", dm, tangent[k], tangent[k])
        grad += 2.0 * self.diff.T @ (self.weights[:, None] * md)
        return float(energy), grad

    def _initial_nodes(self, x_d: np.ndarray, x: np.ndarray) -> np.ndarray:
        line = x_d[None, :] + self.s[:, None] * (x - x_d)[None, :]
        if self._warm is None or self._warm_ends is None:
            return line
        prev_xd, prev_x = self._warm_ends
        shifted = (self._warm
                   + (1.0 - self.s)[:, None] * (x_d - prev_xd)[None, :]
                   + self.s[:, None] * (x - prev_x)[None, :])
        # keep the warm start only if it is still competitive
        e_line, _ = self._energy_grad(line)
        e_warm, _ = self._energy_grad(shifted)
        return shifted if e_warm <= e_line else line

    def solve(self, x_d: np.ndarray, x: np.ndarray,
              use_warm_start: bool = True) -> Geodesic:
        x_d = np.asarray(x_d, dtype=float)
        x = np.asarray(x, dtype=float)
        n = x.size
        nodes = self._initial_nodes(x_d, x) if use_warm_start \
            else x_d[None, :] + self.s[:, None] * (x - x_d)[None, :]

        if np.allclose(x, x_d, atol=1e-14) or self.metric.is_constant():
            # the constant-speed straight line is exactly optimal
            line = x_d[None, :] + self.s[:, None] * (x - x_d)[None, :]
            energy, _ = self._energy_grad(line)
            geo = Geodesic(line, self.diff @ line, energy, True, 0.0)
            self._remember(geo, x_d, x)
            return geo

        interior = nodes[1:-1].reshape(-1)

        def objective(flat):
            full = np.vstack([x_d, flat.reshape(-1, n), x])
            e, g = self._energy_grad(full)
            return e, g[1:-1].reshape(-1)

        res = minimize(objective, interior, jac=True, method="L-BFGS-B",
                       options={"maxiter": self.max_iter, "gtol": self.grad_tol,
                                "ftol": 1e-14})
        full = np.vstack([x_d, res.x.reshape(-1, n), x])
        energy, grad = self._energy_grad(full)
        gnorm = float(np.abs(grad[1:-1]).max()) if full.shape[0] > 2 else 0.0
        geo = Geodesic(full, self.diff @ full, energy,
                       bool(gnorm <= self.grad_tol or res.success), gnorm)
        self._remember(geo, x_d, x)
        return geo

    def _remember(self, geo: Geodesic, x_d: np.ndarray, x: np.ndarray) -> None:
        self._warm = geo.nodes.copy()
        self._warm_ends = (x_d.copy(), x.copy())

    def reset(self) -> None:
        self._warm = None
        self._warm_ends = None


def riemannian_energy(geodesic: Geodesic) -> float:
    return geodesic.energy


def feedback_gain(metric: ContractionMetric,
                  dyn_eval: Callable[[np.ndarray, np.ndarray], np.ndarray],
                  x_d: np.ndarray, xdot_d: np.ndarray, x: np.ndarray,
                  u_d: np.ndarray, geodesic: Geodesic) -> np.ndarray:
    """Min-norm gain enforcing the energy-decay constraint.

    ``dyn_eval`` must be affine in the input, which lets the input matrix be
    recovered exactly from m + 1 evaluations.
    """
    m_dim = u_d.size
    xdot0 = dyn_eval(x, u_d)
    b_cols = np.empty((x.size, m_dim))
    for j in range(m_dim):
        e = np.zeros(m_dim)
        e[j] = 1.0
        b_cols[:, j] = dyn_eval(x, u_d + e) - xdot0

    m_x = metric.M(x)
    m_xd = metric.M(x_d)
    gs1 = geodesic.end_tangent
    gs0 = geodesic.start_tangent
    phi0 = float(2.0 * gs1 @ m_x @ xdot0 - 2.0 * gs0 @ m_xd @ xdot_d
                 + 2.0 * metric.lam * geodesic.energy)
    phi1 = 2.0 * b_cols.T @ m_x @ gs1
    if phi0 <= 0.0:
        return np.zeros(m_dim)
    denom = float(phi1 @ phi1)
    if denom < 1e-24:
        # cannot happen for a valid metric; flag rather than abort
        import warnings
        warnings.warn("feedback constraint direction degenerate; returning zero gain")
        return np.zeros(m_dim)
    return -phi0 / denom * phi1


def tracking_input(metric: ContractionMetric, solver: GeodesicSolver,
                   dyn_eval: Callable[[np.ndarray, np.ndarray], np.ndarray],
                   x_d: np.ndarray, xdot_d: np.ndarray, u_d: np.ndarray,
                   x: np.ndarray) -> tuple[np.ndarray, Geodesic]:
    """Full tracking input u_c = u_d + k and the geodesic used to build it."""
    geo = solver.solve(x_d, x)
    k = feedback_gain(metric, dyn_eval, x_d, xdot_d, x, u_d, geo)
    return u_d + k, geo
