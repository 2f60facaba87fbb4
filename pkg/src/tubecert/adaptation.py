"""Adaptive compensation loop: state predictor, projection-based adaptation,
and low-pass-filtered control.

The adaptive input estimates the matched uncertainty through a fast
estimation loop and feeds a bandwidth-limited version of the estimate back:

  predictor     xhat_dot = F(x, u + mu_hat) + A_m (xhat - x)
  adaptation    mu_hat_dot = Gamma Proj(mu_hat, -B(x)^T P (xhat - x))
  control law   u_a(s) = -C(s) mu_hat(s),  C(s) = omega / (s + omega)

where F is the nominal or learned plant model, A_m is Hurwitz, and P solves
A_m^T P + P A_m = -Q.  The projection keeps the estimate inside the ball of
radius Delta (the conservative or learned uncertainty bound) with a smooth
tolerance band of relative width eps_proj.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import solve_continuous_lyapunov

from .dynamics import ControlAffineSystem


@dataclass
class L1Params:
    """Adaptation-loop constants; P is derived from (A_m, Q) on build."""

    a_m: np.ndarray
    q: np.ndarray
    gamma: float
    omega: float
    proj_radius: float
    eps_proj: float = 0.1
    p: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.a_m = np.asarray(self.a_m, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        if self.gamma <= 0 or self.omega <= 0 or self.proj_radius <= 0:
            raise ValueError("gamma, omega, and the projection radius must be positive")
        eigs = np.linalg.eigvals(self.a_m)
        if np.any(eigs.real >= 0):
            raise ValueError("A_m must be Hurwitz")
        if self.p is None:
            self.p = solve_continuous_lyapunov(self.a_m.T, -self.q)
        residual = self.a_m.T @ self.p + self.p @ self.a_m + self.q
        if np.linalg.norm(residual) > 1e-8 * max(1.0, np.linalg.norm(self.q)):
            raise ValueError("Lyapunov solve failed")

    @staticmethod
    def diagonal(n: int, a_m_scale: float, q_scale: float, gamma: float,
                 omega: float, proj_radius: float,
                 eps_proj: float = 0.1) -> "L1Params":
        return L1Params(a_m=-a_m_scale * np.eye(n), q=q_scale * np.eye(n),
                        gamma=gamma, omega=omega, proj_radius=proj_radius,
                        eps_proj=eps_proj)

    @property
    def max_mu_norm(self) -> float:
        return self.proj_radius * np.sqrt(1.0 + self.eps_proj)


def projection(mu: np.ndarray, signal: np.ndarray, radius: float,
               eps_proj: float) -> np.ndarray:
    """Smooth projection keeping the flow of mu inside |mu| <= radius sqrt(1+eps).

    Inside the inner ball (g <= 0), or when the signal points inward, the
    signal passes through; otherwise its radial component is scaled away
    proportionally to the boundary-layer coordinate g.
    """
    if radius <= 0:
        raise ValueError("projection radius must be positive")
    g = (float(mu @ mu) - radius ** 2) / (eps_proj * radius ** 2)
    if g <= 0.0:
        return np.asarray(signal, dtype=float)
    radial = float(mu @ signal)
    if radial <= 0.0:
        return np.asarray(signal, dtype=float)
    mu_sq = float(mu @ mu)
    return signal - g * radial / mu_sq * mu


def predictor_derivative(params: L1Params, sys: ControlAffineSystem,
                         mean_fn: Callable | None, xi: np.ndarray,
                         x: np.ndarray, u: np.ndarray, mu_hat: np.ndarray,
                         x_hat: np.ndarray) -> np.ndarray:
    """Predictor right-hand side, evaluated at the measured plant state x.

    With mean_fn None the nominal model is used (conservative mode);
    otherwise the learned model f + B (u + mean + mu_hat).
    """
    mu_eff = u + mu_hat
    if mean_fn is not None:
        mu_eff = mu_eff + np.asarray(mean_fn(xi, x), dtype=float)
    return sys.f(x) + sys.B(x) @ mu_eff + params.a_m @ (x_hat - x)


def adaptation_derivative(params: L1Params, sys: ControlAffineSystem,
                          x: np.ndarray, x_tilde: np.ndarray,
                          mu_hat: np.ndarray) -> np.ndarray:
    """Projection-constrained estimate dynamics driven by prediction error."""
    signal = -sys.B(x).T @ params.p @ x_tilde
    return params.gamma * projection(mu_hat, signal, params.proj_radius,
                                     params.eps_proj)


def filter_step(u_a: np.ndarray, mu_hat: np.ndarray, omega: float,
                dt: float) -> np.ndarray:
    """Exact step of u_a_dot = -omega (u_a + mu_hat) with mu_hat held.

    The first-order filter C(s) = omega/(s + omega) has unit dc gain, so a
    constant estimate drives u_a to -mu_hat with residual e^{-omega t}.
    """
    if dt <= 0 or omega <= 0:
        raise ValueError("dt and omega must be positive")
    decay = np.exp(-omega * dt)
    return decay * u_a - (1.0 - decay) * mu_hat


def l1_norms(omega: float) -> tuple[float, float]:
    """L1 function norms of the impulse responses of (I - C(s)) and s C(s).

    For C = omega/(s+omega): 1 - C has impulse response delta(t) - omega
    e^{-omega t} with norm 1 + 1 = 2, and s C = omega - omega^2/(s+omega)
    gives norm omega + omega = 2 omega.
    """
    if omega <= 0:
        raise ValueError("omega must be positive")
    return 2.0, 2.0 * omega


@dataclass
class L1State:
    """Mutable loop state owned by a single control loop."""

    x_hat: np.ndarray
    mu_hat: np.ndarray
    u_a: np.ndarray

    @staticmethod
    def initial(x0: np.ndarray, m: int) -> "L1State":
        return L1State(x_hat=np.array(x0, dtype=float, copy=True),
                       mu_hat=np.zeros(m), u_a=np.zeros(m))

    def x_tilde(self, x: np.ndarray) -> np.ndarray:
        return self.x_hat - x


def clamp_to_projection_ball(mu: np.ndarray, params: L1Params) -> np.ndarray:
    """Radial clamp onto the outer projection ball (containment invariant)."""
    norm = float(np.linalg.norm(mu))
    cap = params.max_mu_norm
    if norm <= cap or norm == 0.0:
        return mu
    return mu * (cap / norm)


def fast_subsystem_maps(params: L1Params, b: np.ndarray,
                        dt: float, substeps: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact discrete maps for the coupled prediction-error/estimate pair.

    For constant B the pair z = (x_tilde, mu_hat) obeys, away from the
    projection boundary,

        z_dot = [[A_m, B], [-Gamma B^T P, 0]] z + [-B r; 0]

    with r the instantaneous matched residual.  This subsystem oscillates at
    ~sqrt(Gamma |P|) rad/s, far above any practical fixed step, so it is
    advanced by its matrix exponential: z+ = E z + G b with E = e^{Lambda h}
    and G = int_0^h e^{Lambda s} ds over substep h = dt / substeps.
    """
    from scipy.linalg import expm
    n, m = b.shape
    lam = np.zeros((n + m, n + m))
    lam[:n, :n] = params.a_m
    lam[:n, n:] = b
    lam[n:, :n] = -params.gamma * b.T @ params.p
    h = dt / substeps
    # integral of expm via the block-augmentation trick
    aug = np.zeros((2 * (n + m), 2 * (n + m)))
    aug[:n + m, :n + m] = lam
    aug[:n + m, n + m:] = np.eye(n + m)
    phi = expm(aug * h)
    e_mat = phi[:n + m, :n + m]
    g_mat = phi[:n + m, n + m:]
    return e_mat, g_mat
