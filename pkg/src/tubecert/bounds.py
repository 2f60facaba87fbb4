"""High-probability uniform error bounds for learned uncertainty models.

Given per-channel GP posteriors on z = (xi, x), this module computes
certified bounds on the remainder uncertainty h - nu_N and on its xi/x
gradients that hold uniformly over the compact domain Z with probability at
least 1 - delta.  The construction discretizes Z with a tau-covering,
applies Gaussian tail + union bounds on the covering (the beta terms), and
extends to all of Z through Lipschitz continuity of the posterior means and
a modulus of continuity for the posterior standard deviations.

All covering arithmetic is done in log space: with tau as small as 1e-8 the
covering number is astronomically large but log M stays modest, and only
log M enters the beta terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dynamics import Box, ModelBounds
from .gp import GPModel, KernelRegularity


@dataclass(frozen=True)
class CoveringParams:
    """Covering discretization and confidence scalings for a domain Z.

    beta     = 2 log(m M / delta)        for the function bound
    beta_xi  = 2 log(l m M / delta_hat)  for the xi-gradient bound
    beta_x   = 2 log(n m M / delta_hat)  for the x-gradient bound

    with delta_hat = 1 - (1 - delta)^(1/m) and M the tau-covering number of
    Z (stored as log_cov).
    """

    tau: float
    delta: float
    delta_hat: float
    log_cov: float
    beta: float
    beta_xi: float
    beta_x: float
    m: int
    l: int
    n: int


def covering_number_log(domain: Box, tau: float) -> float:
    """Log of an upper bound on the tau-covering number of a box.

    Boxes of side 2 tau / sqrt(d) inscribe in tau-balls, so
    M = prod_i ceil(edge_i sqrt(d) / (2 tau)) covers the box.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    d = domain.dim
    counts = np.ceil(domain.edges * np.sqrt(d) / (2.0 * tau))
    return float(np.sum(np.log(np.maximum(counts, 1.0))))


def beta_terms(log_cov: float, m: int, l: int, n: int,
               delta: float) -> tuple[float, float, float]:
    """Confidence scalings from the covering size, computed in log space."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    delta_hat = 1.0 - (1.0 - delta) ** (1.0 / m)
    beta = 2.0 * (np.log(m) + log_cov - np.log(delta))
    beta_xi = 2.0 * (np.log(l * m) + log_cov - np.log(delta_hat))
    beta_x = 2.0 * (np.log(n * m) + log_cov - np.log(delta_hat))
    return float(beta), float(beta_xi), float(beta_x)


def covering_params(domain: Box, tau: float, delta: float, m: int,
                    l: int) -> CoveringParams:
    """Bundle covering number and beta terms for the product domain."""
    n = domain.dim - l
    log_cov = covering_number_log(domain, tau)
    beta, beta_xi, beta_x = beta_terms(log_cov, m, l, n, delta)
    return CoveringParams(
        tau=tau, delta=delta, delta_hat=1.0 - (1.0 - delta) ** (1.0 / m),
        log_cov=log_cov, beta=beta, beta_xi=beta_xi, beta_x=beta_x,
        m=m, l=l, n=n)


def beta_finite(count: int, m: int, delta: float) -> float:
    """Confidence scaling for a finite set of the given cardinality."""
    return float(2.0 * (np.log(m) + np.log(count) - np.log(delta)))


@dataclass(frozen=True)
class ContinuityConstants:
    """Lipschitz constants of posterior means and continuity moduli of
    posterior standard deviations, for the fitted model.

    The moduli have the square-root form omega(r) = sqrt(coeff * r); only the
    coefficients are stored.
    """

    lip_mean: float
    omega_coeff: float
    grad_xi_lip_mean: np.ndarray
    grad_x_lip_mean: np.ndarray
    grad_xi_omega_coeff: np.ndarray
    grad_x_omega_coeff: np.ndarray

    def omega(self, r: float) -> float:
        return float(np.sqrt(self.omega_coeff * r))

    def grad_xi_omega(self, r: float) -> np.ndarray:
        return np.sqrt(self.grad_xi_omega_coeff * r)

    def grad_x_omega(self, r: float) -> np.ndarray:
        return np.sqrt(self.grad_x_omega_coeff * r)


def continuity_constants(model: GPModel,
                         regs: Sequence[KernelRegularity]) -> ContinuityConstants:
    """Assemble the continuity constants from kernel regularity and weights.

    For N data points with per-channel weight vectors alpha_i and Gram
    inverse norms:

        L_nu       = sqrt(N sum_i lip_k_i^2 |alpha_i|^2)
        omega(r)^2 = 2 r sum_i lip_k_i (1 + N |G_i^-1| sup K_i)

    and, per channel, the gradient analogues use the second-derivative
    suprema and per-coordinate first-derivative sums.
    """
    n_data = model.n_points
    m = model.n_channels
    lip_sq = 0.0
    omega_c = 0.0
    g_xi_lip = np.zeros(m)
    g_x_lip = np.zeros(m)
    g_xi_om = np.zeros(m)
    g_x_om = np.zeros(m)
    for i, (ch, reg) in enumerate(zip(model.channels, regs)):
        sup_k = ch.kernel.signal_variance  # SE peaks at coincident arguments
        lip_sq += reg.lip_k ** 2 * ch.alpha_norm ** 2
        omega_c += 2.0 * reg.lip_k * (1.0 + n_data * ch.inv_norm * sup_k)
        g_xi_lip[i] = np.sqrt(n_data) * reg.lip_grad_xi * ch.alpha_norm
        g_x_lip[i] = np.sqrt(n_data) * reg.lip_grad_x * ch.alpha_norm
        g_xi_om[i] = 2.0 * reg.lip_grad_xi * (
            1.0 + n_data * ch.inv_norm * np.sum(reg.coord_max_xi))
        g_x_om[i] = 2.0 * reg.lip_grad_x * (
            1.0 + n_data * ch.inv_norm * np.sum(reg.coord_max_x))
    return ContinuityConstants(
        lip_mean=float(np.sqrt(n_data * lip_sq)),
        omega_coeff=float(omega_c),
        grad_xi_lip_mean=g_xi_lip,
        grad_x_lip_mean=g_x_lip,
        grad_xi_omega_coeff=g_xi_om,
        grad_x_omega_coeff=g_x_om,
    )


def gamma_terms(cov: CoveringParams, consts: ContinuityConstants,
                bounds: ModelBounds) -> tuple[float, np.ndarray, np.ndarray]:
    """Discretization slack gamma(tau) and its per-channel gradient variants."""
    tau = cov.tau
    gamma = ((bounds.delta_hx + bounds.delta_hxi + consts.lip_mean) * tau
             + np.sqrt(cov.beta) * consts.omega(tau))
    hess_xi = bounds.hess_xi if bounds.hess_xi.size else np.zeros(cov.m)
    hess_x = bounds.hess_x if bounds.hess_x.size else np.zeros(cov.m)
    gamma_xi = ((hess_xi + consts.grad_xi_lip_mean) * tau
                + np.sqrt(cov.beta_xi) * consts.grad_xi_omega(tau))
    gamma_x = ((hess_x + consts.grad_x_lip_mean) * tau
               + np.sqrt(cov.beta_x) * consts.grad_x_omega(tau))
    return float(gamma), gamma_xi, gamma_x


def pointwise_bounds(model: GPModel, cov: CoveringParams,
                     consts: ContinuityConstants, bounds: ModelBounds,
                     zq: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pointwise remainder bounds (function, xi-gradient, x-gradient).

    ``zq`` may be one point (d,) or a batch (M, d); outputs are scalars or
    (M,) arrays.  Out-of-domain queries are evaluated as-is.
    """
    single = np.ndim(zq) == 1
    zb = np.atleast_2d(zq)
    gamma, gamma_xi, gamma_x = gamma_terms(cov, consts, bounds)
    _, stds = model.mean_std(zb)                       # (m, M)
    dh = np.sqrt(cov.beta) * np.linalg.norm(stds, axis=0) + gamma
    std_xi, std_x = model.derivative_std_batch(zb, cov.l)  # (m, M, l), (m, M, n)
    per_ch_xi = gamma_xi[:, None] + np.sqrt(cov.beta_xi) * np.linalg.norm(std_xi, axis=2)
    per_ch_x = gamma_x[:, None] + np.sqrt(cov.beta_x) * np.linalg.norm(std_x, axis=2)
    dh_xi = np.linalg.norm(per_ch_xi, axis=0)
    dh_x = np.linalg.norm(per_ch_x, axis=0)
    if single:
        return float(dh[0]), float(dh_xi[0]), float(dh_x[0])
    return dh, dh_xi, dh_x


@dataclass(frozen=True)
class RemainderBounds:
    """Certified suprema of the pointwise bounds over the domain."""

    delta_h: float
    delta_hx: float
    delta_hxi: float
    provenance: dict = field(default_factory=dict)

    @property
    def triple(self) -> tuple[float, float, float]:
        return (self.delta_h, self.delta_hx, self.delta_hxi)

    def capped_by(self, conservative: ModelBounds) -> "RemainderBounds":
        """Optional post-processing: never exceed the conservative triple."""
        return RemainderBounds(
            delta_h=min(self.delta_h, conservative.delta_h),
            delta_hx=min(self.delta_hx, conservative.delta_hx),
            delta_hxi=min(self.delta_hxi, conservative.delta_hxi),
            provenance={**self.provenance, "capped": True},
        )


_CHUNK = 8192


def _eval_bounds_chunked(model, cov, consts, bounds, pts):
    dh = np.empty(pts.shape[0])
    dh_xi = np.empty(pts.shape[0])
    dh_x = np.empty(pts.shape[0])
    for start in range(0, pts.shape[0], _CHUNK):
        sl = slice(start, min(start + _CHUNK, pts.shape[0]))
        dh[sl], dh_xi[sl], dh_x[sl] = pointwise_bounds(
            model, cov, consts, bounds, pts[sl])
    return dh, dh_xi, dh_x


def remainder_bounds(model: GPModel, cov: CoveringParams,
                     consts: ContinuityConstants, bounds: ModelBounds,
                     domain: Box, grid_resolution) -> RemainderBounds:
    """Suprema of the three pointwise bounds over a deterministic grid.

    The tensor grid uses the per-dimension resolutions in
    ``grid_resolution``; after the coarse pass, a local patch around each
    argmax (one coarse cell wide, 11 points per refined dimension) is
    rescanned.  Dimensions with coarse resolution < 3 are not refined.
    """
    res = np.broadcast_to(np.asarray(grid_resolution, dtype=int), (domain.dim,))
    if np.any(res < 1):
        raise ValueError("grid resolution must be at least 1 per dimension")
    pts = domain.grid(res)
    dh, dh_xi, dh_x = _eval_bounds_chunked(model, cov, consts, bounds, pts)
    sups = [float(dh.max()), float(dh_x.max()), float(dh_xi.max())]
    arg_pts = [pts[int(np.argmax(dh))], pts[int(np.argmax(dh_x))],
               pts[int(np.argmax(dh_xi))]]

    spacing = np.where(res > 1, domain.edges / np.maximum(res - 1, 1), 0.0)
    refine_dims = res >= 3
    for which, center in enumerate(arg_pts):
        if not np.any(refine_dims):
            break
        lo = np.maximum(center - spacing, domain.lower)
        hi = np.minimum(center + spacing, domain.upper)
        axes = []
        for k in range(domain.dim):
            if refine_dims[k] and hi[k] > lo[k]:
                axes.append(np.linspace(lo[k], hi[k], 11))
            else:
                axes.append(np.array([center[k]]))
        mesh = np.meshgrid(*axes, indexing="ij")
        local = np.stack([m.ravel() for m in mesh], axis=-1)
        ldh, ldh_xi, ldh_x = _eval_bounds_chunked(model, cov, consts, bounds, local)
        local_max = [ldh.max(), ldh_x.max(), ldh_xi.max()][which]
        sups[which] = max(sups[which], float(local_max))

    return RemainderBounds(
        delta_h=sups[0], delta_hx=sups[1], delta_hxi=sups[2],
        provenance={
            "delta": cov.delta,
            "tau": cov.tau,
            "n_data": model.n_points,
            "grid_resolution": [int(r) for r in res],
            "refined_dims": [bool(b) for b in refine_dims],
            "refinement_points_per_dim": 11,
        })
