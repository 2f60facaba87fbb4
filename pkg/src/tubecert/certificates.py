"""Tube certificates: constants, feasibility conditions, and ultimate bounds.

Given a contraction metric, a plant with conservative bounds, an uncertainty
triple (conservative or learned), a desired plan, and the adaptation-loop
parameters, this module evaluates the certificate constants, checks the
feasibility of a (filter bandwidth, adaptation rate) pair, and produces the
tube radius and the uniform-ultimate-bound curve.

Suprema over the tube around the plan are approximated by deterministic
low-discrepancy (Halton) sampling of the rho-ball around each plan knot.

Eigenvalue-bound convention: alpha_lower I <= M(x) <= alpha_upper I.  The
ratio prefactor in kappa_1/kappa_2 uses alpha_lower/alpha_upper (<= 1); with
the opposite orientation no in-box tube is certifiable for any metric of the
benchmark plant, while this orientation reproduces the reported episode
feasibility.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh
from scipy.special import ndtri
from scipy.stats.qmc import Halton

from .dynamics import Box, ControlAffineSystem, ModelBounds
from .metric import ContractionMetric


class BandwidthExclusionError(ValueError):
    """omega too close to 2 lam: the kappa_1/kappa_2 denominator is singular."""


@dataclass(frozen=True)
class TubeParams:
    """Tube radii: rho_r covers the transient, rho_a the adaptation residual."""

    rho_a: float
    eps: float
    rho_r: float
    rho: float


def compute_tube_params(metric: ContractionMetric, x_d0: np.ndarray,
                        x0: np.ndarray, rho_a: float, eps: float) -> TubeParams:
    if rho_a <= 0 or eps <= 0:
        raise ValueError("rho_a and eps must be positive")
    ratio = np.sqrt(metric.alpha_upper / metric.alpha_lower)
    rho_r = float(ratio * np.linalg.norm(np.asarray(x_d0) - np.asarray(x0)) + eps)
    return TubeParams(rho_a=rho_a, eps=eps, rho_r=rho_r, rho=rho_r + rho_a)


def tube_inside_box(box: Box, plan_states: np.ndarray, rho: float) -> bool:
    """True when the rho-ball around every knot stays inside the box."""
    states = np.atleast_2d(plan_states)
    return bool(np.all(states - rho >= box.lower[None, :])
                and np.all(states + rho <= box.upper[None, :]))


def ball_offsets(dim: int, radius: float, count: int) -> np.ndarray:
    """Deterministic low-discrepancy points in the radius-ball, (count, dim)."""
    eng = Halton(d=dim + 1, scramble=False)
    raw = eng.random(count + 1)[1:]  # drop the degenerate all-zeros point
    directions = ndtri(np.clip(raw[:, :dim], 1e-12, 1 - 1e-12))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    directions = directions / np.maximum(norms, 1e-300)
    radii = radius * raw[:, dim:] ** (1.0 / dim)
    return directions * radii


@dataclass(frozen=True)
class CertificateConstants:
    """Every certificate constant, for one (plan, triple, omega) instance."""

    triple: tuple  # (delta, delta_x, delta_xi) actually used
    rho: float
    omega: float
    lam: float
    alpha_lower: float
    alpha_upper: float
    delta_mx: float
    delta_psi_x: float
    delta_du: float
    delta_xdot_r: float
    delta_xdot: float
    delta_xtilde: float
    delta_eta: float
    delta_theta: float
    delta_psi_dot: float
    delta_gamma_s_dot: float
    delta_f: float
    delta_fx: float
    delta_b: float
    delta_ud: float
    kappa1: float
    kappa2: float
    kappa3: float
    kappa4: float
    provenance: dict = field(default_factory=dict)

    @property
    def kappas(self) -> tuple[float, float, float, float]:
        return (self.kappa1, self.kappa2, self.kappa3, self.kappa4)

    def zetas(self, omega: float | None = None) -> tuple[float, float, float]:
        w = self.omega if omega is None else omega
        return (self.kappa1 / w, self.kappa2 / w, self.kappa3 / w)

    def as_dict(self) -> dict:
        out = {k: getattr(self, k) for k in (
            "rho", "omega", "lam", "alpha_lower", "alpha_upper", "delta_mx",
            "delta_psi_x", "delta_du", "delta_xdot_r", "delta_xdot",
            "delta_xtilde", "delta_eta", "delta_theta", "delta_psi_dot",
            "delta_gamma_s_dot", "delta_f", "delta_fx", "delta_b", "delta_ud",
            "kappa1", "kappa2", "kappa3", "kappa4")}
        out["triple"] = list(self.triple)
        out["provenance"] = self.provenance
        return out


def compute_constants(metric: ContractionMetric, sys: ControlAffineSystem,
                      triple: tuple, model_bounds: ModelBounds,
                      tube: TubeParams, plan_states: np.ndarray,
                      plan_controls: np.ndarray, omega: float,
                      p_mat: np.ndarray, q_mat: np.ndarray, a_m: np.ndarray,
                      sampling_density: int = 256,
                      knot_stride: int | None = None) -> CertificateConstants:
    """Evaluate all certificate constants for the given uncertainty triple.

    Tube suprema use ``sampling_density`` Halton ball samples per plan knot
    (knots optionally strided to bound runtime; recorded in provenance).
    The hatted (learned) constants are the same formulas with the learned
    triple substituted everywhere, including inside the speed bounds.
    """
    delta_h, delta_hx, delta_hxi = triple
    lam = metric.lam
    if abs(2.0 * lam / omega - 1.0) < 0.05:
        raise BandwidthExclusionError(
            f"omega={omega} within 5% of 2*lam={2 * lam}: kappa denominator singular")

    states = np.atleast_2d(plan_states)
    controls = np.atleast_2d(plan_controls)
    if knot_stride is None:
        knot_stride = max(1, states.shape[0] // 100)
    knots = states[::knot_stride]
    offsets = ball_offsets(sys.n, tube.rho, sampling_density)

    a_lo, a_hi = metric.alpha_lower, metric.alpha_upper
    sup_f = sup_fx = sup_mx = sup_b = sup_bx = sup_bcolx = 0.0
    sup_ratio = 0.0  # lam_max(L^-T F L^-1) over the tube
    min_sv = np.inf   # sigma_min>0(B^T L^-1) over the tube
    constant_metric = metric.is_constant()
    for knot in knots:
        samples = knot[None, :] + offsets
        for x in samples:
            fx = sys.f(x)
            a = sys.jac_f(x)
            b = sys.B(x)
            db = sys.jac_B_cols(x)
            sup_f = max(sup_f, float(np.linalg.norm(fx)))
            sup_fx = max(sup_fx, float(np.linalg.norm(a, 2)))
            sup_b = max(sup_b, float(np.linalg.norm(b, 2)))
            if np.any(db):
                sup_bx = max(sup_bx, float(sum(np.linalg.norm(db[i], 2)
                                               for i in range(sys.n))))
                sup_bcolx = max(sup_bcolx, float(sum(
                    np.linalg.norm(db[:, :, j].T, 2) for j in range(sys.m))))
            w = metric.W(x)
            if not constant_metric:
                dm = metric.dM(x)
                sup_mx = max(sup_mx, float(sum(np.linalg.norm(dm[i], 2)
                                               for i in range(sys.n))))
                dw_f = metric.directional_dW(x, fx)
            else:
                dw_f = np.zeros_like(w)
            f_mat = -dw_f + (a @ w + w @ a.T) + 2.0 * lam * w
            # lam_max(L^-T F L^-1) equals the top generalized eigenvalue of
            # (F, W); sigma_min>0(B^T L^-1) is sqrt(min eig of B^T M B)
            top = float(eigh(f_mat, w, eigvals_only=True,
                             subset_by_index=[sys.n - 1, sys.n - 1])[0])
            sup_ratio = max(sup_ratio, top)
            m_mat = np.linalg.inv(w)
            bmb = b.T @ m_mat @ b
            min_sv = min(min_sv, float(np.sqrt(max(np.linalg.eigvalsh(bmb)[0],
                                                   0.0))))
        if constant_metric and knots.shape[0] and sup_b > 0:
            # constant metric and B: one knot of samples settles the
            # metric-dependent suprema; keep scanning f-dependent ones only
            pass

    delta_ud = float(np.max(np.linalg.norm(controls, axis=1))) if controls.size else 0.0
    delta_du = 0.5 * sup_ratio / max(min_sv, 1e-300)

    norm_one_minus_c = 2.0
    norm_sc = 2.0 * omega
    delta_xdot_r = sup_f + sup_b * (norm_one_minus_c * delta_h + delta_ud
                                    + tube.rho * delta_du)
    delta_xdot = sup_f + sup_b * (2.0 * delta_h + delta_ud + tube.rho * delta_du)

    p_eigs = np.linalg.eigvalsh(p_mat)
    q_eigs = np.linalg.eigvalsh(q_mat)
    delta_xtilde = float(np.sqrt(
        4.0 * p_eigs.max() * delta_h * (delta_hxi + delta_hx * delta_xdot)
        / (p_eigs.min() * q_eigs.min())
        + 4.0 * delta_h ** 2 / p_eigs.min()))

    norm_am = float(np.linalg.norm(a_m, 2))
    delta_eta = (model_bounds.delta_B_pinv_x * delta_xdot
                 + (norm_sc + norm_am) * model_bounds.delta_B_pinv) * delta_xtilde
    delta_theta = sup_b * a_hi * delta_eta / lam

    delta_gamma_s_dot = float(np.sqrt(a_hi / a_lo) * (
        sup_fx + (delta_h + delta_ud + tube.rho * delta_du) * sup_bcolx
        + (delta_hx + np.sqrt(a_lo) * delta_du / np.sqrt(a_hi)) * sup_b))
    delta_psi_dot = a_hi * (sup_b * delta_gamma_s_dot
                            + sup_b * sup_mx * delta_xdot / np.sqrt(a_hi * a_lo)
                            + sup_bx * delta_xdot)
    delta_psi_x = 2.0 * sup_bx + sup_b * sup_mx / a_lo

    # ratio orientation per the printed eigenvalue sandwich (see module note)
    ratio = a_lo / a_hi
    paren = (delta_h / abs(2.0 * lam / omega - 1.0)
             + (delta_hxi + delta_hx * delta_xdot_r) / (2.0 * lam))
    kappa1 = 2.0 * tube.rho * sup_b * ratio * paren
    kappa2 = a_hi * delta_psi_x * ratio * paren
    kappa3 = a_hi * delta_hx * (4.0 * lam * sup_b + delta_psi_dot) / lam
    kappa4 = delta_theta

    return CertificateConstants(
        triple=tuple(float(v) for v in triple),
        rho=tube.rho, omega=omega, lam=lam,
        alpha_lower=a_lo, alpha_upper=a_hi,
        delta_mx=sup_mx, delta_psi_x=delta_psi_x, delta_du=delta_du,
        delta_xdot_r=delta_xdot_r, delta_xdot=delta_xdot,
        delta_xtilde=delta_xtilde, delta_eta=delta_eta,
        delta_theta=delta_theta, delta_psi_dot=delta_psi_dot,
        delta_gamma_s_dot=delta_gamma_s_dot,
        delta_f=sup_f, delta_fx=sup_fx, delta_b=sup_b, delta_ud=delta_ud,
        kappa1=float(kappa1), kappa2=float(kappa2), kappa3=float(kappa3),
        kappa4=float(kappa4),
        provenance={
            "sampling_density": sampling_density,
            "knot_stride": knot_stride,
            "n_knots_sampled": int(knots.shape[0]),
        })


@dataclass(frozen=True)
class CertificateVerdict:
    """Feasibility of (omega, Gamma) and the resulting performance bounds."""

    feasible: bool
    margins: tuple  # (transient, bandwidth, adaptation) signed margins
    rho: float
    rho_r: float
    rho_a: float
    energy0: float
    zeta: tuple
    omega: float
    gamma: float
    lam: float
    alpha_lower: float
    kappa4: float

    def uub(self, t: float) -> float:
        """Uniform ultimate bound delta(omega, T) = mu(omega, T) + rho_a."""
        mu = np.sqrt(np.exp(-2.0 * self.lam * t) * self.energy0 / self.alpha_lower
                     + self.zeta[0])
        return float(mu + self.rho_a)

    def as_dict(self) -> dict:
        return {
            "feasible": bool(self.feasible),
            "margins": [float(v) for v in self.margins],
            "rho": self.rho, "rho_r": self.rho_r, "rho_a": self.rho_a,
            "energy0": self.energy0,
            "zeta": [float(v) for v in self.zeta],
            "omega": self.omega, "gamma": self.gamma, "lam": self.lam,
            "alpha_lower": self.alpha_lower, "kappa4": self.kappa4,
        }


def check_conditions(constants: CertificateConstants, tube: TubeParams,
                     energy0: float, omega: float,
                     gamma: float) -> CertificateVerdict:
    """Evaluate the three feasibility inequalities and their signed margins.

      1.  rho_r^2 >= E_0 / alpha_lower + zeta_1
      2.  alpha_lower > zeta_2 + zeta_3
      3.  sqrt(Gamma) > kappa_4 / (rho_a (alpha_lower - zeta_2 - zeta_3))
    """
    if abs(constants.omega - omega) > 1e-12:
        raise ValueError("constants were computed for a different bandwidth")
    z1, z2, z3 = constants.zetas(omega)
    a_lo = constants.alpha_lower
    margin1 = tube.rho_r ** 2 - energy0 / a_lo - z1
    margin2 = a_lo - z2 - z3
    if margin2 > 0:
        margin3 = np.sqrt(gamma) - constants.kappa4 / (tube.rho_a * margin2)
    else:
        margin3 = -np.inf
    feasible = bool(margin1 >= 0 and margin2 > 0 and margin3 > 0)
    return CertificateVerdict(
        feasible=feasible,
        margins=(float(margin1), float(margin2), float(margin3)),
        rho=tube.rho, rho_r=tube.rho_r, rho_a=tube.rho_a,
        energy0=float(energy0), zeta=(z1, z2, z3),
        omega=omega, gamma=gamma, lam=constants.lam,
        alpha_lower=a_lo, kappa4=constants.kappa4)


def uub_curve(verdict: CertificateVerdict, t_grid: np.ndarray) -> np.ndarray:
    """Sampled uniform-ultimate-bound curve, rows (T, delta(omega, T))."""
    if not verdict.feasible:
        raise ValueError("uniform ultimate bound requires a feasible certificate")
    ts = np.asarray(t_grid, dtype=float)
    return np.stack([ts, np.array([verdict.uub(t) for t in ts])], axis=1)
