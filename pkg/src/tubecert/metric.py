"""Contraction metrics for control-affine tracking.

The dual metric W(x) is stored as a matrix polynomial

    W(x) = sum_t C_t prod_k x_k^{e_{t,k}},

with symmetric coefficient matrices C_t.  The metric itself is
M(x) = W(x)^{-1}, with eigenvalue bounds alpha_lower I <= M(x) <=
alpha_upper I on the constraint box and contraction rate lam.  A valid
metric satisfies, for every x in the box,

  (a) the eigenvalue sandwich,
  (b) the Killing condition along each input column b_j:
          d_{b_j} M + M (db_j/dx) + (db_j/dx)^T M = 0,
  (c) contraction of the projected differential dynamics: on the null
      space of B^T M,
          d_f M + M A + A^T M + 2 lam M <= 0,  A = df/dx,

which is checked numerically on a grid by ``ccm_check`` (the metric is
supplied as configuration, not synthesized here).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import solve_continuous_are, null_space

from .dynamics import Box, ControlAffineSystem


@dataclass
class ContractionMetric:
    """Polynomial dual metric with its certified constants."""

    exponents: np.ndarray   # (T, n) integer monomial exponents
    coeffs: np.ndarray      # (T, n, n) symmetric coefficients
    lam: float
    alpha_lower: float
    alpha_upper: float

    def __post_init__(self):
        self.exponents = np.asarray(self.exponents, dtype=int)
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.exponents.ndim != 2 or self.coeffs.ndim != 3:
            raise ValueError("exponents must be (T, n), coeffs (T, n, n)")
        if self.exponents.shape[0] != self.coeffs.shape[0]:
            raise ValueError("one coefficient matrix per monomial required")
        if self.lam <= 0 or self.alpha_lower <= 0 or self.alpha_lower > self.alpha_upper:
            raise ValueError("need lam > 0 and 0 < alpha_lower <= alpha_upper")
        self.coeffs = 0.5 * (self.coeffs + np.transpose(self.coeffs, (0, 2, 1)))

    @property
    def n(self) -> int:
        return self.coeffs.shape[1]

    @property
    def cond(self) -> float:
        return self.alpha_upper / self.alpha_lower

    # -- evaluation ---------------------------------------------------------

    def _monomials(self, x: np.ndarray) -> np.ndarray:
        return np.prod(np.power(x[None, :], self.exponents), axis=1)

    def W(self, x: np.ndarray) -> np.ndarray:
        mono = self._monomials(np.asarray(x, dtype=float))
        return np.einsum("t,tij->ij", mono, self.coeffs)

    def dW(self, x: np.ndarray) -> np.ndarray:
        """Partial derivatives dW/dx_i, shape (n, n, n) indexed [i]."""
        x = np.asarray(x, dtype=float)
        out = np.zeros((self.n, self.n, self.n))
        for i in range(self.n):
            exp = self.exponents[:, i]
            active = exp > 0
            if not np.any(active):
                continue
            dropped = self.exponents[active].copy()
            dropped[:, i] -= 1
            mono = np.prod(np.power(x[None, :], dropped), axis=1)
            out[i] = np.einsum("t,tij->ij", exp[active] * mono, self.coeffs[active])
        return out

    def M(self, x: np.ndarray) -> np.ndarray:
        return np.linalg.inv(self.W(x))

    def dM(self, x: np.ndarray) -> np.ndarray:
        """dM/dx_i = -M (dW/dx_i) M, shape (n, n, n)."""
        m = self.M(x)
        dw = self.dW(x)
        return -np.einsum("ij,ajk,kl->ail", m, dw, m)

    def L(self, x: np.ndarray) -> np.ndarray:
        """Factor with L^T L = W(x) (transpose of the lower Cholesky factor)."""
        return np.linalg.cholesky(self.W(x)).T

    def directional_dW(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        return np.einsum("i,ijk->jk", v, self.dW(x))

    def directional_dM(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        return np.einsum("i,ijk->jk", v, self.dM(x))

    def is_constant(self) -> bool:
        return bool(np.all(self.exponents == 0))

    # -- serialization -------------------------------------------------------

    def to_json(self, path: str | Path) -> None:
        doc = {
            "lam": self.lam,
            "alpha_lower": self.alpha_lower,
            "alpha_upper": self.alpha_upper,
            "exponents": self.exponents.tolist(),
            "coeffs": [c.tolist() for c in self.coeffs],
        }
        Path(path).write_text(json.dumps(doc, indent=1))

    @staticmethod
    def from_json(source: str | Path | dict) -> "ContractionMetric":
        if isinstance(source, dict):
            doc = source
        else:
            doc = json.loads(Path(source).read_text())
        return ContractionMetric(
            exponents=np.asarray(doc["exponents"], dtype=int),
            coeffs=np.asarray(doc["coeffs"], dtype=float),
            lam=float(doc["lam"]),
            alpha_lower=float(doc["alpha_lower"]),
            alpha_upper=float(doc["alpha_upper"]),
        )


def constant_metric_from_riccati(sys: ControlAffineSystem, x_eq: np.ndarray,
                                 lam: float, state_weight=None,
                                 input_weight=None) -> ContractionMetric:
    """Constant-metric fallback from a Riccati design at an equilibrium.

    Solves the CARE at the linearization and uses M = P: on the null space of
    B^T P the closed form gives d/dt(dx' P dx) = -dx' Q dx, so the projected
    contraction holds near x_eq for rates up to min eig(Q) / (2 max eig(P)).
    The returned constants must still be validated on the box by ccm_check.
    """
    a = sys.jac_f(x_eq)
    b = sys.B(x_eq)
    q = np.eye(sys.n) if state_weight is None else np.asarray(state_weight)
    r = np.eye(sys.m) if input_weight is None else np.asarray(input_weight)
    p = solve_continuous_are(a, b, q, r)
    w = np.linalg.inv(p)
    evals = np.linalg.eigvalsh(p)
    return ContractionMetric(
        exponents=np.zeros((1, sys.n), dtype=int),
        coeffs=w[None, :, :],
        lam=lam,
        alpha_lower=float(evals.min()),
        alpha_upper=float(evals.max()),
    )


@dataclass
class CCMReport:
    """Worst-case margins of the three metric conditions over a grid.

    eig_low_margin    min over grid of (min eig M - alpha_lower)   (>= -tol)
    eig_high_margin   min over grid of (alpha_upper - max eig M)   (>= -tol)
    killing_residual  max over grid and input columns of the Killing norm
    contraction_max   max over grid of max eig of the projected condition
    """

    eig_low_margin: float
    eig_high_margin: float
    killing_residual: float
    contraction_max: float
    eig_tol: float = 1e-8
    killing_tol: float = 1e-6
    contraction_tol: float = 1e-8
    n_grid: int = 0

    @property
    def eig_ok(self) -> bool:
        return (self.eig_low_margin >= -self.eig_tol
                and self.eig_high_margin >= -self.eig_tol)

    @property
    def killing_ok(self) -> bool:
        return self.killing_residual <= self.killing_tol

    @property
    def contraction_ok(self) -> bool:
        return self.contraction_max <= self.contraction_tol

    @property
    def all_ok(self) -> bool:
        return self.eig_ok and self.killing_ok and self.contraction_ok


def ccm_check(metric: ContractionMetric, sys: ControlAffineSystem,
              box: Box, grid_resolution, lam: float | None = None,
              contraction_tol: float = 1e-8) -> CCMReport:
    """Numerically verify the metric conditions on a grid over the box."""
    lam = metric.lam if lam is None else lam
    pts = box.grid(grid_resolution)
    eig_low = np.inf
    eig_high = np.inf
    killing = 0.0
    contraction = -np.inf
    for x in pts:
        m = metric.M(x)
        evals = np.linalg.eigvalsh(m)
        eig_low = min(eig_low, evals.min() - metric.alpha_lower)
        eig_high = min(eig_high, metric.alpha_upper - evals.max())

        b = sys.B(x)
        db = sys.jac_B_cols(x)  # (n, n, m): [i] = dB/dx_i
        dm = metric.dM(x)
        for j in range(sys.m):
            dir_dm = np.einsum("i,ijk->jk", b[:, j], dm)
            col_jac = db[:, :, j].T  # rows: d b_j / dx_i -> (n, n) with cols i
            term = m @ col_jac
            res = dir_dm + term + term.T
            killing = max(killing, float(np.linalg.norm(res)))

        a = sys.jac_f(x)
        g = metric.directional_dM(x, sys.f(x)) + m @ a + a.T @ m + 2 * lam * m
        basis = null_space(b.T @ m)
        if basis.shape[1]:
            proj = basis.T @ g @ basis
            contraction = max(contraction, float(np.linalg.eigvalsh(proj).max()))
    return CCMReport(
        eig_low_margin=float(eig_low),
        eig_high_margin=float(eig_high),
        killing_residual=killing,
        contraction_max=float(contraction),
        contraction_tol=contraction_tol,
        n_grid=pts.shape[0],
    )
