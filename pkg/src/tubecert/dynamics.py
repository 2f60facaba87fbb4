"""Control-affine plant models and fixed-step integration.

Systems have the form

    xdot = f(x) + B(x) (u + h(xi, x)),

where ``f`` and ``B`` are the known nominal terms and ``h`` is a matched
uncertainty entering through the input channels.  The exogenous signal
``xi(t)`` (dimension ``l``) carries any known time-varying parameter; the
planar quadrotor benchmark uses ``xi = t`` with ``l = 1``.

The module exposes three evaluation modes of the same plant:

* nominal     ``f(x) + B(x) u``
* actual      ``f(x) + B(x) (u + h(xi, x))``      (simulator-only truth)
* learned     ``f(x) + B(x) (u + mean_fn(xi, x))``

plus the planar quadrotor instance with its ground-truth uncertainty field,
conservative model bounds, and state constraint box.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

GRAVITY = 9.81  # [m/s^2]


class DimensionError(ValueError):
    """Raised when a state or input vector does not match the plant dimensions."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, used for state constraint sets and exogenous domains."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("box bounds must be 1-d arrays of equal length")
        if not np.all(lo < hi):
            raise ValueError("box must satisfy lower < upper componentwise")

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def edges(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def contains(self, x: np.ndarray, margin: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - margin) and np.all(x <= self.upper + margin))

    def clip(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)

    def shrink(self, amount) -> "Box":
        """Inset the box by ``amount`` (scalar or per-coordinate)."""
        amount = np.broadcast_to(np.asarray(amount, dtype=float), self.lower.shape)
        lo, hi = self.lower + amount, self.upper - amount
        if not np.all(lo < hi):
            raise ValueError("shrink amount exceeds box half-width")
        return Box(lo, hi)

    def grid(self, resolution) -> np.ndarray:
        """Tensor grid with per-dimension point counts, shape (n_points, dim)."""
        res = np.broadcast_to(np.asarray(resolution, dtype=int), (self.dim,))
        axes = [np.linspace(self.lower[i], self.upper[i], max(int(res[i]), 1))
                for i in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        u = rng.random((n, self.dim))
        return self.lower + u * self.edges

    def product(self, other: "Box") -> "Box":
        return Box(np.concatenate([self.lower, other.lower]),
                   np.concatenate([self.upper, other.upper]))


@dataclass(frozen=True)
class ModelBounds:
    """Conservative bounds on the nominal terms and the uncertainty.

    The uncertainty triple (delta_h, delta_hx, delta_hxi) bounds the norm of
    h and of its state/exogenous gradients over the constraint set; the
    hess_* arrays bound per-channel Hessian norms.  The remaining entries
    bound the nominal vector field, input matrix, pseudoinverse, and desired
    input along a tube.
    """

    delta_f: float
    delta_fx: float
    delta_B: float
    delta_Bx: float
    delta_bx: float
    delta_h: float
    delta_hx: float
    delta_hxi: float
    delta_B_pinv: float
    delta_B_pinv_x: float
    delta_ud: float
    hess_xi: np.ndarray = field(default_factory=lambda: np.zeros(0))
    hess_x: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        object.__setattr__(self, "hess_xi", np.asarray(self.hess_xi, dtype=float))
        object.__setattr__(self, "hess_x", np.asarray(self.hess_x, dtype=float))
        for name in ("delta_f", "delta_fx", "delta_B", "delta_Bx", "delta_bx",
                     "delta_h", "delta_hx", "delta_hxi", "delta_B_pinv",
                     "delta_B_pinv_x", "delta_ud"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def uncertainty_triple(self) -> tuple[float, float, float]:
        return (self.delta_h, self.delta_hx, self.delta_hxi)


@dataclass(frozen=True)
class ControlAffineSystem:
    """Nominal control-affine plant: xdot = f(x) + B(x) u."""

    n: int
    m: int
    f: Callable[[np.ndarray], np.ndarray]
    B: Callable[[np.ndarray], np.ndarray]
    jac_f: Callable[[np.ndarray], np.ndarray]
    jac_B_cols: Callable[[np.ndarray], np.ndarray]  # (n, n, m): [i] = dB/dx_i
    name: str = "system"

    def pinv_B(self, x: np.ndarray) -> np.ndarray:
        """Moore-Penrose inverse (B^T B)^{-1} B^T; requires full column rank."""
        b = self.B(x)
        gram = b.T @ b
        if np.linalg.cond(gram) > 1e12:
            raise np.linalg.LinAlgError("B(x) is rank deficient at the query state")
        return np.linalg.solve(gram, b.T)

    def check_dims(self, x: np.ndarray, u: np.ndarray | None = None) -> None:
        if np.shape(x) != (self.n,):
            raise DimensionError(f"state has shape {np.shape(x)}, expected ({self.n},)")
        if u is not None and np.shape(u) != (self.m,):
            raise DimensionError(f"input has shape {np.shape(u)}, expected ({self.m},)")


@dataclass(frozen=True)
class UncertaintyField:
    """Ground-truth matched uncertainty h(xi, x) with analytic gradients.

    Only the simulator and the measurement generator may evaluate this; the
    controller and certificates see it through data and bounds alone.
    """

    l: int
    m: int
    h: Callable[[np.ndarray, np.ndarray], np.ndarray]
    grad_x: Callable[[np.ndarray, np.ndarray], np.ndarray]   # (m, n)
    grad_xi: Callable[[np.ndarray, np.ndarray], np.ndarray]  # (m, l)


def eval_nominal(sys: ControlAffineSystem, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Nominal dynamics f(x) + B(x) u."""
    sys.check_dims(x, u)
    return sys.f(x) + sys.B(x) @ u


def eval_actual(sys: ControlAffineSystem, unc: UncertaintyField,
                xi: np.ndarray, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """True dynamics f(x) + B(x)(u + h(xi, x)); simulator-side only."""
    sys.check_dims(x, u)
    return sys.f(x) + sys.B(x) @ (u + unc.h(xi, x))


def eval_learned(sys: ControlAffineSystem,
                 mean_fn: Callable[[np.ndarray, np.ndarray], np.ndarray],
                 xi: np.ndarray, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Learned dynamics f(x) + B(x)(u + mean_fn(xi, x))."""
    sys.check_dims(x, u)
    mu = np.asarray(mean_fn(xi, x), dtype=float)
    if mu.shape != (sys.m,):
        raise DimensionError(f"mean_fn returned shape {mu.shape}, expected ({sys.m},)")
    return sys.f(x) + sys.B(x) @ (u + mu)


def rk4_step(deriv: Callable[[float, np.ndarray], np.ndarray],
             t: float, x: np.ndarray, dt: float) -> np.ndarray:
    """One classical fourth-order Runge-Kutta step."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    k1 = np.asarray(deriv(t, x))
    k2 = np.asarray(deriv(t + 0.5 * dt, x + 0.5 * dt * k1))
    k3 = np.asarray(deriv(t + 0.5 * dt, x + 0.5 * dt * k2))
    k4 = np.asarray(deriv(t + dt, x + dt * k3))
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite state after integration step")
    return out


# ---------------------------------------------------------------------------
# Planar quadrotor benchmark
# ---------------------------------------------------------------------------
#
# State x = (p_x, p_z, theta, v_x, v_z, thetadot) with body-frame velocities
# (v_x, v_z); inputs u = (u_F, u_M) are mass-normalized thrust and moment.
#
#   pdot_x   = v_x cos(theta) - v_z sin(theta)
#   pdot_z   = v_x sin(theta) + v_z cos(theta)
#   thetadot = thetadot
#   vdot_x   = v_z thetadot - g sin(theta)
#   vdot_z   = -v_x thetadot - g cos(theta) + u_F
#   thetaddot= u_M
#
# Thrust opposes gravity along the body z-axis, so hover at theta = 0 is the
# equilibrium (u_F, u_M) = (g, 0).


def _quad_f(g: float):
    def f(x: np.ndarray) -> np.ndarray:
        _, _, th, vx, vz, om = x
        c, s = np.cos(th), np.sin(th)
        return np.array([
            vx * c - vz * s,
            vx * s + vz * c,
            om,
            vz * om - g * s,
            -vx * om - g * c,
            0.0,
        ])
    return f


def _quad_jac_f(g: float):
    def jac(x: np.ndarray) -> np.ndarray:
        _, _, th, vx, vz, om = x
        c, s = np.cos(th), np.sin(th)
        a = np.zeros((6, 6))
        a[0, 2] = -vx * s - vz * c
        a[0, 3] = c
        a[0, 4] = -s
        a[1, 2] = vx * c - vz * s
        a[1, 3] = s
        a[1, 4] = c
        a[2, 5] = 1.0
        a[3, 2] = -g * c
        a[3, 4] = om
        a[3, 5] = vz
        a[4, 2] = g * s
        a[4, 3] = -om
        a[4, 5] = -vx
        return a
    return jac


_QUAD_B = np.zeros((6, 2))
_QUAD_B[4, 0] = 1.0
_QUAD_B[5, 1] = 1.0


def quadrotor_uncertainty() -> UncertaintyField:
    """Benchmark uncertainty: thrust offset with velocity-squared drag plus an
    oscillatory moment disturbance.

        h(t, x) = ( -1 - 0.1 (v_x^2 + v_z^2),  0.3 cos t )

    Its true suprema over the constraint box are |h| = 1.53, |dh/dx| = 0.45,
    and |dh/dt| = 0.3, all inside the conservative (2.0, 0.5, 0.5) bounds.
    """
    def h(xi, x):
        t = float(np.atleast_1d(xi)[0])
        vx, vz = x[3], x[4]
        return np.array([-1.0 - 0.1 * (vx ** 2 + vz ** 2), 0.3 * np.cos(t)])

    def grad_x(xi, x):
        gx = np.zeros((2, 6))
        gx[0, 3] = -0.2 * x[3]
        gx[0, 4] = -0.2 * x[4]
        return gx

    def grad_xi(xi, x):
        t = float(np.atleast_1d(xi)[0])
        return np.array([[0.0], [-0.3 * np.sin(t)]])

    return UncertaintyField(l=1, m=2, h=h, grad_x=grad_x, grad_xi=grad_xi)


def planar_quadrotor(gravity: float = GRAVITY,
                     position_limit: float = 25.0,
                     position_box: Box | None = None,
                     ) -> tuple[ControlAffineSystem, UncertaintyField, Box, ModelBounds]:
    """Planar quadrotor plant, its uncertainty field, constraint box, and bounds.

    The benchmark constrains theta in [-pi/4, pi/4], thetadot in [-pi/3, pi/3],
    v_x in [-2, 2], and v_z in [-1, 1].  Positions are closed with the supplied
    workspace box (default +-position_limit) so the constraint set is compact.
    """
    sys = ControlAffineSystem(
        n=6, m=2,
        f=_quad_f(gravity),
        B=lambda x: _QUAD_B,
        jac_f=_quad_jac_f(gravity),
        jac_B_cols=lambda x: np.zeros((6, 6, 2)),
        name="planar_quadrotor",
    )
    unc = quadrotor_uncertainty()
    if position_box is None:
        p_lo = [-position_limit, -position_limit]
        p_hi = [position_limit, position_limit]
    else:
        p_lo = list(position_box.lower)
        p_hi = list(position_box.upper)
    box = Box(
        lower=np.array(p_lo + [-np.pi / 4, -2.0, -1.0, -np.pi / 3]),
        upper=np.array(p_hi + [np.pi / 4, 2.0, 1.0, np.pi / 3]),
    )
    # Nominal-term bounds evaluated analytically over the box; f and its
    # Jacobian do not depend on position, so the box closure does not move
    # them.  B is constant with orthonormal columns.
    vx, vz, om, th = 2.0, 1.0, np.pi / 3, np.pi / 4
    planar_speed = np.hypot(vx, vz)
    f4 = vz * om + gravity * np.sin(th)
    f5 = vx * om + gravity
    delta_f = float(np.sqrt(planar_speed ** 2 + om ** 2 + f4 ** 2 + f5 ** 2))
    delta_fx = _quad_jac_norm_bound(gravity)
    bounds = ModelBounds(
        delta_f=delta_f,
        delta_fx=delta_fx,
        delta_B=1.0,
        delta_Bx=0.0,
        delta_bx=0.0,
        delta_h=2.0,
        delta_hx=0.5,
        delta_hxi=0.5,
        delta_B_pinv=1.0,
        delta_B_pinv_x=0.0,
        delta_ud=3.0 * gravity,
        hess_xi=np.array([0.5, 0.5]),
        hess_x=np.array([0.5, 0.5]),
    )
    return sys, unc, box, bounds


def _quad_jac_norm_bound(g: float) -> float:
    """Max spectral norm of the quadrotor df/dx over the constraint box.

    Evaluated on a dense grid of the four coordinates the Jacobian depends on;
    position columns are identically zero.
    """
    ths = np.linspace(-np.pi / 4, np.pi / 4, 9)
    vxs = np.linspace(-2, 2, 5)
    vzs = np.linspace(-1, 1, 5)
    oms = np.linspace(-np.pi / 3, np.pi / 3, 5)
    jac = _quad_jac_f(g)
    worst = 0.0
    for th in ths:
        for vx in vxs:
            for vz in vzs:
                for om in oms:
                    x = np.array([0, 0, th, vx, vz, om])
                    worst = max(worst, float(np.linalg.norm(jac(x), 2)))
    return worst


def simulate_open_loop(sys: ControlAffineSystem, unc: UncertaintyField | None,
                       x0: np.ndarray, u_of_t: Callable[[float], np.ndarray],
                       t_final: float, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-step rollout of the actual (or nominal, if unc is None) dynamics."""
    steps = int(round(t_final / dt))
    ts = np.arange(steps + 1) * dt
    xs = np.empty((steps + 1, sys.n))
    xs[0] = x0
    for k in range(steps):
        u = u_of_t(ts[k])
        if unc is None:
            deriv = lambda t, x: eval_nominal(sys, x, u)
        else:
            deriv = lambda t, x: eval_actual(sys, unc, np.array([t]), x, u)
        xs[k + 1] = rk4_step(deriv, ts[k], xs[k], dt)
    return ts, xs
