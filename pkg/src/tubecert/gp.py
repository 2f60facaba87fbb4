"""Per-channel Gaussian process regression of a matched uncertainty.

Each output channel i of the uncertainty is modeled as an independent
zero-mean GP over z = (xi, x) with an anisotropic squared-exponential kernel

    K(z, z') = s^2 exp( -1/2 sum_k (z_k - z'_k)^2 / ell_k^2 ).

Conditioning on noisy channel measurements y = h_i(z) + kappa, kappa ~
N(0, sigma^2), gives the posterior mean/variance in closed form; the
posterior of every partial derivative follows by differentiating the kernel
(linearity of the differential operator).  The module also provides the
kernel regularity constants (Lipschitz-type suprema of kernel derivatives
over a box) consumed by the uniform error bounds, the measurement model
that extracts uncertainty samples from observed state derivatives, and
Latin hypercube sampling for space-filling data collection.

Hyperparameters are fixed by configuration; ``log_marginal_likelihood`` is
provided as a model-selection utility but never feeds any certificate.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky

from .dynamics import Box, ControlAffineSystem, UncertaintyField

_JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


class GramFactorizationError(np.linalg.LinAlgError):
    """Gram matrix stayed non-positive-definite after jitter escalation."""


@dataclass(frozen=True)
class SquaredExponentialKernel:
    """Anisotropic SE kernel with per-dimension lengthscales."""

    signal_variance: float
    lengthscales: np.ndarray

    def __post_init__(self):
        ell = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        object.__setattr__(self, "lengthscales", ell)
        if self.signal_variance <= 0 or np.any(ell <= 0):
            raise ValueError("signal variance and lengthscales must be positive")

    @property
    def dim(self) -> int:
        return self.lengthscales.size

    def __call__(self, za: np.ndarray, zb: np.ndarray) -> np.ndarray:
        """Gram matrix for row-stacked inputs za (A, d), zb (B, d)."""
        za = np.atleast_2d(za) / self.lengthscales
        zb = np.atleast_2d(zb) / self.lengthscales
        sq = (np.sum(za ** 2, axis=1)[:, None] + np.sum(zb ** 2, axis=1)[None, :]
              - 2.0 * za @ zb.T)
        return self.signal_variance * np.exp(-0.5 * np.maximum(sq, 0.0))

    def grad_first(self, zs: np.ndarray, zb: np.ndarray) -> np.ndarray:
        """dK/dz*_k (z*, z_j) for each query z*: shape (A, B, d).

        Gradient with respect to the first argument.
        """
        zs = np.atleast_2d(zs)
        zb = np.atleast_2d(zb)
        k = self(zs, zb)
        diff = zs[:, None, :] - zb[None, :, :]
        return -k[:, :, None] * diff / self.lengthscales ** 2

    def mixed_hessian_diag(self) -> np.ndarray:
        """d^2 K / dz_k dz'_k at coincident arguments: s^2 / ell_k^2."""
        return self.signal_variance / self.lengthscales ** 2

    def mixed_hessian_at_coincident(self) -> np.ndarray:
        """d^2 K / dz dz' at z = z' (full matrix, diagonal for SE)."""
        return np.diag(self.mixed_hessian_diag())


@dataclass(frozen=True)
class KernelRegularity:
    """Suprema of kernel derivatives over a product domain Z = X_xi x X.

    ``lip_k``       sup |grad_z K(z, z')|                 (vector Lipschitz)
    ``lip_grad_xi`` sup |d/dz grad_xi K(z, z')|           (spectral norm)
    ``lip_grad_x``  sup |d/dz grad_x K(z, z')|
    ``coord_max_xi[k]`` sup |dK/dxi_k|,  ``coord_max_x[k]`` sup |dK/dx_k|.

    All suprema are over the displacement set induced by the box, so large
    lengthscales on weakly-relevant coordinates tighten the constants.
    """

    lip_k: float
    lip_grad_xi: float
    lip_grad_x: float
    coord_max_xi: np.ndarray
    coord_max_x: np.ndarray


def _greedy_gradient_max(sv: float, ell: np.ndarray, caps: np.ndarray) -> float:
    """Exact max of |grad_z K| over displacements |w_k| <= caps (scaled units).

    Maximizes sqrt(sum a_k^2 w_k^2) exp(-|w|^2/2) with a_k = 1/ell_k by
    greedily loading squared mass onto the largest a_k until the marginal
    value vanishes (at S = a_k^2) or the cap binds.
    """
    a2 = 1.0 / ell ** 2
    order = np.argsort(-a2)
    s_acc = 0.0
    t_acc = 0.0
    for k in order:
        if a2[k] <= s_acc:
            break
        t_k = min(caps[k] ** 2, (a2[k] - s_acc) / a2[k])
        s_acc += a2[k] * t_k
        t_acc += t_k
    return sv * np.sqrt(s_acc) * np.exp(-0.5 * t_acc)


def _second_derivative_sup(kernel: SquaredExponentialKernel, rows: np.ndarray,
                           caps: np.ndarray, n_scan: int = 4096) -> float:
    """sup over displacements of |d/dz grad_{rows} K| (spectral norm).

    The SE second derivative w.r.t. the first argument is
        H(w) = s^2 exp(-|w|^2/2) D^-1 (w w^T - I) D^-1,   w = D^-1 (z - z'),
    restricted to the given block rows.  The supremum over the displacement
    box is found by a deterministic quasi-random scan plus coordinate polish;
    the scan dominates a plain grid search by construction.
    """
    sv = kernel.signal_variance
    ell = kernel.lengthscales
    d = ell.size
    if rows.size == 0:
        return 0.0

    def value(w: np.ndarray) -> float:
        outer = np.outer(w, w) - np.eye(d)
        h = (outer / ell[None, :]) / ell[:, None]
        return sv * np.exp(-0.5 * w @ w) * np.linalg.norm(h[rows], 2)

    # Halton scan (deterministic), plus axis candidates.
    from scipy.stats.qmc import Halton
    eng = Halton(d=d, scramble=False)
    pts = eng.random(n_scan) * caps[None, :]
    best_w = np.zeros(d)
    best = value(best_w)
    for w in pts:
        v = value(w)
        if v > best:
            best, best_w = v, w.copy()
    for k in range(d):
        w = np.zeros(d)
        w[k] = min(caps[k], np.sqrt(3.0))
        v = value(w)
        if v > best:
            best, best_w = v, w.copy()
    # Coordinate-wise polish around the incumbent.
    w = best_w.copy()
    for _ in range(3):
        for k in range(d):
            grid = np.linspace(max(0.0, w[k] - 0.3), min(caps[k], w[k] + 0.3), 17)
            vals = []
            for g in grid:
                wk = w.copy()
                wk[k] = g
                vals.append(value(wk))
            w[k] = grid[int(np.argmax(vals))]
        best = max(best, value(w))
    return float(best)


def kernel_regularity(kernel: SquaredExponentialKernel, domain: Box,
                      l: int) -> KernelRegularity:
    """Kernel derivative suprema over domain x domain, split at xi-dim l."""
    ell = kernel.lengthscales
    sv = kernel.signal_variance
    if domain.dim != ell.size:
        raise ValueError("domain dimension does not match kernel")
    caps = domain.edges / ell  # max |w_k| over the displacement set

    lip_k = _greedy_gradient_max(sv, ell, caps)

    # Per-coordinate first-derivative maxima: (w_k/ell_k) exp(-w_k^2/2) with
    # the other coordinates at zero displacement.
    wk = np.minimum(caps, 1.0)
    coord_max = sv * (wk / ell) * np.exp(-0.5 * wk ** 2)

    xi_rows = np.arange(l)
    x_rows = np.arange(l, ell.size)
    lip_gxi = _second_derivative_sup(kernel, xi_rows, caps)
    lip_gx = _second_derivative_sup(kernel, x_rows, caps)
    return KernelRegularity(
        lip_k=float(lip_k),
        lip_grad_xi=lip_gxi,
        lip_grad_x=lip_gx,
        coord_max_xi=coord_max[:l],
        coord_max_x=coord_max[l:],
    )


# ---------------------------------------------------------------------------
# Datasets and measurements
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    """Training data: inputs Z (d, N), targets Y (m, N), noise level sigma."""

    Z: np.ndarray
    Y: np.ndarray
    noise_std: float

    def __post_init__(self):
        self.Z = np.asarray(self.Z, dtype=float)
        self.Y = np.asarray(self.Y, dtype=float)
        if self.noise_std <= 0:
            raise ValueError("noise_std must be positive")
        if self.Z.ndim != 2 or self.Y.ndim != 2 or self.Z.shape[1] != self.Y.shape[1]:
            raise ValueError("Z and Y must be matrices with matching column counts")

    @property
    def n_points(self) -> int:
        return self.Z.shape[1]

    @property
    def n_channels(self) -> int:
        return self.Y.shape[0]

    def appended(self, other: "Dataset") -> "Dataset":
        if other.n_points == 0:
            return self
        if self.n_points == 0:
            return other
        return Dataset(np.hstack([self.Z, other.Z]), np.hstack([self.Y, other.Y]),
                       self.noise_std)

    def to_csv(self, path: str | Path) -> None:
        d, m = self.Z.shape[0], self.Y.shape[0]
        header = [f"z_{k + 1}" for k in range(d)] + [f"y_{i + 1}" for i in range(m)]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for j in range(self.n_points):
                writer.writerow([repr(float(v)) for v in self.Z[:, j]]
                                + [repr(float(v)) for v in self.Y[:, j]])

    @staticmethod
    def from_csv(path: str | Path, noise_std: float) -> "Dataset":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            d = sum(1 for c in header if c.startswith("z_"))
            m = sum(1 for c in header if c.startswith("y_"))
            rows = [list(map(float, row)) for row in reader if row]
        if not rows:
            return Dataset(np.zeros((d, 0)), np.zeros((m, 0)), noise_std)
        arr = np.asarray(rows)
        return Dataset(arr[:, :d].T, arr[:, d:d + m].T, noise_std)

    @staticmethod
    def empty(d: int, m: int, noise_std: float) -> "Dataset":
        return Dataset(np.zeros((d, 0)), np.zeros((m, 0)), noise_std)


def generate_measurements(sys: ControlAffineSystem, unc: UncertaintyField,
                          states: np.ndarray, controls: np.ndarray,
                          xis: np.ndarray, noise_std: float,
                          rng_seed: int) -> Dataset:
    """Uncertainty measurements y_k = B^+(x_k)(xdot_k - f(x_k)) - u_k + noise.

    The state derivative xdot_k comes from the true dynamics, so with zero
    noise y_k equals h(xi_k, x_k) exactly.
    """
    states = np.atleast_2d(states)
    controls = np.atleast_2d(controls)
    xis = np.atleast_2d(xis)
    n_pts = states.shape[0]
    if controls.shape[0] != n_pts or xis.shape[0] != n_pts:
        raise ValueError("states, controls, and xis must have matching lengths")
    rng = np.random.default_rng(rng_seed)
    ys = np.empty((unc.m, n_pts))
    zs = np.empty((unc.l + sys.n, n_pts))
    for k in range(n_pts):
        x, u, xi = states[k], controls[k], xis[k]
        xdot = sys.f(x) + sys.B(x) @ (u + unc.h(xi, x))
        ys[:, k] = sys.pinv_B(x) @ (xdot - sys.f(x)) - u
        zs[:, k] = np.concatenate([xi, x])
    ys += noise_std * rng.standard_normal(ys.shape)
    return Dataset(zs, ys, max(noise_std, 1e-12))


def latin_hypercube(domain: Box, n: int, rng_seed: int) -> np.ndarray:
    """Latin hypercube sample: one point per axis stratum per dimension, (d, n)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(rng_seed)
    d = domain.dim
    pts = np.empty((d, n))
    for k in range(d):
        perm = rng.permutation(n)
        u = rng.random(n)
        pts[k] = (perm + u) / n
    return domain.lower[:, None] + pts * domain.edges[:, None]


# ---------------------------------------------------------------------------
# Posterior machinery
# ---------------------------------------------------------------------------

@dataclass
class _ChannelFactorization:
    kernel: SquaredExponentialKernel
    chol: tuple | None          # cho_factor of K + sigma^2 I (None when N = 0)
    alpha: np.ndarray           # (N,) weight vector
    alpha_norm: float
    inv_norm: float             # spectral norm of (K + sigma^2 I)^{-1}
    jitter: float


@dataclass
class GPModel:
    """Fitted per-channel GP posteriors sharing one input set."""

    kernels: list
    data: Dataset
    channels: list = field(default_factory=list)

    @property
    def n_points(self) -> int:
        return self.data.n_points

    @property
    def n_channels(self) -> int:
        return len(self.kernels)

    @property
    def dim(self) -> int:
        return self.kernels[0].dim

    # -- evaluation -------------------------------------------------------

    def mean_std(self, zstar: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and standard deviation per channel.

        ``zstar`` may be a single point (d,) or a batch (M, d); outputs have
        shapes (m,) / (m,) or (m, M) / (m, M) accordingly.
        """
        single = np.ndim(zstar) == 1
        zq = np.atleast_2d(zstar)
        means = np.empty((self.n_channels, zq.shape[0]))
        stds = np.empty_like(means)
        for i, ch in enumerate(self.channels):
            kvec = ch.kernel(zq, self.data.Z.T) if self.n_points else None
            prior_var = ch.kernel.signal_variance
            if self.n_points == 0:
                means[i] = 0.0
                stds[i] = np.sqrt(prior_var)
                continue
            means[i] = kvec @ ch.alpha
            sol = cho_solve(ch.chol, kvec.T)
            var = prior_var - np.sum(kvec * sol.T, axis=1)
            stds[i] = np.sqrt(_clamp_variance(var))
        if single:
            return means[:, 0], stds[:, 0]
        return means, stds

    def mean_fn(self):
        """Closure (xi, x) -> posterior mean vector, for learned dynamics."""
        def fn(xi, x):
            z = np.concatenate([np.atleast_1d(xi), x])
            mu, _ = self.mean_std(z)
            return mu
        return fn

    def derivative_posterior(self, zstar: np.ndarray, l: int):
        """Posterior of all partial derivatives at one point.

        Returns a DerivativePosterior with per-channel gradient means,
        covariance blocks for the xi- and x-derivatives, and the marginal
        standard-deviation vectors (square roots of covariance diagonals).
        """
        zq = np.asarray(zstar, dtype=float)
        d = self.dim
        n = d - l
        m = self.n_channels
        grad_mean = np.zeros((m, d))
        cov_xi = np.zeros((m, l, l))
        cov_x = np.zeros((m, n, n))
        for i, ch in enumerate(self.channels):
            hess = ch.kernel.mixed_hessian_at_coincident()
            if self.n_points:
                g = ch.kernel.grad_first(zq[None, :], self.data.Z.T)[0]  # (N, d)
                grad_mean[i] = g.T @ ch.alpha
                sol = cho_solve(ch.chol, g)
                cov = hess - g.T @ sol
            else:
                cov = hess
            cov_xi[i] = cov[:l, :l]
            cov_x[i] = cov[l:, l:]
        std_xi = np.sqrt(_clamp_variance(np.diagonal(cov_xi, axis1=1, axis2=2)))
        std_x = np.sqrt(_clamp_variance(np.diagonal(cov_x, axis1=1, axis2=2)))
        return DerivativePosterior(
            grad_xi_mean=grad_mean[:, :l], grad_x_mean=grad_mean[:, l:],
            cov_xi=cov_xi, cov_x=cov_x, std_xi=std_xi, std_x=std_x)

    def derivative_std_batch(self, zq: np.ndarray, l: int) -> tuple[np.ndarray, np.ndarray]:
        """Marginal derivative standard deviations on a batch (M, d).

        Returns (std_xi (m, M, l), std_x (m, M, n)); used by the bound
        suprema, which only need covariance diagonals.
        """
        zq = np.atleast_2d(zq)
        mm, d = self.n_channels, self.dim
        var = np.empty((mm, zq.shape[0], d))
        for i, ch in enumerate(self.channels):
            prior = ch.kernel.mixed_hessian_diag()
            if self.n_points == 0:
                var[i] = prior[None, :]
                continue
            g = ch.kernel.grad_first(zq, self.data.Z.T)  # (M, N, d)
            for k in range(d):
                gk = g[:, :, k]
                sol = cho_solve(ch.chol, gk.T)
                var[i, :, k] = prior[k] - np.sum(gk * sol.T, axis=1)
        std = np.sqrt(_clamp_variance(var))
        return std[:, :, :l], std[:, :, l:]


@dataclass
class DerivativePosterior:
    grad_xi_mean: np.ndarray  # (m, l)
    grad_x_mean: np.ndarray   # (m, n)
    cov_xi: np.ndarray        # (m, l, l)
    cov_x: np.ndarray         # (m, n, n)
    std_xi: np.ndarray        # (m, l)
    std_x: np.ndarray         # (m, n)


def _clamp_variance(var: np.ndarray) -> np.ndarray:
    """Clamp round-off negatives in [-1e-10, 0) to zero; below that is an error."""
    var = np.asarray(var, dtype=float)
    if np.any(var < -1e-10):
        raise FloatingPointError(
            f"posterior variance fell below round-off tolerance: min={var.min():.3e}")
    return np.maximum(var, 0.0)


def fit(kernels: Sequence[SquaredExponentialKernel], data: Dataset) -> GPModel:
    """Factorize the per-channel Gram matrices once and cache the weights.

    An empty dataset yields the prior model (zero mean, full prior variance).
    Cholesky failures escalate diagonal jitter up to 1e-6 before raising.
    """
    model = GPModel(kernels=list(kernels), data=data)
    n = data.n_points
    for i, kern in enumerate(kernels):
        if n == 0:
            model.channels.append(_ChannelFactorization(
                kern, None, np.zeros(0), 0.0, 0.0, 0.0))
            continue
        gram = kern(data.Z.T, data.Z.T)
        ridge = data.noise_std ** 2
        chol = None
        used = 0.0
        for jit in _JITTERS:
            try:
                chol = cho_factor(gram + (ridge + jit) * np.eye(n), lower=True)
                used = jit
                break
            except np.linalg.LinAlgError:
                continue
        if chol is None:
            raise GramFactorizationError(
                f"channel {i}: Gram matrix not positive definite after jitter escalation")
        alpha = cho_solve(chol, data.Y[i])
        inv_norm = _inverse_spectral_norm(chol, n)
        model.channels.append(_ChannelFactorization(
            kern, chol, alpha, float(np.linalg.norm(alpha)), inv_norm, used))
    return model


def _inverse_spectral_norm(chol, n: int, iters: int = 50, tol: float = 1e-8) -> float:
    """Spectral norm of (K + sigma^2 I)^{-1} by inverse power iteration."""
    rng = np.random.default_rng(0)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = cho_solve(chol, v)
        nw = np.linalg.norm(w)
        v_new = w / nw
        if abs(nw - lam) <= tol * max(1.0, abs(nw)):
            lam = nw
            break
        lam = nw
        v = v_new
    return float(lam)


def log_marginal_likelihood(kernel: SquaredExponentialKernel,
                            z: np.ndarray, y: np.ndarray, noise_std: float) -> float:
    """Channel log marginal likelihood; utility for hyperparameter screening."""
    n = y.size
    gram = kernel(z.T, z.T) + noise_std ** 2 * np.eye(n)
    chol = cholesky(gram, lower=True)
    alpha = cho_solve((chol, True), y)
    return float(-0.5 * y @ alpha - np.sum(np.log(np.diag(chol)))
                 - 0.5 * n * np.log(2 * np.pi))
