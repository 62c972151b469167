"""Gappy POD with Gaussian process regression in mode space.

The snapshot matrix is centred and decomposed, the leading modes form the
basis, and sparse measurements are regressed onto the mode rows of the
sensor grid points with an RBF + dot-product kernel GP. Prediction at every
grid row gives the full-field posterior mean and variance.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.optimize import minimize
from scipy.spatial.distance import cdist

from .data import DenseDataset, SparseDataset, SurfaceGrid

LOG10_BOUNDS = (-6.0, 3.0)
JITTER_START = 1e-10
JITTER_MAX = 1e-4
NEGATIVE_VARIANCE_TOL = -1e-8


class IllConditionedError(np.linalg.LinAlgError):
    pass


class ConditioningWarning(RuntimeWarning):
    pass


class DuplicateSensorWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class PodBasis:
    mean: np.ndarray  # (N,)
    modes: np.ndarray  # (N, r)
    singular_values: np.ndarray  # (min(N, n),), non-increasing

    @property
    def rank(self) -> int:
        return self.modes.shape[1]

    @property
    def n_points(self) -> int:
        return len(self.mean)

    def energy(self) -> float:
        """Fraction of the snapshot variance captured by the kept modes."""
        s2 = self.singular_values**2
        total = s2.sum()
        return 1.0 if total == 0 else float(s2[: self.rank].sum() / total)

    def project(self, fields) -> np.ndarray:
        f = np.asarray(fields, dtype=np.float64)
        return self.modes.T @ (f - (self.mean if f.ndim == 1 else self.mean[:, None]))

    def reconstruct(self, coeffs) -> np.ndarray:
        c = np.asarray(coeffs, dtype=np.float64)
        out = self.modes @ c
        return out + (self.mean if out.ndim == 1 else self.mean[:, None])


def choose_rank(singular_values, energy: float) -> int:
    """Smallest r whose leading squared singular values reach ``energy`` of the total."""
    if not 0 < energy <= 1:
        raise ValueError("energy fraction must lie in (0, 1]")
    s2 = np.asarray(singular_values, dtype=np.float64) ** 2
    total = s2.sum()
    if total == 0:
        return 0
    cum = np.cumsum(s2)
    return int(min(np.searchsorted(cum, energy * total) + 1, len(s2)))


def build_pod(snapshots, rank: int | None = None, energy: float = 0.999) -> PodBasis:
    """POD of a snapshot matrix (N, n) or a :class:`DenseDataset`.

    An explicit ``rank`` wins over the ``energy`` rule. Mode signs are fixed
    so that each mode's largest-magnitude entry is positive.
    """
    Y = snapshots.values if isinstance(snapshots, DenseDataset) else np.asarray(snapshots, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[1] < 2:
        raise ValueError("need a 2-D snapshot matrix with at least 2 snapshots")
    mean = Y.mean(axis=1)
    U, s, _ = np.linalg.svd(Y - mean[:, None], full_matrices=False)
    if rank is None:
        r = choose_rank(s, energy)
    else:
        if not 0 <= rank <= min(Y.shape):
            raise ValueError(f"rank {rank} exceeds min(N, n) = {min(Y.shape)}")
        r = rank
    if s.max(initial=0.0) == 0.0:
        r = 0
    Ur = U[:, :r].copy()
    flip = np.sign(Ur[np.argmax(np.abs(Ur), axis=0), np.arange(r)])
    Ur *= np.where(flip == 0, 1.0, flip)
    for a in (mean, Ur, s):
        a.setflags(write=False)
    return PodBasis(mean, Ur, s)


# --------------------------------------------------------------------------
# observation map


@dataclass(frozen=True, eq=False)
class ObservationMap:
    grid_indices: np.ndarray
    distances: np.ndarray

    @property
    def n_sensors(self) -> int:
        return len(self.grid_indices)

    def matrix(self, n_points: int) -> np.ndarray:
        """Dense (m, N) selection matrix; each row is a unit basis vector."""
        L = np.zeros((self.n_sensors, n_points))
        L[np.arange(self.n_sensors), self.grid_indices] = 1.0
        return L


def _coords(pts, with_normals: bool) -> np.ndarray:
    if isinstance(pts, SurfaceGrid):
        return np.hstack([pts.positions, pts.normals]) if with_normals else pts.positions
    return np.atleast_2d(np.asarray(pts, dtype=np.float64))


def nearest_neighbor_map(grid, sensors, match_normals: bool = True, chunk: int = 256) -> ObservationMap:
    """Map every sensor to its closest grid point; ties go to the lowest index.

    Inputs are SurfaceGrids or coordinate arrays. For two SurfaceGrids with
    ``match_normals`` the distance is taken over (position, normal), which
    keeps sensors on the correct side of thin or flat surfaces where upper
    and lower points coincide in space.
    """
    both = isinstance(grid, SurfaceGrid) and isinstance(sensors, SurfaceGrid)
    G = _coords(grid, match_normals and both)
    S = _coords(sensors, match_normals and both)
    if len(G) == 0 or len(S) == 0:
        raise ValueError("grid and sensors must be non-empty")
    if G.shape[1] != S.shape[1]:
        raise ValueError("grid and sensor coordinates differ in dimension")
    idx = np.empty(len(S), dtype=np.int64)
    dist = np.empty(len(S))
    for start in range(0, len(S), chunk):
        block = S[start : start + chunk]
        # explicit differences keep equal distances bit-identical
        d2 = ((block[:, None, :] - G[None, :, :]) ** 2).sum(axis=2)
        j = np.argmin(d2, axis=1)
        idx[start : start + chunk] = j
        dist[start : start + chunk] = np.sqrt(d2[np.arange(len(block)), j])
    if len(np.unique(idx)) < len(idx):
        warnings.warn(
            f"{len(idx) - len(np.unique(idx))} sensors share a grid point; all rows are kept",
            DuplicateSensorWarning,
            stacklevel=2,
        )
    idx.setflags(write=False)
    dist.setflags(write=False)
    return ObservationMap(idx, dist)


# --------------------------------------------------------------------------
# kernel and GP


def kernel(x, x_prime, theta) -> float:
    """theta0 * exp(-theta1 |x - x'|^2) + theta2 * x.x'"""
    x = np.asarray(x, dtype=np.float64)
    xp = np.asarray(x_prime, dtype=np.float64)
    t0, t1, t2 = theta
    return float(t0 * math.exp(-t1 * float(np.sum((x - xp) ** 2))) + t2 * float(np.sum(x * xp)))


def kernel_matrix(A, B, theta) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    t0, t1, t2 = theta
    return t0 * np.exp(-t1 * cdist(A, B, "sqeuclidean")) + t2 * (A @ B.T)


def _kernel_parts(X):
    d2 = cdist(X, X, "sqeuclidean")
    return d2, X @ X.T


def _lml_from_parts(theta, d2, dot, y, noise: float, gradient: bool):
    t0, t1, t2 = theta
    rbf = np.exp(-t1 * d2)
    K = t0 * rbf + t2 * dot
    K[np.diag_indices_from(K)] += noise
    c, low = cho_factor(K, lower=True, check_finite=False)
    alpha = cho_solve((c, low), y, check_finite=False)
    m = len(y)
    lml = -0.5 * float(y @ alpha) - float(np.log(np.diag(c)).sum()) - 0.5 * m * math.log(2 * math.pi)
    if not gradient:
        return lml
    inner = np.outer(alpha, alpha) - cho_solve((c, low), np.eye(m), check_finite=False)
    dK = (rbf, -t0 * d2 * rbf, dot)
    return lml, np.array([0.5 * float(np.sum(inner * g)) for g in dK])


def log_marginal_likelihood(theta, X, y, noise: float, gradient: bool = False):
    """GP evidence log p(y | X, theta); with ``gradient`` also d/dtheta.

    Raises :class:`numpy.linalg.LinAlgError` if K + noise*I is not positive
    definite.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    d2, dot = _kernel_parts(X)
    return _lml_from_parts(theta, d2, dot, y, noise, gradient)


@dataclass(frozen=True, eq=False)
class GprModel:
    theta: np.ndarray
    noise: float
    x_train: np.ndarray  # (m, r) POD rows at the observed grid points
    y_train: np.ndarray  # (m,) mean-subtracted measurements
    chol: np.ndarray  # lower Cholesky factor of K + (noise + jitter) I
    alpha: np.ndarray  # (K + noise I)^-1 y
    jitter: float
    log_marginal_likelihood: float
    start_lml: tuple = field(default=())

    def posterior(self, x_star):
        """Posterior mean and unclamped variance at rows of ``x_star``."""
        ks = kernel_matrix(x_star, self.x_train, self.theta)
        mean = ks @ self.alpha
        v = solve_triangular(self.chol, ks.T, lower=True, check_finite=False)
        t0, _, t2 = self.theta
        prior = t0 + t2 * np.einsum("ij,ij->i", np.atleast_2d(x_star), np.atleast_2d(x_star))
        return mean, prior - np.einsum("ij,ij->j", v, v)


def _factorize(K: np.ndarray):
    jitter = 0.0
    while True:
        try:
            Kj = K + jitter * np.eye(len(K)) if jitter else K
            return np.linalg.cholesky(Kj), jitter
        except np.linalg.LinAlgError:
            jitter = JITTER_START if jitter == 0.0 else jitter * 10.0
            if jitter > JITTER_MAX * (1 + 1e-9):
                raise IllConditionedError("ill-conditioned kernel matrix") from None


def _start_points(n_starts: int, seed: int) -> np.ndarray:
    # first start at the box centre, the rest stratified per dimension
    lo, hi = LOG10_BOUNDS
    rng = np.random.default_rng(seed)
    pts = [np.full(3, 0.5 * (lo + hi))]
    k = n_starts - 1
    if k > 0:
        u = (np.stack([rng.permutation(k) for _ in range(3)], axis=1) + rng.uniform(size=(k, 3))) / k
        pts.extend(lo + (hi - lo) * u)
    return np.array(pts)


def optimize_theta(X, y, noise: float, n_starts: int = 8, seed: int = 0, linear: bool = True):
    """Multi-start Nelder-Mead on log10(theta) maximising the evidence.

    With ``linear=False`` the dot-product weight is held at zero and only
    the RBF pair is searched. Returns ``(theta, lml, start_lmls)``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    d2, dot = _kernel_parts(X)
    dim = 3 if linear else 2

    def full(log_theta):
        t = 10.0**log_theta
        return t if linear else np.append(t, 0.0)

    def neg(log_theta):
        try:
            return -_lml_from_parts(full(log_theta), d2, dot, y, noise, False)
        except np.linalg.LinAlgError:
            return 1e300

    best_x, best_f, start_vals = None, math.inf, []
    bounds = [LOG10_BOUNDS] * dim
    for x0 in _start_points(n_starts, seed)[:, :dim]:
        f0 = neg(x0)
        start_vals.append(-f0)
        res = minimize(neg, x0, method="Nelder-Mead", bounds=bounds,
                       options={"xatol": 1e-3, "fatol": 1e-6, "maxiter": 300})
        x, f = (res.x, res.fun) if res.fun <= f0 else (x0, f0)
        if f < best_f:
            best_x, best_f = x, f
    return full(best_x), -best_f, tuple(start_vals)


def fit_gp(X, y, noise: float = 1e-6, theta=None, n_starts: int = 8, seed: int = 0, linear: bool = True) -> GprModel:
    """Zero-mean GP on inputs ``X`` (m, d) and targets ``y`` (m,).

    Hyperparameters are optimised unless ``theta`` is given.
    """
    X = np.array(np.atleast_2d(X), dtype=np.float64)
    y = np.array(y, dtype=np.float64).reshape(-1)
    if len(y) < 1 or len(y) != len(X):
        raise ValueError("need one target per input row")
    if not noise > 0:
        raise ValueError("noise variance must be positive")
    if theta is None:
        theta, _, starts = optimize_theta(X, y, noise, n_starts, seed, linear)
    else:
        theta, starts = np.asarray(theta, dtype=np.float64), ()
    K = kernel_matrix(X, X, theta)
    K[np.diag_indices_from(K)] += noise
    L, jitter = _factorize(K)
    alpha = cho_solve((L, True), y)
    lml = -0.5 * float(y @ alpha) - float(np.log(np.diag(L)).sum()) - 0.5 * len(y) * math.log(2 * math.pi)
    for a in (X, y, L, alpha):
        a.setflags(write=False)
    return GprModel(np.asarray(theta, dtype=np.float64), float(noise), X, y, L, alpha, jitter, lml, starts)


def fit_gpr(
    basis: PodBasis,
    obs: ObservationMap,
    y,
    noise: float = 1e-6,
    theta=None,
    n_starts: int = 8,
    seed: int = 0,
) -> GprModel:
    """Regress sensor values on the POD rows of their grid points.

    The POD mean at the observed indices is removed from ``y`` first. With
    ``theta`` given the hyperparameters are not optimised.
    """
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if len(y) < 1 or len(y) != obs.n_sensors:
        raise ValueError("need one measurement per mapped sensor")
    X = basis.modes[obs.grid_indices]
    return fit_gp(X, y - basis.mean[obs.grid_indices], noise, theta, n_starts, seed)


def predict_full_field(model: GprModel, basis: PodBasis):
    """Posterior mean (with the POD mean added back) and variance on every grid point."""
    mean, var = model.posterior(basis.modes)
    if var.size and var.min() < NEGATIVE_VARIANCE_TOL:
        warnings.warn(
            f"posterior variance down to {var.min():.3e}; kernel matrix is poorly conditioned",
            ConditioningWarning,
            stacklevel=2,
        )
    return mean + basis.mean, np.maximum(var, 0.0)


# --------------------------------------------------------------------------
# end-to-end


@dataclass(frozen=True, eq=False)
class GappyResult:
    mean: np.ndarray
    variance: np.ndarray
    basis: PodBasis
    observation: ObservationMap
    gpr: GprModel

    def diagnostics(self) -> dict:
        return {
            "singular_values": self.basis.singular_values.tolist(),
            "rank": self.basis.rank,
            "energy": self.basis.energy(),
            "theta": self.gpr.theta.tolist(),
            "noise": self.gpr.noise,
            "jitter": self.gpr.jitter,
            "log_marginal_likelihood": self.gpr.log_marginal_likelihood,
            "sensor_grid_indices": self.observation.grid_indices.tolist(),
            "sensor_distances": self.observation.distances.tolist(),
        }


def gappy_fuse(
    dense: DenseDataset,
    sparse: SparseDataset,
    condition=None,
    rank: int | None = None,
    energy: float = 0.999,
    noise: float = 1e-6,
    basis: PodBasis | None = None,
    seed: int = 0,
) -> GappyResult:
    """Full-field reconstruction for one measured condition.

    ``condition`` selects the sparse column (a FlowCondition, a (mach, alpha)
    pair or a column index); it may be omitted when there is only one.
    A precomputed ``basis`` skips the decomposition.
    """
    if condition is None:
        if sparse.n_conditions != 1:
            raise ValueError("sparse dataset holds several conditions; pick one")
        col = 0
    elif isinstance(condition, (int, np.integer)):
        col = int(condition)
    else:
        col = sparse.index_of(condition)
    if len(sparse.grid) < 1:
        raise ValueError("no sensors")
    if basis is None:
        basis = build_pod(dense, rank=rank, energy=energy)
    obs = nearest_neighbor_map(dense.grid, sparse.grid)
    gpr = fit_gpr(basis, obs, sparse.values[:, col], noise=noise, seed=seed)
    mean, var = predict_full_field(gpr, basis)
    return GappyResult(mean, var, basis, obs, gpr)
