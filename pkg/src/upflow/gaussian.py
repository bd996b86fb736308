"""Closed-form propagation of unnormalised Gaussian measures.

An Ornstein-Uhlenbeck process with linear drift ``A x + e``, diffusivity
``D`` and quadratic net growth ``b + c.x + x.G x / 2`` (``G`` the quadratic
coefficient, symmetric negative semi-definite) preserves Gaussianity of an
unnormalised Gaussian initial condition ``m0 N(mu0, S0)``.  The moments obey

    dS/dt  = A S + S A' + 2 D + S G S
    dmu/dt = (A + S G) mu + S c + e
    dlog m/dt = mu.G mu / 2 + c.mu + b + tr(G S) / 2

These exact flows, the matrix Riccati equation behind them, the
Hellinger-Kantorovich distance between unnormalised Gaussians and its
small-time expansion are the oracles the rest of the library is tested
against.  All integrations use fixed-step classical RK4 for reproducibility.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (ConditioningError, CovarianceFloorError, NumericsError,
                     RiccatiBlowupError)

SPD_FLOOR = 1e-12


def _sym(M):
    return 0.5 * (M + M.T)


def check_spd(cov, what="covariance", floor=SPD_FLOOR):
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError(f"{what} must be a square matrix")
    if not np.allclose(cov, cov.T, atol=1e-10):
        raise ValueError(f"{what} must be symmetric")
    w = np.linalg.eigvalsh(_sym(cov))
    if w.min() <= floor:
        raise CovarianceFloorError(
            f"{what} lost positive definiteness (min eigenvalue {w.min():.3e})")
    return _sym(cov)


@dataclass(frozen=True)
class GaussianMeasure:
    """Unnormalised Gaussian ``mass * N(mean, cov)``."""

    mass: float
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float).reshape(-1))
        object.__setattr__(self, "cov", check_spd(self.cov))
        if not (np.isfinite(self.mass) and self.mass > 0.0):
            raise ValueError("mass must be positive and finite")
        if self.cov.shape[0] != self.mean.shape[0]:
            raise ValueError("mean / covariance dimensions differ")

    @property
    def dim(self):
        return self.mean.shape[0]


def _at(p, t, d=None, like="matrix"):
    """Resolve a possibly time-dependent parameter at time ``t``.

    Scalars broadcast: to ``v * I`` for matrix slots, to a constant vector
    for vector slots.
    """
    v = p(t) if callable(p) else p
    v = np.asarray(v, dtype=float)
    if like == "scalar":
        return float(v)
    if like == "vector":
        return np.full(d, float(v)) if v.ndim == 0 else v.reshape(-1)
    if v.ndim == 0:
        return float(v) * np.eye(d) if v != 0.0 else np.zeros((d, d))
    return v


@dataclass
class LinearQuadraticParams:
    """OU-with-quadratic-growth coefficients; each entry may be a constant or
    a callable of time (evaluated at every integrator stage)."""

    A: object
    D: object
    e: object = 0.0
    b: object = 0.0
    c: object = 0.0
    Gamma: object = None
    dim: int = None

    def __post_init__(self):
        if self.dim is None:
            base = np.asarray(self.A(0.0) if callable(self.A) else self.A, dtype=float)
            if base.ndim != 2:
                raise ValueError("dim is required when the drift matrix is given as a scalar")
            self.dim = base.shape[0]
        if self.Gamma is None:
            self.Gamma = np.zeros((self.dim, self.dim))

    def at(self, t):
        d = self.dim
        return (_at(self.A, t, d), _at(self.e, t, d, "vector"),
                _at(self.b, t, like="scalar"), _at(self.c, t, d, "vector"),
                _at(self.Gamma, t, d), _at(self.D, t, d))

    def is_autonomous(self):
        return not any(callable(p) for p in (self.A, self.e, self.b, self.c, self.Gamma, self.D))


class PiecewiseConstant:
    """Left-continuous piecewise-constant parameter on a breakpoint grid."""

    def __init__(self, times, values):
        self.times = np.asarray(times, dtype=float)
        self.values = list(values)
        if len(self.values) != len(self.times):
            raise ValueError("one value per breakpoint required")

    def __call__(self, t):
        idx = int(np.searchsorted(self.times, t + 1e-12, side="right") - 1)
        return self.values[max(idx, 0)]


class Tabulated:
    """Exact-lookup time table for values defined on an integrator lattice."""

    def __init__(self, times, values):
        self.times = np.asarray(times, dtype=float)
        self.values = list(values)

    def __call__(self, t):
        idx = int(np.searchsorted(self.times, t))
        for j in (idx - 1, idx, idx + 1):
            if 0 <= j < len(self.times) and abs(self.times[j] - t) <= 1e-9 * max(1.0, abs(t)):
                return self.values[j]
        raise KeyError(f"time {t!r} is not on the tabulated lattice")


def _validate_grid(t_grid):
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or t_grid.size < 1:
        raise ValueError("time grid must be a 1-d array")
    if abs(t_grid[0]) > 1e-12:
        raise ValueError("time grid must start at 0")
    if np.any(np.diff(t_grid) <= 0.0):
        raise ValueError("time grid must be strictly increasing")
    return t_grid


def _moment_rhs(params, t, logm, mu, S):
    A, e, b, c, G, D = params.at(t)
    SG = S @ G
    dS = A @ S + S @ A.T + 2.0 * D + SG @ S
    dmu = (A + SG) @ mu + S @ c + e
    dlogm = 0.5 * mu @ G @ mu + c @ mu + b + 0.5 * np.trace(SG)
    return dlogm, dmu, _sym(dS)


def _propagate(params, init, t_grid, steps_per_unit, check_pd):
    t_grid = _validate_grid(t_grid)
    cov0 = check_spd(init.cov, "initial covariance")
    logm, mu, S = np.log(init.mass), init.mean.copy(), cov0
    out = [GaussianMeasure(init.mass, mu.copy(), S.copy())]
    for t0, t1 in zip(t_grid[:-1], t_grid[1:]):
        n = max(1, int(np.ceil((t1 - t0) * steps_per_unit - 1e-9)))
        h = (t1 - t0) / n
        half = 0.5 * h
        for i in range(n):
            # stage times on the half-step lattice, computed non-cumulatively
            ta = t0 + 2 * i * half
            tm = t0 + (2 * i + 1) * half
            tb = t0 + (2 * i + 2) * half
            k1 = _moment_rhs(params, ta, logm, mu, S)
            k2 = _moment_rhs(params, tm, logm + half * k1[0], mu + half * k1[1], S + half * k1[2])
            k3 = _moment_rhs(params, tm, logm + half * k2[0], mu + half * k2[1], S + half * k2[2])
            k4 = _moment_rhs(params, tb, logm + h * k3[0], mu + h * k3[1], S + h * k3[2])
            logm = logm + h / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
            mu = mu + h / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
            S = _sym(S + h / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2]))
            if check_pd:
                w = np.linalg.eigvalsh(S)
                if w.min() <= SPD_FLOOR:
                    raise CovarianceFloorError(
                        f"covariance lost positive definiteness at t={tb:.6g}"
                        f" (min eigenvalue {w.min():.3e})", t=tb)
        out.append(GaussianMeasure(float(np.exp(logm)), mu.copy(), S.copy()))
    return out


def propagate_affine(params, init, t_grid, steps_per_unit=200):
    """Propagate under linear drift and affine growth (``Gamma = 0``)."""
    G = params.Gamma
    Gv = np.asarray(G(0.0) if callable(G) else G, dtype=float)
    if callable(G) or np.any(Gv != 0.0):
        raise ValueError("affine propagation requires a zero quadratic growth term")
    return _propagate(params, init, t_grid, steps_per_unit, check_pd=True)


def propagate_quadratic(params, init, t_grid, steps_per_unit=200):
    """Propagate under linear drift and quadratic growth (moment ODEs above)."""
    return _propagate(params, init, t_grid, steps_per_unit, check_pd=True)


# ---------------------------------------------------------------------------
# Matrix Riccati flow


@dataclass
class RiccatiPath:
    times: np.ndarray
    G: list


def solve_riccati(params, G0, t_grid, steps_per_unit=200, blowup=1e8):
    """Integrate ``dG/dt = Gamma + 2 G D G - A' G - G A``, symmetrising each step."""
    t_grid = _validate_grid(t_grid)
    G = _sym(np.asarray(G0, dtype=float))
    d = G.shape[0]

    def rhs(t, G):
        A, _, _, _, Gam, D = params.at(t)
        return _sym(Gam + 2.0 * G @ D @ G - A.T @ G - G @ A)

    out = [G.copy()]
    for t0, t1 in zip(t_grid[:-1], t_grid[1:]):
        n = max(1, int(np.ceil((t1 - t0) * steps_per_unit - 1e-9)))
        h = (t1 - t0) / n
        for i in range(n):
            ta = t0 + i * h
            k1 = rhs(ta, G)
            k2 = rhs(ta + 0.5 * h, G + 0.5 * h * k1)
            k3 = rhs(ta + 0.5 * h, G + 0.5 * h * k2)
            k4 = rhs(ta + h, G + h * k3)
            G = _sym(G + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4))
            if np.max(np.abs(G)) > blowup or not np.all(np.isfinite(G)):
                raise RiccatiBlowupError(
                    f"Riccati path exceeded bound {blowup:g} at t={ta + h:.6g}", t=ta + h)
        out.append(G.copy())
    return RiccatiPath(times=t_grid, G=out)


# ---------------------------------------------------------------------------
# Drift/growth confounding construction


def compensated_fitness(A, K, epsilon, measure, Gamma=None, b=0.0, c=None):
    """Growth parameters that cancel an extra drift ``(I + eps K) x``.

    Adding ``P x`` with ``P = I + eps K`` to the drift changes the moment
    flows; the exactly compensating quadratic-growth perturbation is

        Gamma~ = Gamma - (P' S^-1 + S^-1 P)
        c~     = c + P' S^-1 mu
        b~     = b + tr(P)

    leaving (mass, mean, covariance) trajectories unchanged.
    """
    d = measure.dim
    P = np.eye(d) + epsilon * np.asarray(K, dtype=float)
    Sinv = np.linalg.inv(measure.cov)
    Gamma = np.zeros((d, d)) if Gamma is None else np.asarray(Gamma, dtype=float)
    c = np.zeros(d) if c is None else np.asarray(c, dtype=float)
    G_t = _sym(Gamma - (P.T @ Sinv + Sinv @ P))
    c_t = c + P.T @ Sinv @ measure.mean
    b_t = float(b) + float(np.trace(P))
    return b_t, c_t, G_t


@dataclass
class ConfoundResult:
    epsilon: float
    A_tilde: np.ndarray
    times: np.ndarray
    b_tilde: list = field(default_factory=list)
    c_tilde: list = field(default_factory=list)
    Gamma_tilde: list = field(default_factory=list)


def confound_drift(A, K, times, trajectory, Gamma=None, b=0.0, c=None,
                   eps_hi=10.0, bisect_iters=60, safety=0.9):
    """Largest admissible drift perturbation with exact growth compensation.

    Searches by bisection on ``[0, eps_hi]`` for the largest ``eps`` keeping
    every node's compensated quadratic coefficient negative definite, returns
    ``safety * eps`` together with the per-node compensating parameters.  A
    strictly positive ``eps`` always exists because the identity part of the
    perturbation only strengthens negative definiteness.
    """
    A = np.asarray(A, dtype=float)
    K = np.asarray(K, dtype=float)
    times = np.asarray(times, dtype=float)

    def feasible(eps):
        for m in trajectory:
            _, _, G_t = compensated_fitness(A, K, eps, m, Gamma=Gamma, b=b, c=c)
            if np.linalg.eigvalsh(G_t).max() >= 0.0:
                return False
        return True

    if feasible(eps_hi):
        eps = eps_hi
    else:
        lo, hi = 0.0, eps_hi
        for _ in range(bisect_iters):
            mid = 0.5 * (lo + hi)
            if feasible(mid):
                lo = mid
            else:
                hi = mid
        eps = lo
    eps *= safety
    res = ConfoundResult(epsilon=eps, A_tilde=A + np.eye(A.shape[0]) + eps * K, times=times)
    for m in trajectory:
        b_t, c_t, G_t = compensated_fitness(A, K, eps, m, Gamma=Gamma, b=b, c=c)
        res.b_tilde.append(b_t)
        res.c_tilde.append(c_t)
        res.Gamma_tilde.append(G_t)
    return res


def confounded_system(params, init, t_grid, K, epsilon, steps_per_unit=200):
    """Self-contained parameter set for the drift-perturbed twin system.

    The compensating growth is time dependent through the reference moments;
    it is tabulated on the integrator's half-step lattice from an independent,
    twice-finer propagation of the original system, so the twin can be
    propagated without access to the original flow.
    """
    t_grid = _validate_grid(t_grid)
    # Half-step lattice built with exactly the same float arithmetic as the
    # RK4 stage times in _propagate, so the tabulated lookups match.
    lattice = [t_grid[0]]
    for t0, t1 in zip(t_grid[:-1], t_grid[1:]):
        n = max(1, int(np.ceil((t1 - t0) * steps_per_unit - 1e-9)))
        h = (t1 - t0) / n
        half = 0.5 * h
        lattice.extend(t0 + k * half for k in range(1, 2 * n))
        lattice.append(t1)
    lattice = np.asarray(lattice)
    ref = _propagate(params, init, lattice, steps_per_unit=4 * steps_per_unit, check_pd=True)

    A0, e0, b0, c0, Gam0, _ = params.at(0.0)
    if not params.is_autonomous():
        raise ValueError("confounding requires an autonomous reference system")
    bs, cs, Gs = [], [], []
    for m in ref:
        b_t, c_t, G_t = compensated_fitness(A0, K, epsilon, m, Gamma=Gam0, b=b0, c=c0)
        bs.append(b_t)
        cs.append(c_t)
        Gs.append(G_t)
    return LinearQuadraticParams(
        A=A0 + np.eye(params.dim) + epsilon * np.asarray(K, dtype=float),
        D=params.D, e=e0,
        b=Tabulated(lattice, bs), c=Tabulated(lattice, cs),
        Gamma=Tabulated(lattice, Gs), dim=params.dim)


# ---------------------------------------------------------------------------
# Hellinger-Kantorovich distance between unnormalised Gaussians


def _psd_sqrt(M):
    w, V = np.linalg.eigh(_sym(M))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def ghk_distance(a, b, gamma):
    """Closed-form squared Gaussian-Hellinger-Kantorovich discrepancy.

    This is the vanishing-entropy limit of the unbalanced transport cost with
    squared Euclidean ground cost and mass-relaxation strength ``gamma``
    (``q = 2 / gamma``):

        2/q * ( m_a + m_b - 2 sqrt(m_a m_b / det J) exp(-dmu.X^-1 dmu / 4) )

    with ``X = S_a + S_b + I/q`` and ``det J`` built from ``q S + I`` factors,
    evaluated through symmetric eigendecompositions.
    """
    if gamma <= 0.0:
        raise ValueError("gamma must be positive")
    q = 2.0 / gamma
    d = a.dim
    if b.dim != d:
        raise ValueError("measures have different dimensions")
    X = a.cov + b.cov + np.eye(d) / q
    try:
        L = np.linalg.cholesky(X)
    except np.linalg.LinAlgError as err:
        raise ConditioningError("cross-covariance term is numerically singular") from err
    z = np.linalg.solve(L, a.mean - b.mean)
    quad = float(z @ z)

    # det J via the symmetric similar form of S_a (qS_a+I)^-1 (qS_b+I)^-1 S_b
    wa, Va = np.linalg.eigh(a.cov)
    wb, Vb = np.linalg.eigh(b.cov)
    Pa = (Va * (wa / (1.0 + q * wa))) @ Va.T
    Pb = (Vb * (wb / (1.0 + q * wb))) @ Vb.T
    Pa_half = _psd_sqrt(Pa)
    lam = np.linalg.eigvalsh(_sym(Pa_half @ Pb @ Pa_half))
    factors = 1.0 - q * np.sqrt(np.clip(lam, 0.0, None))
    if np.any(factors <= 0.0):
        raise ConditioningError("overlap factor of the Gaussian pair is degenerate")
    det_aq = np.prod(1.0 + q * wa)
    det_bq = np.prod(1.0 + q * wb)
    det_j = np.sqrt(det_aq * det_bq) * np.prod(factors)
    if det_j <= 0.0 or not np.isfinite(det_j):
        raise ConditioningError("determinant factor is not positive")
    overlap = np.sqrt(a.mass * b.mass / det_j) * np.exp(-0.25 * quad)
    return 2.0 / q * (a.mass + b.mass - 2.0 * overlap)


def continuous_loss_integrand(true_params, inferred_params, state, gamma, t=0.0):
    """Small-interval limit of GHK(rho_dt, rho^_dt) / dt^2 at the given state.

    Uses the exact first-order responses of (mass, mean, covariance) to the
    two parameter sets; degenerate covariance eigenvalues are handled by the
    symmetric average of the pair weights (the weighted sum is basis
    invariant within an eigenspace).
    """
    q = 2.0 / gamma
    S = check_spd(state.cov)
    mu, m = state.mean, state.mass
    d = state.dim

    A1, e1, b1, c1, G1, D1 = true_params.at(t)
    A2, e2, b2, c2, G2, D2 = inferred_params.at(t)
    dA, de, db, dc, dG, dD = A1 - A2, e1 - e2, b1 - b2, c1 - c2, G1 - G2, D1 - D2

    dB = S @ dA.T + dA @ S + S @ dG @ S + 2.0 * dD
    dv = (dA + S @ dG) @ mu + S @ dc + de
    dh = 0.5 * mu @ dG @ mu + dc @ mu + db + 0.5 * np.trace(dG @ S)

    X = 2.0 * S + np.eye(d) / q
    vterm = float(dv @ np.linalg.solve(X, dv))

    sig2, W = np.linalg.eigh(S)
    sig2 = np.clip(sig2, SPD_FLOOR, None)
    sq = 1.0 + q * sig2
    num = np.outer(sig2, sq)
    den = (np.outer(sig2, sq) + np.outer(sq, sig2)) ** 2
    weights = 0.5 * (num / den + (num / den).T)
    dB_eig = W.T @ dB @ W
    bterm = float(np.sum(weights * dB_eig ** 2))

    return (m / q) * (vterm + 0.5 * dh ** 2 + q * bterm)
