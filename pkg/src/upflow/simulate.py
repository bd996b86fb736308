"""Forward simulation of branching Ito diffusions and the benchmark systems.

Particles follow Euler-Maruyama steps ``x <- x + v dt + sigma sqrt(dt) xi``
and then divide with probability ``b(x) dt`` (the clone inherits the parent
state and is appended at the population tail) or die with probability
``d(x) dt``.  Death is resolved before division within a step, so a particle
never does both; the difference is O(dt^2).  Rates are evaluated at the
post-move state.

Each requested snapshot is drawn from an independent realisation of the full
process (fresh population re-simulated from time zero with its own
sub-seed), so snapshots never share particle identities.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ExtinctionError, NonFiniteError

# ---------------------------------------------------------------------------
# Discrete measures


@dataclass
class WeightedCloud:
    """Particle positions plus positive masses: the measure sum_k m_k delta_{x_k}."""

    points: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.masses = np.asarray(self.masses, dtype=float).reshape(-1)
        if self.points.shape[0] != self.masses.shape[0]:
            raise ValueError("points and masses must have equal length")
        if self.points.shape[0] == 0:
            raise ValueError("cloud must be non-empty")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("points must be finite")
        if not np.all((self.masses > 0.0) & np.isfinite(self.masses)):
            raise ValueError("masses must be positive and finite")

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]

    @property
    def total_mass(self):
        return float(self.masses.sum())


@dataclass
class SnapshotSet:
    """Ordered cross-sectional observations: times plus one cloud per time."""

    times: np.ndarray
    clouds: list

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if len(self.clouds) != self.times.shape[0]:
            raise ValueError("one cloud per time required")
        if np.any(np.diff(self.times) <= 0.0):
            raise ValueError("snapshot times must be strictly increasing")
        dims = {c.dim for c in self.clouds}
        if len(dims) != 1:
            raise ValueError("all snapshots must share the point dimension")

    @property
    def dim(self):
        return self.clouds[0].dim

    @property
    def n_snapshots(self):
        return len(self.clouds)


@dataclass
class BranchingModel:
    """Vectorised branching diffusion: drift/diffusion/rates over ``(n, d)`` states.

    ``diffusion(t, x)`` returns per-coordinate noise scales (scalar, ``(d,)``
    or ``(n, d)``); with ``matrix_noise=True`` it returns a ``(d, d)`` matrix
    applied to unit normals instead.  ``clip_nonnegative`` floors proposed
    states at zero (used for concentration-valued systems).
    """

    dim: int
    drift: object
    diffusion: object
    birth_rate: object
    death_rate: object
    clip_nonnegative: bool = False
    matrix_noise: bool = False


def _apply_noise(model, t, x, xi, sqdt):
    sig = np.asarray(model.diffusion(t, x), dtype=float)
    if model.matrix_noise:
        return x + sqdt * xi @ sig.T
    return x + sqdt * sig * xi


def _simulate_population(model, x0, t_end, dt, rng, rate_warn=0.5):
    """One realisation from time 0 to ``t_end``; returns the final positions."""
    x = np.array(x0, dtype=float, copy=True)
    if t_end <= 0.0:
        return x
    nsteps = max(1, int(np.ceil(t_end / dt - 1e-9)))
    h = t_end / nsteps
    sqh = np.sqrt(h)
    warned = False
    for i in range(nsteps):
        t = i * h
        v = np.asarray(model.drift(t, x), dtype=float)
        xi = rng.standard_normal(x.shape)
        x = _apply_noise(model, t, x + h * v, xi, sqh)
        if model.clip_nonnegative:
            np.maximum(x, 0.0, out=x)
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(f"non-finite state at t={t + h:.6g}")
        tb = t + h
        b = np.asarray(model.birth_rate(tb, x), dtype=float)
        d = np.asarray(model.death_rate(tb, x), dtype=float)
        top = max(b.max(initial=0.0), d.max(initial=0.0)) * h
        if top >= rate_warn and not warned:
            warnings.warn(f"event probability per step reached {top:.2f}; decrease dt")
            warned = True
        u = rng.random(x.shape[0])
        dies = u < d * h
        divides = u >= d * h
        divides &= u < (d + b) * h  # exclusive events from a single uniform
        survivors = x[~dies]
        clones = x[divides]
        x = np.concatenate([survivors, clones], axis=0) if clones.size else survivors
        if x.shape[0] == 0:
            raise ExtinctionError(f"population extinct at t={tb:.6g}", t=tb)
    return x


def simulate_branching(model, init_sampler, n0, t_grid, dt, seed, rate_warn=0.5):
    """Independent-realisation snapshots of the branching diffusion.

    ``init_sampler(rng, n)`` draws the initial population.  Every particle of
    snapshot ``i`` carries mass ``1/n0``, so cloud masses total ``N_i / n0``.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(np.diff(t_grid) <= 0.0):
        raise ValueError("snapshot times must be strictly increasing")
    if dt <= 0.0 or (t_grid.size > 1 and dt > np.diff(t_grid).min() + 1e-12):
        raise ValueError("dt must be positive and no larger than the smallest snapshot gap")
    children = np.random.SeedSequence(seed).spawn(t_grid.size)
    clouds = []
    for t_i, ss in zip(t_grid, children):
        rng = np.random.default_rng(ss)
        x0 = np.atleast_2d(np.asarray(init_sampler(rng, n0), dtype=float))
        x = _simulate_population(model, x0, float(t_i), dt, rng, rate_warn)
        clouds.append(WeightedCloud(x, np.full(x.shape[0], 1.0 / n0)))
    return SnapshotSet(times=t_grid, clouds=clouds)


def gaussian_init(mean, cov_scale):
    """Initial sampler for ``N(mean, cov_scale * I)``."""
    mean = np.asarray(mean, dtype=float)

    def sample(rng, n):
        return mean + np.sqrt(cov_scale) * rng.standard_normal((n, mean.shape[0]))

    return sample


# ---------------------------------------------------------------------------
# Benchmark system: bistable potential landscape


def bistable_potential(x, full_dim=None):
    """``0.9 |x-a|^2 |x+a|^2 + 10 sum_{j>=2} x_j^2`` with ``a = e0 + e1``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d = x.shape[1] if full_dim is None else full_dim
    a = np.zeros(d)
    a[:2] = 1.0
    u = np.sum((x - a) ** 2, axis=1)
    w = np.sum((x + a) ** 2, axis=1)
    tail = np.sum(x[:, 2:] ** 2, axis=1)
    return 0.9 * u * w + 10.0 * tail


def bistable_potential_grad(x):
    """Hand-derived product-rule gradient of :func:`bistable_potential`."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d = x.shape[1]
    a = np.zeros(d)
    a[:2] = 1.0
    u = np.sum((x - a) ** 2, axis=1, keepdims=True)
    w = np.sum((x + a) ** 2, axis=1, keepdims=True)
    grad = 1.8 * ((x - a) * w + (x + a) * u)
    grad[:, 2:] += 20.0 * x[:, 2:]
    return grad


def bistable_birth_rate(x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return 2.5 * (1.0 + np.tanh(2.0 * x[:, 0]))


def bistable_system(d, sigma=0.5):
    """The d-dimensional double-well benchmark (attractors at ``+-(e0+e1)``)."""
    if d < 2:
        raise ValueError("bistable system requires d >= 2")
    return BranchingModel(
        dim=d,
        drift=lambda t, x: -bistable_potential_grad(x),
        diffusion=lambda t, x: sigma,
        birth_rate=lambda t, x: bistable_birth_rate(x),
        death_rate=lambda t, x: np.zeros(x.shape[0]),
    )


def bistable_init_sampler(d):
    return gaussian_init(np.zeros(d), 0.01)


# ---------------------------------------------------------------------------
# Chemical-Langevin reaction-network systems


def _hill(x, n, K):
    xn = np.maximum(x, 0.0) ** n
    return xn / (K ** n + xn)


class CleNetwork:
    """Reaction network compiled from a JSON-style spec document.

    Drift is production minus degradation, ``u(x) - lam * x``; the noise is
    the Chemical-Langevin form ``vol_inv_sqrt * sqrt(u(x) + lam * x)`` per
    coordinate, clamped at zero inside the square root.  Production combines
    Hill terms multiplicatively; genes may opt into an ``"or"`` rule for
    their activators (``1 - prod(1 - h)``), repressors always multiply as
    ``(1 - h)``.
    """

    def __init__(self, spec):
        self.name = spec.get("name", "network")
        self.genes = list(spec["genes"])
        d = len(self.genes)
        if d != len(set(self.genes)):
            raise ValueError("duplicate gene names")
        self.index = {g: i for i, g in enumerate(self.genes)}
        hill = spec.get("hill", {})
        self.hill_n = float(hill.get("n", 2.0))
        self.hill_k = float(hill.get("K", 0.5))
        self.basal = float(spec.get("basal", 0.05))
        self.vol_inv_sqrt = float(spec.get("volume_inv_sqrt", 0.5))
        rate = spec.get("max_rate", 5.0)
        self.max_rate = np.full(d, float(rate)) if np.isscalar(rate) else np.asarray(rate, float)
        lam = spec.get("degradation", 5.0)
        self.degradation = np.full(d, float(lam)) if np.isscalar(lam) else np.asarray(lam, float)
        for key, arr in (("max_rate", self.max_rate), ("degradation", self.degradation)):
            if arr.shape != (d,):
                raise ValueError(f"{key} must be scalar or one value per gene")

        regs = spec.get("regulators", {})
        unknown = set(regs) - set(self.genes)
        if unknown:
            raise ValueError(f"regulators listed for unknown genes: {sorted(unknown)}")
        self._acts, self._reps, self._logic = [], [], []
        for g in self.genes:
            entries = regs.get(g, [])
            acts, reps = [], []
            for name, sign in entries:
                if name not in self.index:
                    raise ValueError(f"gene {g!r} references unknown regulator {name!r}")
                (acts if sign == "+" else reps).append(self.index[name])
            self._acts.append(np.asarray(acts, dtype=int))
            self._reps.append(np.asarray(reps, dtype=int))
            self._logic.append(spec.get("logic", {}).get(g, "and"))

        growth = spec.get("growth", {})
        self.growth_scale = float(growth.get("scale", 0.0))
        self.growth_factors = [
            (self.index[f["gene"]], f.get("direction", "+"),
             float(f.get("slope", 1.0)), float(f.get("threshold", 0.0)))
            for f in growth.get("factors", [])
        ]

        init = spec.get("init", {})
        self.init_high = [self.index[g] for g in init.get("high", [])]
        self.init_high_mean = float(init.get("high_mean", 1.5))
        self.init_low_mean = float(init.get("low_mean", 0.02))
        self.init_std = float(init.get("std", 0.05))

        edges = set()
        for g in self.genes:
            for name, _sign in regs.get(g, []):
                if name != g:
                    edges.add((self.index[name], self.index[g]))
        self.true_edges = frozenset(edges)

    @property
    def dim(self):
        return len(self.genes)

    def production(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        h = _hill(x, self.hill_n, self.hill_k)
        u = np.empty_like(x)
        for i in range(self.dim):
            act_idx, rep_idx = self._acts[i], self._reps[i]
            if act_idx.size == 0:
                act = np.ones(x.shape[0])
            elif self._logic[i] == "or":
                act = 1.0 - np.prod(1.0 - h[:, act_idx], axis=1)
            else:
                act = np.prod(h[:, act_idx], axis=1)
            rep = np.prod(1.0 - h[:, rep_idx], axis=1) if rep_idx.size else 1.0
            u[:, i] = self.basal + self.max_rate[i] * act * rep
        return u

    def drift(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.production(x) - self.degradation * x

    def noise(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        flux = self.production(x) + self.degradation * x
        return self.vol_inv_sqrt * np.sqrt(np.maximum(flux, 0.0))

    def growth(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        rate = np.full(x.shape[0], self.growth_scale)
        for idx, direction, slope, thr in self.growth_factors:
            s = 0.5 * (np.tanh(slope * (x[:, idx] - thr)) + 1.0)
            rate = rate * (s if direction == "+" else 1.0 - s)
        return rate

    def init_sampler(self):
        means = np.full(self.dim, self.init_low_mean)
        means[self.init_high] = self.init_high_mean
        std = self.init_std

        def sample(rng, n):
            return np.maximum(means + std * rng.standard_normal((n, self.dim)), 0.0)

        return sample

    def model(self):
        return BranchingModel(
            dim=self.dim,
            drift=lambda t, x: self.drift(x),
            diffusion=lambda t, x: self.noise(x),
            birth_rate=lambda t, x: self.growth(x),
            death_rate=lambda t, x: np.zeros(np.atleast_2d(x).shape[0]),
            clip_nonnegative=True,
        )


def cle_system(spec):
    """Branching model for a reaction-network spec (dict or JSON path)."""
    return load_network(spec).model()


def load_network(spec):
    if isinstance(spec, CleNetwork):
        return spec
    if isinstance(spec, dict):
        return CleNetwork(spec)
    import json

    with open(spec, "r", encoding="utf-8") as fh:
        return CleNetwork(json.load(fh))


def builtin_network_path(name):
    from importlib.resources import files

    return str(files("upflow.networks").joinpath(f"{name}.json"))


# ---------------------------------------------------------------------------
# Fate regions and fate probabilities


@dataclass
class FateRegions:
    centroids: np.ndarray
    labels: list

    def __post_init__(self):
        self.centroids = np.atleast_2d(np.asarray(self.centroids, dtype=float))
        if self.centroids.shape[0] < 1:
            raise ValueError("at least one centroid required")

    def assign(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        d2 = ((points[:, None, :] - self.centroids[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(d2, axis=1)


def _kmeans_once(points, masses, k, rng):
    n = points.shape[0]
    # k-means++ seeding, mass weighted
    centroids = np.empty((k, points.shape[1]))
    p = masses / masses.sum()
    centroids[0] = points[rng.choice(n, p=p)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        w = masses * d2
        if w.sum() <= 0.0:
            centroids[j:] = centroids[0]
            break
        centroids[j] = points[rng.choice(n, p=w / w.sum())]
        d2 = np.minimum(d2, ((points - centroids[j]) ** 2).sum(axis=1))
    assign = None
    for _ in range(200):
        dist = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(dist, axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            sel = assign == j
            if np.any(sel):
                centroids[j] = np.average(points[sel], axis=0, weights=masses[sel])
    dist = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    inertia = float(np.sum(masses * dist[np.arange(n), assign]))
    return centroids, inertia


def partition_fates(final_cloud, k, seed, restarts=50):
    """Mass-weighted Lloyd k-means with k-means++ seeding; best of ``restarts``."""
    pts, ms = final_cloud.points, final_cloud.masses
    if pts.shape[0] < k:
        raise ValueError("cloud smaller than the number of regions")
    if np.allclose(pts, pts[0]):
        raise ValueError("degenerate cloud: all points identical")
    best = None
    for ss in np.random.SeedSequence(seed).spawn(restarts):
        centroids, inertia = _kmeans_once(pts, ms, k, np.random.default_rng(ss))
        if best is None or inertia < best[1]:
            best = (centroids, inertia)
    centroids = best[0]
    order = np.lexsort(centroids.T[::-1])  # deterministic region order
    return FateRegions(centroids=centroids[order], labels=list(range(k)))


def estimate_fate_probabilities(path_sampler, queries, regions, trials, seed):
    """Terminal-region frequencies over ``trials`` forward simulations per query.

    ``path_sampler(rng, t0, x0)`` must evolve a batch ``x0`` from time ``t0``
    to the terminal time and return the terminal states.  Growth does not
    enter: the fate of a state is a property of its own trajectory.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    k = regions.centroids.shape[0]
    out = np.zeros((len(queries), k))
    rng = np.random.default_rng(seed)
    for qi, (t_q, x_q) in enumerate(queries):
        x0 = np.tile(np.asarray(x_q, dtype=float), (trials, 1))
        terminal = path_sampler(rng, float(t_q), x0)
        counts = np.bincount(regions.assign(terminal), minlength=k)
        out[qi] = counts / trials
    return out


def em_path_sampler(model, t_end, dt):
    """Pure drift-diffusion sampler (no branching) for fate estimation."""

    def sample(rng, t0, x0):
        x = np.array(x0, dtype=float, copy=True)
        remaining = t_end - t0
        if remaining <= 0.0:
            return x
        nsteps = max(1, int(np.ceil(remaining / dt - 1e-9)))
        h = remaining / nsteps
        sqh = np.sqrt(h)
        for i in range(nsteps):
            t = t0 + i * h
            v = np.asarray(model.drift(t, x), dtype=float)
            xi = rng.standard_normal(x.shape)
            x = _apply_noise(model, t, x + h * v, xi, sqh)
            if model.clip_nonnegative:
                np.maximum(x, 0.0, out=x)
        return x

    return sample


# ---------------------------------------------------------------------------
# Snapshot CSV interchange (header ``t,mass,x0,...``, 17 significant digits)


def snapshot_to_csv(t, cloud):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["t", "mass"] + [f"x{i}" for i in range(cloud.dim)])
    for point, mass in zip(cloud.points, cloud.masses):
        writer.writerow([f"{t:.17g}", f"{mass:.17g}"] + [f"{v:.17g}" for v in point])
    return buf.getvalue()


def snapshot_from_csv(text):
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if header[:2] != ["t", "mass"]:
        raise ValueError("snapshot CSV must start with columns t,mass")
    dim = len(header) - 2
    if [f"x{i}" for i in range(dim)] != header[2:]:
        raise ValueError("snapshot CSV coordinate columns must be x0..x{d-1}")
    times, masses, rows = [], [], []
    for row in reader:
        if not row:
            continue
        times.append(float(row[0]))
        masses.append(float(row[1]))
        rows.append([float(v) for v in row[2:]])
    t = set(times)
    if len(t) != 1:
        raise ValueError("snapshot CSV must contain a single time")
    return t.pop(), WeightedCloud(np.asarray(rows), np.asarray(masses))


def write_snapshots(snapshots, directory, prefix="snapshot"):
    import os

    os.makedirs(directory, exist_ok=True)
    names = []
    for i, (t, cloud) in enumerate(zip(snapshots.times, snapshots.clouds)):
        name = f"{prefix}_{i:02d}.csv"
        with open(os.path.join(directory, name), "w", encoding="utf-8", newline="") as fh:
            fh.write(snapshot_to_csv(t, cloud))
        names.append(name)
    return names


def read_snapshots(directory, names):
    import os

    times, clouds = [], []
    for name in names:
        with open(os.path.join(directory, name), "r", encoding="utf-8") as fh:
            t, cloud = snapshot_from_csv(fh.read())
        times.append(t)
        clouds.append(cloud)
    return SnapshotSet(times=np.asarray(times), clouds=clouds)
