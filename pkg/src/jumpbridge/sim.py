"""Path simulation and discrete transition kernels for jump-diffusion models.

The simulator diffuses with Euler steps between exact jump arrival times
(constant dominating rate after small-jump truncation, arrivals realized as a
Poisson count plus sorted uniforms, which is the exact arrival law). All
coefficient evaluations use the left endpoint of each step, matching the
predictable integrands of the driving equation.

Randomness contract: one root seed; independent generators are derived per
named stream (initial states, jump counts, jump times, marks, thinning,
Brownian) with all draws laid out by path index, so identical (seed, n_paths)
gives bit-identical ensembles regardless of scheduling or worker count.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import stats

from .errors import DomainError, UnsupportedModelError
from .model import Grid, MarginalVector, Model

Array = np.ndarray

_ROW_TOL = 1e-12

_STREAM_INITIAL = 0
_STREAM_COUNT = 1
_STREAM_TIME = 2
_STREAM_MARK = 3
_STREAM_ACCEPT = 4
_STREAM_BROWNIAN = 5


def _stream_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stream)])


@dataclass(frozen=True)
class TimeMesh:
    """Strictly increasing node times t_0 = 0 < ... < t_J = T."""

    nodes: Array

    def __init__(self, nodes):
        t = np.asarray(nodes, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("mesh needs at least two nodes")
        if t[0] != 0.0:
            raise ValueError("mesh must start at t = 0")
        if np.any(np.diff(t) <= 0):
            raise ValueError("mesh nodes must be strictly increasing")
        object.__setattr__(self, "nodes", t)

    @classmethod
    def uniform(cls, horizon: float, steps: int) -> "TimeMesh":
        if horizon <= 0 or steps < 1:
            raise ValueError("horizon must be positive and steps >= 1")
        return cls(np.linspace(0.0, horizon, steps + 1))

    @property
    def horizon(self) -> float:
        return float(self.nodes[-1])

    @property
    def n_steps(self) -> int:
        return self.nodes.size - 1

    @property
    def dt(self) -> Array:
        return np.diff(self.nodes)

    def index_of(self, t: float) -> int:
        j = int(np.argmin(np.abs(self.nodes - t)))
        if abs(self.nodes[j] - t) > 1e-10:
            raise ValueError(f"t = {t!r} is not a mesh node")
        return j


@dataclass
class PathEnsemble:
    """Simulated cadlag paths on a mesh with explicit jump records.

    states[p, j] is the state of path p at node j. Jumps are stored flat, sorted
    by (path, time): jump_path/jump_time/jump_mark/jump_pre_state/jump_disp.
    brownian_increments[p, j] is Delta B over [t_j, t_{j+1}] (None when not stored).
    ``alive`` flags paths that stayed finite (and inside the h-support when the
    ensemble came from a transformed simulation); dead paths are frozen at their
    last valid state and excluded from histograms.
    """

    mesh: TimeMesh
    states: Array
    jump_path: Array
    jump_time: Array
    jump_mark: Array
    jump_pre_state: Array
    jump_disp: Array
    drift_sum: Array
    diffusion_sum: Array
    alive: Array
    seed: int
    n_paths: int
    brownian_increments: Optional[Array] = None
    n_excluded: int = 0
    n_terminated: int = 0

    @property
    def dim_state(self) -> int:
        return self.states.shape[2]

    def jumps_for(self, p: int):
        lo = np.searchsorted(self.jump_path, p, side="left")
        hi = np.searchsorted(self.jump_path, p, side="right")
        return slice(lo, hi)

    def jump_counts(self) -> Array:
        return np.bincount(self.jump_path, minlength=self.n_paths)


def _draw_initial(initial, n_paths: int, dim_state: int, rng) -> Array:
    """Point mass -> tiled exactly; MarginalVector -> cell centers sampled by mass
    (no within-cell jitter, so lattice-valued models stay on the lattice)."""
    if isinstance(initial, MarginalVector):
        centers = initial.grid.centers
        idx = rng.choice(centers.shape[0], size=n_paths, p=initial.mass)
        return centers[idx].astype(float).copy()
    x0 = np.atleast_1d(np.asarray(initial, dtype=float))
    if x0.shape != (dim_state,):
        raise ValueError(f"initial point must have shape ({dim_state},)")
    return np.tile(x0, (n_paths, 1))


def _simulate_core(
    model: Model,
    initial,
    mesh: TimeMesh,
    n_paths: int,
    seed: int,
    *,
    drift_fn: Callable,
    tilt_fn: Optional[Callable] = None,
    dominating_rate: Optional[float] = None,
    h_eval: Optional[Callable] = None,
    eta: float = 0.0,
    store_increments: Optional[bool] = None,
    t_offset: float = 0.0,
    initial_states: Optional[Array] = None,
) -> PathEnsemble:
    """Shared engine for reference and h-transformed simulation.

    ``drift_fn(t, x)`` is the full SDE drift (without the truncation compensator,
    which is applied here from the possibly tilted atom weights); ``tilt_fn(t, x)``
    returns per-atom intensity factors (ones for the reference dynamics);
    ``dominating_rate`` bounds the tilted total rate for thinning.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    n, m = model.dim_state, model.dim_noise
    nodes = mesh.nodes + t_offset
    horizon = nodes[-1] - nodes[0]
    n_nodes = nodes.size

    marks, weights = model.levy.active()
    n_atoms = marks.shape[0]
    base_rate = float(weights.sum())
    if not np.isfinite(base_rate):
        raise UnsupportedModelError("model is not finite-activity after truncation")
    lam_dom = base_rate if dominating_rate is None else float(dominating_rate)
    if tilt_fn is not None and lam_dom <= 0 and n_atoms:
        raise ValueError("dominating rate must be positive for a jumping model")

    comp_marks, comp_weights = model.levy.compensation_atoms()
    comp_idx = []
    if comp_marks.shape[0]:
        # locate compensation atoms inside the active list so tilts line up
        r = np.linalg.norm(marks, axis=1)
        comp_idx = np.nonzero((r > model.levy.small_jump_cutoff) & (r <= 1.0))[0]

    rng_init = _stream_rng(seed, _STREAM_INITIAL)
    rng_count = _stream_rng(seed, _STREAM_COUNT)
    rng_time = _stream_rng(seed, _STREAM_TIME)
    rng_mark = _stream_rng(seed, _STREAM_MARK)
    rng_accept = _stream_rng(seed, _STREAM_ACCEPT)
    rng_brownian = _stream_rng(seed, _STREAM_BROWNIAN)

    if initial_states is not None:
        X = np.array(initial_states, dtype=float)
        if X.shape != (n_paths, n):
            raise ValueError("initial_states must have shape (n_paths, dim_state)")
    else:
        X = _draw_initial(initial, n_paths, n, rng_init)

    if store_increments is None:
        store_increments = m > 0
    if store_increments and m == 0:
        store_increments = False

    states = np.empty((n_paths, n_nodes, n))
    states[:, 0] = X
    incr = np.zeros((n_paths, n_nodes - 1, m)) if store_increments else None
    drift_sum = np.zeros((n_paths, n))
    diff_sum = np.zeros((n_paths, n))

    alive = np.all(np.isfinite(X), axis=1)
    n_terminated = 0
    if h_eval is not None:
        dead0 = alive & ~(np.asarray(h_eval(np.full(n_paths, nodes[0]), X)) > eta)
        n_terminated += int(dead0.sum())
        alive &= ~dead0

    # Arrival schedule at the dominating rate: exact in distribution.
    if n_atoms and lam_dom > 0:
        counts = rng_count.poisson(lam_dom * horizon, size=n_paths)
        kmax = int(counts.max()) if n_paths else 0
        if kmax:
            u = rng_time.uniform(size=(n_paths, kmax))
            u = np.where(np.arange(kmax)[None, :] < counts[:, None], u, np.inf)
            arr_times = np.sort(u, axis=1) * 1.0
            arr_times = np.where(np.isfinite(arr_times), nodes[0] + arr_times * horizon, np.inf)
            mark_u = rng_mark.uniform(size=(n_paths, kmax))
            acc_u = rng_accept.uniform(size=(n_paths, kmax))
        else:
            arr_times = np.full((n_paths, 1), np.inf)
            mark_u = acc_u = np.zeros((n_paths, 1))
        kcap = max(kmax, 1)
    else:
        arr_times = np.full((n_paths, 1), np.inf)
        mark_u = acc_u = np.zeros((n_paths, 1))
        kcap = 1

    ptr = np.zeros(n_paths, dtype=int)
    rows = np.arange(n_paths)

    jp, jt, jz, jx, jd = [], [], [], [], []

    def effective_drift(t_arr, x):
        b = np.asarray(drift_fn(t_arr, x), dtype=float)
        if comp_marks.shape[0]:
            if tilt_fn is None:
                for z, w in zip(comp_marks, comp_weights):
                    b = b - w * np.asarray(model.jump_coeff(t_arr, x, z), dtype=float)
            else:
                tilts = tilt_fn(t_arr, x)
                for z, w, i in zip(comp_marks, comp_weights, comp_idx):
                    b = b - w * tilts[:, i, None] * np.asarray(model.jump_coeff(t_arr, x, z), dtype=float)
        return b

    for j in range(n_nodes - 1):
        t_hi = nodes[j + 1]
        cur = np.full(n_paths, nodes[j])
        while True:
            t_arr = arr_times[rows, np.minimum(ptr, kcap - 1)]
            t_arr = np.where(ptr < kcap, t_arr, np.inf)
            in_iv = (t_arr <= t_hi) & alive
            target = np.where(in_iv, t_arr, t_hi)
            dt = np.where(alive, np.maximum(target - cur, 0.0), 0.0)

            stepping = dt > 0
            if np.any(stepping):
                b = effective_drift(cur, X)
                move = b * dt[:, None]
                if m > 0:
                    xi = rng_brownian.standard_normal((n_paths, m))
                    dB = xi * np.sqrt(dt)[:, None]
                    sig = np.asarray(model.dispersion(cur, X), dtype=float)
                    move = move + np.einsum("pij,pj->pi", sig, dB)
                    diff_sum += np.where(stepping[:, None], np.einsum("pij,pj->pi", sig, dB), 0.0)
                    if store_increments:
                        incr[:, j] += np.where(stepping[:, None], dB, 0.0)
                move = np.where(stepping[:, None], move, 0.0)
                X = X + move
                drift_sum += np.where(stepping[:, None], b * dt[:, None], 0.0)
            elif m > 0:
                rng_brownian.standard_normal((n_paths, m))  # keep stream layout fixed

            cur = np.where(alive, target, cur)
            if not np.any(in_iv):
                break

            idx = np.nonzero(in_iv)[0]
            xs = X[idx]
            ts = cur[idx]
            if tilt_fn is not None:
                tilts = tilt_fn(ts, xs)  # (k, n_atoms), nonnegative
            else:
                tilts = np.ones((idx.size, n_atoms))
            local = tilts @ weights if n_atoms else np.zeros(idx.size)
            if np.any(local > lam_dom * (1 + 1e-9)):
                raise UnsupportedModelError(
                    "tilted jump rate exceeds the dominating rate; enlarge the rate "
                    "bound (larger eta or a smaller grid box)"
                )
            accept = acc_u[idx, ptr[idx]] * lam_dom <= local
            if np.any(accept):
                aidx = idx[accept]
                pm = tilts[accept] * weights[None, :]
                cdf = np.cumsum(pm, axis=1)
                tot = cdf[:, -1]
                pick_u = mark_u[aidx, ptr[aidx]] * tot
                pick = np.minimum((cdf < pick_u[:, None]).sum(axis=1), n_atoms - 1)
                z = marks[pick]
                xpre = X[aidx]
                disp = np.asarray(model.jump_coeff(cur[aidx], xpre, z), dtype=float)
                X[aidx] = xpre + disp
                jp.append(aidx.copy())
                jt.append(cur[aidx].copy())
                jz.append(z.copy())
                jx.append(xpre.copy())
                jd.append(disp.copy())
                if h_eval is not None:
                    hv = np.asarray(h_eval(cur[aidx], X[aidx]))
                    dead = ~(hv > eta)
                    if np.any(dead):
                        n_terminated += int(dead.sum())
                        alive[aidx[dead]] = False
            ptr[idx] += 1

        bad = alive & ~np.all(np.isfinite(X), axis=1)
        alive &= ~bad
        if h_eval is not None:
            hv = np.asarray(h_eval(np.full(n_paths, t_hi), X))
            dead = alive & ~(hv > eta)
            n_terminated += int(dead.sum())
            alive &= ~dead
        states[:, j + 1] = X

    n_excluded = int((~alive).sum())

    if jp:
        jp = np.concatenate(jp)
        jt = np.concatenate(jt)
        jz = np.concatenate(jz)
        jx = np.concatenate(jx)
        jd = np.concatenate(jd)
        order = np.lexsort((jt, jp))
        jp, jt, jz, jx, jd = jp[order], jt[order], jz[order], jx[order], jd[order]
    else:
        jp = np.zeros(0, dtype=int)
        jt = np.zeros(0)
        jz = np.zeros((0, model.dim_mark))
        jx = np.zeros((0, n))
        jd = np.zeros((0, n))

    return PathEnsemble(
        mesh=mesh,
        states=states,
        jump_path=jp,
        jump_time=jt - t_offset if t_offset else jt,
        jump_mark=jz,
        jump_pre_state=jx,
        jump_disp=jd,
        drift_sum=drift_sum,
        diffusion_sum=diff_sum,
        alive=alive,
        seed=int(seed),
        n_paths=int(n_paths),
        brownian_increments=incr,
        n_excluded=n_excluded,
        n_terminated=n_terminated,
    )


def simulate_paths(
    model: Model,
    initial: Union[MarginalVector, Array, float],
    mesh: TimeMesh,
    n_paths: int,
    seed: int,
    store_increments: Optional[bool] = None,
) -> PathEnsemble:
    """Simulate the reference jump diffusion.

    Euler steps between exact exponential arrivals at the truncated total rate;
    at each arrival the mark is drawn from the normalized post-truncation measure
    and the state incremented by jump_coeff evaluated at the pre-jump state. The
    drift is automatically corrected by the small-jump compensator.
    """
    return _simulate_core(
        model, initial, mesh, n_paths, seed,
        drift_fn=model.drift,
        store_increments=store_increments,
    )


def empirical_marginal(
    paths: PathEnsemble,
    t: float,
    grid: Grid,
    weights: Optional[Array] = None,
):
    """Histogram of X_t over grid cells, normalized; returns (marginal, out_fraction).

    Mass falling outside the grid is reported, never silently clipped; the
    returned marginal is normalized over in-grid mass. Dead paths are dropped.
    """
    j = paths.mesh.index_of(t)
    pts = paths.states[:, j, :]
    w = np.ones(paths.n_paths) if weights is None else np.asarray(weights, dtype=float)
    w = np.where(paths.alive, w, 0.0)
    if w.sum() <= 0:
        raise ValueError("no surviving mass to histogram")
    counts, out = grid.histogram(pts, weights=w)
    if counts.sum() <= 0:
        raise ValueError("all mass fell outside the grid")
    return MarginalVector.from_weights(grid, counts), out


@dataclass
class KernelMatrix:
    """Row-stochastic transition matrix between two grids over a time pair (s, t).

    masked_rows marks rows deliberately zeroed (outside the h-support); row-sum
    invariants apply only to unmasked rows.
    """

    source: Grid
    target: Grid
    s: float
    t: float
    matrix: Array
    leakage: Optional[Array] = None
    warnings: list = field(default_factory=list)
    masked_rows: Optional[Array] = None

    def __post_init__(self):
        p = self.matrix
        if p.shape != (self.source.n_cells, self.target.n_cells):
            raise ValueError("kernel matrix shape does not match grids")
        if np.any(p < 0):
            raise ValueError("kernel entries must be nonnegative")
        rows = p.sum(axis=1)
        unmasked = np.ones(p.shape[0], bool) if self.masked_rows is None else ~self.masked_rows
        if np.any(np.abs(rows[unmasked] - 1.0) > _ROW_TOL):
            raise ValueError("kernel rows must sum to 1 within 1e-12")


def _renormalize_rows(p: Array) -> Array:
    rows = p.sum(axis=1, keepdims=True)
    safe = np.where(rows > 0, rows, 1.0)
    return p / safe


def identity_kernel(grid: Grid, s: float) -> KernelMatrix:
    return KernelMatrix(grid, grid, s, s, np.eye(grid.n_cells))


def closed_form_kernel(model: Model, s: float, t: float, source: Grid, target: Grid) -> KernelMatrix:
    """Exact transition matrix for the brownian and poisson builtins.

    Poisson rows are pmf(j - i) over the truncated target grid, renormalized;
    Brownian rows are Gaussian cell masses from cdf differences. t = s gives the
    identity. Other families should use estimate_kernel.
    """
    if t < s:
        raise ValueError("need s <= t")
    if t == s:
        if source != target:
            raise ValueError("zero elapsed time requires identical grids")
        return identity_kernel(source, s)
    if source.n_dims != 1 or target.n_dims != 1:
        raise UnsupportedModelError("closed-form kernels are 1-d; use estimate_kernel")
    dt = t - s

    if model.name == "poisson":
        for g in (source, target):
            k = np.rint(g.centers1d)
            if np.max(np.abs(g.centers1d - k)) > 1e-9 or abs(g.spacing[0] - 1.0) > 1e-9:
                raise ValueError("poisson kernel requires integer-aligned unit grids")
        rate = float(model.levy.weights.sum())
        xi = np.rint(source.centers1d).astype(int)
        yj = np.rint(target.centers1d).astype(int)
        k = yj[None, :] - xi[:, None]
        p = np.where(k >= 0, stats.poisson.pmf(np.maximum(k, 0), rate * dt), 0.0)
        return KernelMatrix(source, target, s, t, _renormalize_rows(p))

    if model.name == "brownian":
        x0 = np.zeros((1, 1))
        b = float(np.asarray(model.drift(s, x0))[0, 0])
        sig = float(np.asarray(model.dispersion(s, x0))[0, 0, 0])
        mean = source.centers1d + b * dt
        sd = abs(sig) * np.sqrt(dt)
        edges = target.axis_edges(0)
        if sd == 0:
            counts = np.stack([target.histogram(mean[:, None][i:i + 1])[0] for i in range(mean.size)])
            return KernelMatrix(source, target, s, t, _renormalize_rows(counts))
        cdf = stats.norm.cdf((edges[None, :] - mean[:, None]) / sd)
        p = np.diff(cdf, axis=1)
        return KernelMatrix(source, target, s, t, _renormalize_rows(p))

    raise UnsupportedModelError(
        f"no closed-form kernel for model {model.name!r}; use estimate_kernel"
    )


def estimate_kernel(
    model: Model,
    s: float,
    t: float,
    source: Grid,
    target: Grid,
    n_paths_per_source: int,
    seed: int,
    n_steps: int = 32,
    max_leakage: float = 0.05,
) -> KernelMatrix:
    """Monte Carlo transition matrix: simulate n paths from each source cell center.

    Rows are histogrammed on the target grid and renormalized; per-row out-of-grid
    leakage is attached, with a warning when any row exceeds max_leakage.
    """
    if t < s:
        raise ValueError("need s <= t")
    if t == s:
        if source != target:
            raise ValueError("zero elapsed time requires identical grids")
        return identity_kernel(source, s)
    centers = source.centers
    ns = centers.shape[0]
    reps = np.repeat(centers, n_paths_per_source, axis=0)
    mesh = TimeMesh.uniform(t - s, n_steps)
    ens = _simulate_core(
        model, None, mesh, reps.shape[0], seed,
        drift_fn=model.drift, t_offset=s, initial_states=reps,
        store_increments=False,
    )
    terminal = ens.states[:, -1, :]
    p = np.zeros((ns, target.n_cells))
    leak = np.zeros(ns)
    ok = ens.alive.reshape(ns, n_paths_per_source)
    term = terminal.reshape(ns, n_paths_per_source, -1)
    for i in range(ns):
        pts = term[i][ok[i]]
        counts, out = target.histogram(pts)
        if counts.sum() == 0:
            raise UnsupportedModelError(f"all paths from source cell {i} left the target grid")
        p[i] = counts
        leak[i] = out
    warnings_ = []
    if np.any(leak > max_leakage):
        bad = int(np.argmax(leak))
        warnings_.append(
            f"out-of-grid leakage up to {leak.max():.3f} (row {bad}) exceeds {max_leakage}"
        )
    return KernelMatrix(source, target, s, t, _renormalize_rows(p), leakage=leak, warnings=warnings_)


def chain_kernels(k1: KernelMatrix, k2: KernelMatrix) -> KernelMatrix:
    """Chapman-Kolmogorov composition (matrix product)."""
    if k1.target != k2.source:
        raise ValueError("inner grids do not match")
    if abs(k1.t - k2.s) > 1e-10:
        raise ValueError("kernel time intervals do not abut")
    mask = None
    if k1.masked_rows is not None:
        mask = k1.masked_rows.copy()
    return KernelMatrix(
        k1.source, k2.target, k1.s, k2.t, k1.matrix @ k2.matrix, masked_rows=mask
    )


def kernel_chain(model: Model, mesh: TimeMesh, grid: Grid, *, method: str = "auto",
                 n_paths_per_source: int = 2000, seed: int = 0) -> list:
    """One KernelMatrix per mesh step, closed-form when available else Monte Carlo."""
    kernels = []
    for j in range(mesh.n_steps):
        s, t = float(mesh.nodes[j]), float(mesh.nodes[j + 1])
        if method == "mc":
            kernels.append(estimate_kernel(model, s, t, grid, grid, n_paths_per_source, seed + j))
            continue
        try:
            kernels.append(closed_form_kernel(model, s, t, grid, grid))
        except UnsupportedModelError:
            if method == "closed_form":
                raise
            kernels.append(estimate_kernel(model, s, t, grid, grid, n_paths_per_source, seed + j))
    return kernels


def reconstruction_residual(paths: PathEnsemble) -> Array:
    """Per-path |X_T - X_0 - (drift integral + Brownian part + jump displacements)|."""
    delta = paths.states[:, -1, :] - paths.states[:, 0, :]
    jumps = np.zeros_like(delta)
    if paths.jump_path.size:
        np.add.at(jumps, paths.jump_path, paths.jump_disp)
    resid = delta - paths.drift_sum - paths.diffusion_sum - jumps
    return np.linalg.norm(resid, axis=1)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def export_ensemble_csv(paths: PathEnsemble, file) -> None:
    """One row per (path, node): path_id, t, state components."""
    w = csv.writer(file)
    n = paths.dim_state
    w.writerow(["path_id", "t"] + [f"x{d}" for d in range(n)])
    for p in range(paths.n_paths):
        for j, t in enumerate(paths.mesh.nodes):
            w.writerow([p, _fmt(t)] + [_fmt(v) for v in paths.states[p, j]])


def export_jumps_csv(paths: PathEnsemble, file) -> None:
    """One row per jump: path_id, s, mark, displacement."""
    w = csv.writer(file)
    l = paths.jump_mark.shape[1]
    n = paths.dim_state
    w.writerow(["path_id", "s"] + [f"z{d}" for d in range(l)] + [f"dx{d}" for d in range(n)])
    for i in range(paths.jump_path.size):
        w.writerow(
            [int(paths.jump_path[i]), _fmt(paths.jump_time[i])]
            + [_fmt(v) for v in paths.jump_mark[i]]
            + [_fmt(v) for v in paths.jump_disp[i]]
        )


def export_kernel_csv(kernel: KernelMatrix, file) -> None:
    """Matrix dump preceded by comment rows naming the grids and times."""
    file.write(f"# kernel s={_fmt(kernel.s)} t={_fmt(kernel.t)}\n")
    file.write(
        f"# source lower={kernel.source.lower.tolist()} upper={kernel.source.upper.tolist()} cells={kernel.source.cells.tolist()}\n"
    )
    file.write(
        f"# target lower={kernel.target.lower.tolist()} upper={kernel.target.upper.tolist()} cells={kernel.target.cells.tolist()}\n"
    )
    w = csv.writer(file)
    for row in kernel.matrix:
        w.writerow([_fmt(v) for v in row])
