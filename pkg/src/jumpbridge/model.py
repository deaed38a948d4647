"""Jump-diffusion models: coefficient callables, discrete Levy measures, grids.

Coefficient callables follow a broadcasting contract: ``drift(t, x)`` and
``dispersion(t, x)`` accept ``x`` of shape ``(..., n)`` (``t`` a scalar or an
array matching the leading axes) and return ``(..., n)`` / ``(..., n, m)``;
``jump_coeff(t, x, z)`` accepts ``x`` of shape ``(..., n)`` and ``z`` of shape
``(..., l)`` or ``(l,)`` and returns ``(..., n)``. All callables must be pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy import stats

from .errors import UnsupportedModelError

Array = np.ndarray

_MASS_TOL = 1e-12


def _as_1d(v, name: str) -> Array:
    a = np.atleast_1d(np.asarray(v, dtype=float))
    if a.ndim != 1:
        raise ValueError(f"{name} must be scalar or 1-d, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centered grid on a box in R^n.

    Cell i along axis d is centered at ``lower[d] + (i + 1/2) * spacing[d]``.
    Cells are enumerated flat in C order; ``centers`` has shape (n_cells, n).
    """

    lower: Array
    upper: Array
    cells: Array

    def __init__(self, lower, upper, cells):
        lo = _as_1d(lower, "lower")
        hi = _as_1d(upper, "upper")
        nc = np.atleast_1d(np.asarray(cells, dtype=int))
        if not (lo.shape == hi.shape == nc.shape):
            raise ValueError("lower/upper/cells must have matching lengths")
        if np.any(hi <= lo):
            raise ValueError("upper bound must exceed lower bound on every axis")
        if np.any(nc < 1):
            raise ValueError("cell counts must be positive")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "cells", nc)

    @classmethod
    def integers(cls, lo: int, hi: int) -> "Grid":
        """Grid whose cells are centered on the integers lo..hi (spacing 1)."""
        return cls(lo - 0.5, hi + 0.5, hi - lo + 1)

    @property
    def n_dims(self) -> int:
        return self.lower.size

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.cells))

    @property
    def spacing(self) -> Array:
        return (self.upper - self.lower) / self.cells

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def axis_centers(self, d: int = 0) -> Array:
        h = self.spacing[d]
        return self.lower[d] + h * (np.arange(self.cells[d]) + 0.5)

    def axis_edges(self, d: int = 0) -> Array:
        return self.lower[d] + self.spacing[d] * np.arange(self.cells[d] + 1)

    @property
    def centers(self) -> Array:
        axes = [self.axis_centers(d) for d in range(self.n_dims)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @property
    def centers1d(self) -> Array:
        if self.n_dims != 1:
            raise ValueError("centers1d requires a 1-d grid")
        return self.axis_centers(0)

    def histogram(self, points: Array, weights: Optional[Array] = None):
        """Bin points of shape (N, n) (or (N,) for 1-d); returns (counts, out_fraction).

        counts is the flat per-cell total of ``weights`` (ones by default);
        out_fraction is the fraction of total weight falling outside the box.
        """
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.shape[1] != self.n_dims:
            raise ValueError("points dimensionality does not match grid")
        w = np.ones(pts.shape[0]) if weights is None else np.asarray(weights, dtype=float)
        edges = [self.axis_edges(d) for d in range(self.n_dims)]
        counts, _ = np.histogramdd(pts, bins=edges, weights=w)
        total = float(w.sum())
        inside = float(counts.sum())
        out_fraction = 0.0 if total == 0 else (total - inside) / total
        return counts.ravel(), out_fraction

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Grid)
            and np.array_equal(self.lower, other.lower)
            and np.array_equal(self.upper, other.upper)
            and np.array_equal(self.cells, other.cells)
        )

    def __hash__(self):
        return hash((self.lower.tobytes(), self.upper.tobytes(), self.cells.tobytes()))


@dataclass(frozen=True)
class MarginalVector:
    """Probability masses per grid cell; nonnegative, summing to 1 within 1e-12."""

    grid: Grid
    mass: Array

    def __init__(self, grid: Grid, mass):
        m = np.asarray(mass, dtype=float)
        if m.shape != (grid.n_cells,):
            raise ValueError(f"mass must have shape ({grid.n_cells},), got {m.shape}")
        if np.any(m < 0):
            raise ValueError("marginal masses must be nonnegative")
        if abs(m.sum() - 1.0) > _MASS_TOL:
            raise ValueError(f"marginal mass sums to {m.sum()!r}, expected 1 within {_MASS_TOL}")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "mass", m)

    @classmethod
    def from_weights(cls, grid: Grid, weights) -> "MarginalVector":
        w = np.asarray(weights, dtype=float)
        tot = w.sum()
        if tot <= 0:
            raise ValueError("weights must have positive total mass")
        return cls(grid, w / tot)


def gaussian_marginal(grid: Grid, mean: float, sd: float) -> MarginalVector:
    """Cell masses of N(mean, sd^2) on a 1-d grid (cdf differences, renormalized)."""
    edges = grid.axis_edges(0)
    cdf = stats.norm.cdf(edges, loc=mean, scale=sd)
    return MarginalVector.from_weights(grid, np.diff(cdf))


def poisson_marginal(grid: Grid, mean: float) -> MarginalVector:
    """Poisson(mean) pmf on an integer-aligned 1-d grid, renormalized."""
    centers = grid.centers1d
    k = np.rint(centers)
    if np.max(np.abs(centers - k)) > 1e-9 or abs(grid.spacing[0] - 1.0) > 1e-9:
        raise ValueError("poisson_marginal requires an integer-aligned grid with unit spacing")
    pmf = np.where(k >= 0, stats.poisson.pmf(np.maximum(k, 0), mean), 0.0)
    return MarginalVector.from_weights(grid, pmf)


def point_mass_marginal(grid: Grid, at) -> MarginalVector:
    """Unit mass in the cell containing ``at``."""
    counts, out = grid.histogram(np.atleast_2d(np.atleast_1d(np.asarray(at, dtype=float))))
    if out > 0:
        raise ValueError(f"point {at!r} lies outside the grid")
    return MarginalVector(grid, counts)


@dataclass(frozen=True)
class LevyMeasure:
    """Finite-atom Levy measure, optionally extended by a quadrature-discretized density.

    atoms: marks (K, l) with weights (K,); density_part: (integrand, nodes (Q, l),
    quad_weights (Q,)) contributing effective weights integrand(node)*quad_weight.
    small_jump_cutoff eps in (0, 1]: atoms with |z| <= eps are dropped from simulation
    and compensated only through the drift correction.
    """

    marks: Array
    weights: Array
    density_part: Optional[tuple] = None
    small_jump_cutoff: float = 0.5

    def __init__(self, marks=None, weights=None, density_part=None, small_jump_cutoff=0.5, dim_mark=None):
        if marks is None:
            if dim_mark is None:
                dim_mark = 1
            marks = np.zeros((0, dim_mark))
            weights = np.zeros(0)
        marks = np.atleast_1d(np.asarray(marks, dtype=float))
        if marks.ndim == 1:
            marks = marks[:, None]
        weights = np.atleast_1d(np.asarray(weights, dtype=float))
        if marks.shape[0] != weights.shape[0]:
            raise ValueError("marks and weights must pair up")
        if np.any(weights <= 0) and weights.size:
            raise ValueError("atom weights must be positive")
        if marks.size and np.any(np.linalg.norm(marks, axis=1) == 0):
            raise ValueError("Levy measure cannot place an atom at the origin")
        if not (0 < small_jump_cutoff <= 1):
            raise ValueError("small_jump_cutoff must lie in (0, 1]")
        if density_part is not None:
            integrand, nodes, qw = density_part
            nodes = np.atleast_1d(np.asarray(nodes, dtype=float))
            if nodes.ndim == 1:
                nodes = nodes[:, None]
            qw = np.asarray(qw, dtype=float)
            if np.any(np.linalg.norm(nodes, axis=1) == 0):
                raise ValueError("quadrature nodes must be nonzero")
            density_part = (integrand, nodes, qw)
        object.__setattr__(self, "marks", marks)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "density_part", density_part)
        object.__setattr__(self, "small_jump_cutoff", float(small_jump_cutoff))

    @classmethod
    def empty(cls, dim_mark: int = 1) -> "LevyMeasure":
        return cls(dim_mark=dim_mark)

    @property
    def dim_mark(self) -> int:
        return self.marks.shape[1]

    def effective(self):
        """All (marks, weights) pairs: declared atoms plus discretized density nodes."""
        if self.density_part is None:
            return self.marks, self.weights
        integrand, nodes, qw = self.density_part
        w = np.array([float(integrand(z)) * float(q) for z, q in zip(nodes, qw)])
        if np.any(w < 0):
            raise ValueError("density integrand must be nonnegative at quadrature nodes")
        keep = w > 0
        return (
            np.concatenate([self.marks, nodes[keep]], axis=0),
            np.concatenate([self.weights, w[keep]]),
        )

    def active(self):
        """(marks, weights) with |z| > small_jump_cutoff: the simulated, finite-activity part."""
        marks, weights = self.effective()
        keep = np.linalg.norm(marks, axis=1) > self.small_jump_cutoff
        return marks[keep], weights[keep]

    def compensation_atoms(self):
        """(marks, weights) with cutoff < |z| <= 1: simulated but compensated in the SDE."""
        marks, weights = self.effective()
        r = np.linalg.norm(marks, axis=1)
        keep = (r > self.small_jump_cutoff) & (r <= 1.0)
        return marks[keep], weights[keep]

    @property
    def total_active_rate(self) -> float:
        return float(self.active()[1].sum())


def levy_integrability(levy: LevyMeasure) -> float:
    """Sum of (1 ^ |z|^2) * w over all atoms and quadrature nodes; must be finite."""
    marks, weights = levy.effective()
    if marks.shape[0] == 0:
        return 0.0
    r2 = np.sum(marks**2, axis=1)
    val = float(np.sum(np.minimum(1.0, r2) * weights))
    if not math.isfinite(val):
        raise UnsupportedModelError("Levy measure fails the (1 ^ |z|^2)-integrability check")
    return val


@dataclass(frozen=True)
class Model:
    """Jump-diffusion model: dX = b dt + sigma dB + compensated/plain jump integrals.

    Jumps below |z| <= 1 enter compensated; ``inverse_jump``, when supplied, is a pair
    (lam, jacdet) with lam(t, x, z) = phi^{-1}(x) - x for the jump map
    phi(x) = x + jump_coeff(t, x, z) and jacdet its Jacobian determinant.
    ``translation_jump`` declares jump_coeff independent of x (inverse auto-derived).
    """

    dim_state: int
    dim_noise: int
    dim_mark: int
    drift: Callable
    dispersion: Callable
    jump_coeff: Callable
    levy: LevyMeasure
    inverse_jump: Optional[tuple] = None
    translation_jump: bool = False
    name: str = "custom"

    def __post_init__(self):
        if self.levy.dim_mark != self.dim_mark:
            raise ValueError("Levy measure mark dimension does not match model")
        if self.translation_jump and self.inverse_jump is None:
            gamma = self.jump_coeff

            def lam(t, x, z):
                return -gamma(t, x, z)

            def jacdet(t, x, z):
                return np.ones(np.shape(np.asarray(x))[:-1]) if np.ndim(x) > 1 else 1.0

            object.__setattr__(self, "inverse_jump", (lam, jacdet))

    def diffusion_matrix(self, t, x) -> Array:
        """a = sigma sigma^T, shape (..., n, n)."""
        s = np.asarray(self.dispersion(t, x), dtype=float)
        return s @ np.swapaxes(s, -1, -2)


def _const_vec(value, n):
    v = np.broadcast_to(np.asarray(value, dtype=float), (n,))

    def f(t, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(v, x.shape[:-1] + (n,)).copy()

    return f


def _const_mat(value, n, m):
    v = np.broadcast_to(np.asarray(value, dtype=float), (n, m)) if m > 0 else np.zeros((n, 0))

    def f(t, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(v, x.shape[:-1] + (n, m)).copy()

    return f


def _identity_jump(t, x, z):
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    return np.broadcast_to(z, np.broadcast_shapes(x.shape, z.shape)).copy()


def _gauss_hermite_atoms(rate: float, mean: float, sd: float, n_nodes: int = 33):
    """Atoms discretizing rate * N(mean, sd^2) by Gauss-Hermite quadrature.

    An origin node (|z| < 1e-12) would violate nu({0}) = 0; it is dropped and the
    remaining weights are rescaled so the total mass is exactly ``rate``.
    """
    u, w = hermgauss(n_nodes)
    z = mean + math.sqrt(2.0) * sd * u
    wts = rate * w / math.sqrt(math.pi)
    keep = np.abs(z) > 1e-12
    z, wts = z[keep], wts[keep]
    wts = wts * (rate / wts.sum())
    return z, wts


def _auto_cutoff(marks: Array) -> float:
    """Largest cutoff below every atom so truncation drops nothing; capped at 1."""
    if marks.shape[0] == 0:
        return 0.5
    r = np.linalg.norm(np.atleast_2d(marks), axis=1)
    return float(min(1.0, 0.5 * r.min())) if r.min() < 2.0 else 1.0


def builtin_model(name: str, params: Optional[dict] = None) -> Model:
    """Reference model families: brownian, poisson, compound_poisson_gaussian,
    jump_diffusion_mixed.

    poisson uses nu = rate * delta_1 with jump_coeff(t, x, z) = z and drift equal to
    the rate, so the compensated equation reduces to a plain Poisson counting process.
    """
    params = dict(params or {})

    def pop(key, default=None):
        if key in params:
            return params.pop(key)
        if default is None:
            raise ValueError(f"builtin model {name!r} requires parameter {key!r}")
        return default

    if name == "brownian":
        sigma = float(pop("sigma", 1.0))
        drift = float(pop("drift", 0.0))
        _reject_extras(name, params)
        return Model(
            dim_state=1, dim_noise=1, dim_mark=1,
            drift=_const_vec(drift, 1),
            dispersion=_const_mat(sigma, 1, 1),
            jump_coeff=_identity_jump,
            levy=LevyMeasure.empty(1),
            translation_jump=True,
            name="brownian",
        )

    if name == "poisson":
        rate = float(pop("rate"))
        if rate <= 0:
            raise ValueError("poisson rate must be positive")
        _reject_extras(name, params)
        levy = LevyMeasure(marks=[[1.0]], weights=[rate], small_jump_cutoff=0.5)
        return Model(
            dim_state=1, dim_noise=0, dim_mark=1,
            drift=_const_vec(rate, 1),
            dispersion=_const_mat(0.0, 1, 0),
            jump_coeff=_identity_jump,
            levy=levy,
            translation_jump=True,
            name="poisson",
        )

    if name == "compound_poisson_gaussian":
        rate = float(pop("rate"))
        jump_sd = float(pop("jump_sd"))
        jump_mean = float(pop("jump_mean", 0.0))
        drift = float(pop("drift", 0.0))
        n_nodes = int(pop("n_nodes", 33))
        _reject_extras(name, params)
        if rate <= 0 or jump_sd <= 0:
            raise ValueError("rate and jump_sd must be positive")
        z, w = _gauss_hermite_atoms(rate, jump_mean, jump_sd, n_nodes)
        cutoff = _auto_cutoff(z[:, None])
        levy = LevyMeasure(marks=z[:, None], weights=w, small_jump_cutoff=cutoff)
        # Declared drift is the observed linear trend; the SDE's b must pre-add the
        # small-jump compensator so that compensation cancels it again.
        comp = float(np.sum(w[(np.abs(z) > cutoff) & (np.abs(z) <= 1.0)] * z[(np.abs(z) > cutoff) & (np.abs(z) <= 1.0)]))
        return Model(
            dim_state=1, dim_noise=0, dim_mark=1,
            drift=_const_vec(drift + comp, 1),
            dispersion=_const_mat(0.0, 1, 0),
            jump_coeff=_identity_jump,
            levy=levy,
            translation_jump=True,
            name="compound_poisson_gaussian",
        )

    if name == "jump_diffusion_mixed":
        rate = float(pop("rate"))
        jump_sd = float(pop("jump_sd"))
        jump_mean = float(pop("jump_mean", 0.0))
        drift = float(pop("drift", 0.0))
        sigma = float(pop("sigma", 1.0))
        n_nodes = int(pop("n_nodes", 33))
        _reject_extras(name, params)
        z, w = _gauss_hermite_atoms(rate, jump_mean, jump_sd, n_nodes)
        cutoff = _auto_cutoff(z[:, None])
        levy = LevyMeasure(marks=z[:, None], weights=w, small_jump_cutoff=cutoff)
        comp = float(np.sum(w[(np.abs(z) > cutoff) & (np.abs(z) <= 1.0)] * z[(np.abs(z) > cutoff) & (np.abs(z) <= 1.0)]))
        return Model(
            dim_state=1, dim_noise=1, dim_mark=1,
            drift=_const_vec(drift + comp, 1),
            dispersion=_const_mat(sigma, 1, 1),
            jump_coeff=_identity_jump,
            levy=levy,
            translation_jump=True,
            name="jump_diffusion_mixed",
        )

    raise ValueError(f"unknown builtin model {name!r}")


def _reject_extras(name, params):
    if params:
        raise ValueError(f"unexpected parameters for builtin {name!r}: {sorted(params)}")


def compensator_drift(model: Model, t, x) -> Array:
    """Drift correction -sum_{eps<|z|<=1} jump_coeff(t, x, z) w so that simulating
    uncompensated jumps with drift b + correction realizes the compensated equation.

    ``x`` may be a single state (n,) or a batch (..., n).
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    out = np.zeros_like(xb)
    marks, weights = model.levy.compensation_atoms()
    if not np.all(np.isfinite(weights)) or not math.isfinite(weights.sum()):
        raise UnsupportedModelError("infinite mass on the compensation band {eps<|z|<=1}")
    for z, w in zip(marks, weights):
        out -= w * np.asarray(model.jump_coeff(t, xb, z), dtype=float)
    return out[0] if single else out


@dataclass
class ClauseResult:
    name: str
    passed: bool
    witness: Optional[tuple] = None
    detail: str = ""


@dataclass
class ValidationReport:
    clauses: list
    gamma_ratio_sup: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.clauses)

    def failures(self):
        return [c for c in self.clauses if not c.passed]


def validate_coefficients(model: Model, sample_box: Grid, t_samples: Sequence[float],
                          n_space_samples: int = 200, seed: int = 0) -> ValidationReport:
    """Sample-based checks of the standing coefficient assumptions.

    Checks, per sampled (t, x): drift/dispersion finite; sigma sigma^T symmetric PSD;
    jump_coeff vanishes at z = 0; sup_z |jump_coeff|/(1 ^ |z|) finite (sampled over
    the measure's marks plus random unit-ball marks). Reports a witness point on
    failure; callable evaluation errors become failing clauses with the offending
    (t, x, z).
    """
    rng = np.random.default_rng(seed)
    n = model.dim_state
    lo, hi = sample_box.lower, sample_box.upper
    if lo.size != n:
        raise ValueError("sample box dimension does not match model state dimension")
    xs = rng.uniform(lo, hi, size=(n_space_samples, n))
    ts = list(t_samples)

    clauses = []
    ratio_sup = 0.0

    marks, _ = model.levy.effective()
    zs = [np.zeros(model.dim_mark)] + [m for m in marks]
    zs += [rng.uniform(-1, 1, size=model.dim_mark) for _ in range(8)]
    zs = [z for z in zs if True]

    def check(name, fn):
        try:
            witness = fn()
        except Exception as exc:  # surfaced as a diagnostic, not a crash
            clauses.append(ClauseResult(name, False, None, f"evaluation failure: {exc!r}"))
            return
        if witness is None:
            clauses.append(ClauseResult(name, True))
        else:
            clauses.append(ClauseResult(name, False, witness[0], witness[1]))

    def drift_clause():
        for t in ts:
            b = np.asarray(model.drift(t, xs), dtype=float)
            if b.shape != xs.shape:
                return (t, None), f"drift returned shape {b.shape}, expected {xs.shape}"
            if not np.all(np.isfinite(b)):
                i = int(np.argwhere(~np.isfinite(b))[0][0])
                return (t, xs[i]), "non-finite drift value"
        return None

    def dispersion_clause():
        for t in ts:
            s = np.asarray(model.dispersion(t, xs), dtype=float)
            if s.shape != xs.shape[:-1] + (n, model.dim_noise):
                return (t, None), f"dispersion returned shape {s.shape}"
            if not np.all(np.isfinite(s)):
                i = int(np.argwhere(~np.isfinite(s))[0][0])
                return (t, xs[i]), "non-finite dispersion value"
        return None

    def psd_clause():
        for t in ts:
            a = model.diffusion_matrix(t, xs)
            if not np.allclose(a, np.swapaxes(a, -1, -2), atol=1e-10):
                return (t, None), "sigma sigma^T not symmetric"
            eig = np.linalg.eigvalsh(a)
            if np.min(eig) < -1e-10:
                i = int(np.argwhere(eig < -1e-10)[0][0])
                return (t, xs[i]), f"negative eigenvalue {np.min(eig):.3e}"
        return None

    def zero_mark_clause():
        z0 = np.zeros(model.dim_mark)
        for t in ts:
            g = np.asarray(model.jump_coeff(t, xs, z0), dtype=float)
            if np.max(np.abs(g)) > 1e-12:
                i = int(np.argmax(np.max(np.abs(g), axis=-1)))
                return (t, xs[i], z0), f"jump_coeff(t,x,0) = {g[i]}"
        return None

    def ratio_clause():
        nonlocal ratio_sup
        for t in ts:
            for z in zs:
                r = np.linalg.norm(z)
                if r == 0:
                    continue
                g = np.asarray(model.jump_coeff(t, xs, z), dtype=float)
                ratio = np.linalg.norm(g, axis=-1) / min(1.0, r)
                if not np.all(np.isfinite(ratio)):
                    i = int(np.argwhere(~np.isfinite(ratio))[0][0])
                    return (t, xs[i], z), "non-finite growth ratio"
                ratio_sup = max(ratio_sup, float(ratio.max()))
        return None

    def levy_clause():
        levy_integrability(model.levy)
        return None

    def inverse_clause():
        if model.inverse_jump is None:
            return None
        lam, _ = model.inverse_jump
        for t in ts[:2]:
            for z in zs[1:4]:
                if np.linalg.norm(z) == 0:
                    continue
                fwd = xs + np.asarray(model.jump_coeff(t, xs, z), dtype=float)
                back = fwd + np.asarray(lam(t, fwd, z), dtype=float)
                err = np.max(np.abs(back - xs))
                if err > 1e-9:
                    i = int(np.argmax(np.max(np.abs(back - xs), axis=-1)))
                    return (t, xs[i], z), f"round-trip error {err:.3e}"
        return None

    check("drift measurable and locally bounded (finite on samples)", drift_clause)
    check("dispersion measurable and locally bounded (finite on samples)", dispersion_clause)
    check("sigma sigma^T symmetric positive semidefinite", psd_clause)
    check("jump_coeff(t, x, 0) = 0", zero_mark_clause)
    check("sup_z |jump_coeff|/(1 ^ |z|) locally bounded", ratio_clause)
    check("Levy measure integrable with no origin atom", levy_clause)
    check("inverse jump map round-trip", inverse_clause)

    return ValidationReport(clauses=clauses, gamma_ratio_sup=ratio_sup)
