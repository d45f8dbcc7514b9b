"""Mild-equation solver for the stochastic wave equation on the torus.

The causal recursion

    u(t_i, .) = sum_{j<i} Conv[G_n(t_i - t_j)]( sigma(u(t_j,.)) DM_j )(.)
              + sum_{j<i} dt c_j Conv[G_n(t_i - t_j)]( b(u(t_j,.)) )(.)

(left endpoint for the stochastic term, trapezoid weights c_j for the
drift) is evaluated with two per-mode accumulators via the angle identity
sin(2 pi (t_i - t_j) r) = sin(2 pi t_i r) cos(2 pi t_j r)
                        - cos(2 pi t_i r) sin(2 pi t_j r),
which makes the full time sweep cost one FFT pair per step instead of a
fresh convolution sum per output time.

The shifted equation adds the drift term
dt * <G_n(t_i - t_j, x - *) sigma(., *), h(t_j)>_H, realized as a
convolution against the measure-filtered direction field; with shift zero
it reproduces the plain solve bit for bit.  The `all_terms` variant drives
every coefficient with the shifted field itself and is the discrete
translation of the solution along the direction, which is what the
finite-difference derivative checks differentiate.
"""

from __future__ import annotations

import dataclasses
import struct
from typing import Callable, Optional, Sequence

import numpy as np

from .kernels import MollifierFamily, eval_wave_ft, mollifier_lattice
from .noise import (ConsBasis, DiscreteSpectralMeasure, NoiseIncrements,
                    TorusGrid, realize_field_increment)

TWO_PI = 2.0 * np.pi


class SolverBlowupError(RuntimeError):
    """Field magnitude exceeded the guard threshold; reports the step."""

    def __init__(self, step, magnitude):
        super().__init__(f"field blew up at step {step}: |u| = {magnitude:.3e}")
        self.step = step


# ---------------------------------------------------------------------------
# coefficients
# ---------------------------------------------------------------------------

def _zero(v):
    return np.zeros_like(v)


def _one_prime_of_linear(lam):
    def deriv(v):
        return np.full_like(v, lam)
    return deriv


@dataclasses.dataclass
class Coefficients:
    """Scalar coefficients sigma, b with derivative evaluators."""

    sigma: Callable
    sigma_prime: Callable
    b: Callable
    b_prime: Callable
    sigma_constant: bool = False
    sigma_value: float = 0.0      # meaningful when sigma_constant
    b_is_zero: bool = False
    names: tuple = ("custom", "custom")

    def spot_check_derivatives(self, points=None, h: float = 1e-5, tol: float = 1e-3) -> None:
        """Central finite differences must agree with the evaluators."""
        if points is None:
            points = np.array([-1.3, -0.2, 0.0, 0.4, 1.7])
        for f, fp, name in ((self.sigma, self.sigma_prime, "sigma"),
                            (self.b, self.b_prime, "b")):
            fd = (f(points + h) - f(points - h)) / (2.0 * h)
            if np.max(np.abs(fd - fp(points))) > tol * max(1.0, np.max(np.abs(fp(points)))):
                raise ValueError(f"derivative evaluator of {name} disagrees with finite differences")


def make_coefficient(spec) -> tuple:
    """One coefficient from a registry spec: name or (name, param) or table dict."""
    if isinstance(spec, str):
        name, param = spec, None
    elif isinstance(spec, dict):
        name, param = spec["name"], spec.get("param")
    else:
        name, param = spec
    if name == "zero":
        return _zero, _zero, True, 0.0
    if name == "const":
        c = float(1.0 if param is None else param)

        def const_fn(v, c=c):
            return np.full_like(np.asarray(v, dtype=float), c)
        return const_fn, _zero, True, c
    if name == "linear":
        lam = float(1.0 if param is None else param)

        def lin_fn(v, lam=lam):
            return lam * np.asarray(v, dtype=float)
        return lin_fn, _one_prime_of_linear(lam), False, 0.0
    if name == "sin":
        return np.sin, np.cos, False, 0.0
    if name == "table":
        xs = np.asarray(param["x"], dtype=float)
        ys = np.asarray(param["y"], dtype=float)
        slopes = np.gradient(ys, xs)

        def tab_fn(v, xs=xs, ys=ys):
            return np.interp(v, xs, ys)

        def tab_prime(v, xs=xs, slopes=slopes):
            return np.interp(v, xs, slopes)
        return tab_fn, tab_prime, False, 0.0
    raise ValueError(f"unknown coefficient {name!r}; registry: zero, const, linear, sin, table")


def coefficients(sigma_spec="const", b_spec="zero") -> Coefficients:
    s, sp, s_const, s_val = make_coefficient(sigma_spec)
    b, bp, b_const, b_val = make_coefficient(b_spec)
    return Coefficients(s, sp, b, bp, sigma_constant=s_const, sigma_value=s_val,
                        b_is_zero=(b_const and b_val == 0.0),
                        names=(str(sigma_spec), str(b_spec)))


# ---------------------------------------------------------------------------
# configuration and solution container
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class SolverConfig:
    grid: TorusGrid
    measure: DiscreteSpectralMeasure
    T: float
    n_steps: int
    mollifier: Optional[MollifierFamily] = None
    scheme: str = "recursion"          # or "picard"
    picard_depth: int = 1
    shifted_all_terms: bool = False
    guard: float = 1e12

    def __post_init__(self):
        if self.T <= 0 or self.n_steps < 1:
            raise ValueError("need T > 0 and n_steps >= 1")
        if self.scheme not in ("recursion", "picard"):
            raise ValueError("scheme must be 'recursion' or 'picard'")
        if self.scheme == "picard" and self.picard_depth < 1:
            raise ValueError("picard depth must be >= 1")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def with_mollifier(self, mollifier) -> "SolverConfig":
        return dataclasses.replace(self, mollifier=mollifier)


@dataclasses.dataclass
class SolutionField:
    """u(t_i, z_m) for one noise path (or a replica batch on leading axes)."""

    u: np.ndarray             # (..., n_steps+1) + grid.shape
    config: SolverConfig
    seed: int
    replica: object

    def at(self, t: float, x_idx: Optional[tuple] = None):
        from .integrals import step_index
        i = step_index(t, self.config.dt, self.config.n_steps)
        row = np.take(self.u, i, axis=-1 - self.config.grid.d)
        if x_idx is None:
            return row
        return row[(Ellipsis,) + tuple(x_idx)]

    def rows(self) -> np.ndarray:
        return self.u


# ---------------------------------------------------------------------------
# propagator
# ---------------------------------------------------------------------------

class WavePropagator:
    """Two-accumulator sweep of the mollified wave convolution recursion."""

    def __init__(self, grid: TorusGrid, dt: float, n_steps: int,
                 mollifier: Optional[MollifierFamily] = None, guard: float = 1e12):
        self.grid = grid
        self.dt = dt
        self.n_steps = n_steps
        self.guard = guard
        r = grid.xi_norm
        t_nodes = np.arange(n_steps + 1) * dt
        # cos(2 pi t_i r) and sin(2 pi t_i r)/(2 pi r) on the mode lattice
        self.cos_t = np.cos(TWO_PI * t_nodes[:, None].reshape((-1,) + (1,) * grid.d) * r)
        self.sinq_t = np.stack([eval_wave_ft(ti, r) for ti in t_nodes])
        self.zeta = mollifier_lattice(mollifier, grid)
        self.axes = tuple(range(-grid.d, 0))

    def run(self, emit: Callable[[int, np.ndarray], np.ndarray],
            batch_shape: tuple = (), collect: str = "all",
            target_step: Optional[int] = None):
        """Sweep the recursion; emit(j, u_j) returns the slab-j source field.

        collect='all' returns every row, 'last' only the final row,
        'target' only the row at target_step.
        """
        shape = batch_shape + self.grid.shape
        u = np.zeros(shape)
        P = np.zeros(shape, dtype=complex)
        Q = np.zeros(shape, dtype=complex)
        rows = [u] if collect == "all" else None
        out = None
        last = self.n_steps if target_step is None or collect != "target" else target_step
        for i in range(1, last + 1):
            v = emit(i - 1, u)
            vh = np.fft.fftn(v, axes=self.axes)
            P += self.cos_t[i - 1] * vh
            Q += self.sinq_t[i - 1] * vh
            u = np.fft.ifftn(self.zeta * (self.sinq_t[i] * P - self.cos_t[i] * Q),
                             axes=self.axes).real
            peak = np.max(np.abs(u))
            if not np.isfinite(peak) or peak > self.guard:
                raise SolverBlowupError(i, peak)
            if collect == "all":
                rows.append(u)
            if collect == "target" and i == last:
                out = u
        if collect == "all":
            return np.stack(rows, axis=max(0, len(batch_shape)))
        if collect == "last":
            return u
        return out


def drift_weight(j: int) -> float:
    """Trapezoid weight of the drift slab j (the upper endpoint has zero kernel)."""
    return 0.5 if j == 0 else 1.0


# ---------------------------------------------------------------------------
# shift directions
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class ShiftDirection:
    """Element of the discrete Cameron-Martin space over (basis, time slab)."""

    cons: ConsBasis
    coeffs: np.ndarray      # (n_basis, n_steps)

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.shape[0] != self.cons.n_basis:
            raise ValueError("direction does not match the basis")
        if not np.all(np.isfinite(self.coeffs)):
            raise ValueError("direction has non-finite entries")

    def norm_ht_sq(self, dt: float) -> float:
        return float(dt * np.sum(self.coeffs**2))

    def scaled(self, c: float) -> "ShiftDirection":
        return ShiftDirection(self.cons, c * self.coeffs)

    def is_zero(self) -> bool:
        return not np.any(self.coeffs)

    def slab_fields(self) -> np.ndarray:
        """H(t_j, .) = sum_i h_i(t_j) e_i, shape (n_steps,) + grid.shape."""
        return self.cons.synthesize(self.coeffs.T)

    def filtered_fields(self) -> np.ndarray:
        """Y(t_j,.) = sum_i h_i(t_j) L^d w_i e_i: the measure-filtered direction.

        Adding dt * sigma(u_j) Y_j to the slab source is the inner-product
        drift of the shifted equation; equivalently the noise translation
        DM_j -> DM_j + dt Y_j.
        """
        scale = self.cons.grid.L**self.cons.grid.d * self.cons.mode_weight
        return self.cons.synthesize((scale[:, None] * self.coeffs).T)


def unit_direction(cons: ConsBasis, n_steps: int, dt: float, rng) -> ShiftDirection:
    """Random direction with unit Cameron-Martin norm."""
    c = rng.standard_normal((cons.n_basis, n_steps))
    c /= np.sqrt(dt * np.sum(c**2))
    return ShiftDirection(cons, c)


def basis_slab_direction(cons: ConsBasis, n_steps: int, basis_index: int,
                         slab: int, value: float = 1.0) -> ShiftDirection:
    c = np.zeros((cons.n_basis, n_steps))
    c[basis_index, slab] = value
    return ShiftDirection(cons, c)


# ---------------------------------------------------------------------------
# solves
# ---------------------------------------------------------------------------

def _source_emitter(cfg: SolverConfig, coeffs: Coefficients, noise: NoiseIncrements,
                    y_fields: Optional[np.ndarray], frozen_rows: Optional[np.ndarray]):
    """Slab source builder shared by the plain and shifted solves.

    With `frozen_rows` the stochastic and drift terms are driven by a fixed
    earlier solution (the shifted equation as written); otherwise they use
    the running field.  `y_fields` adds the direction drift.
    """
    grid, measure, dt = cfg.grid, cfg.measure, cfg.dt

    def emit(j, u_j):
        base = np.take(frozen_rows, j, axis=-1 - grid.d) if frozen_rows is not None else u_j
        dm = realize_field_increment(noise, j, measure, grid)
        v = coeffs.sigma(base) * dm
        if not coeffs.b_is_zero:
            v = v + (dt * drift_weight(j)) * coeffs.b(base)
        if y_fields is not None:
            carrier = u_j if frozen_rows is not None else base
            v = v + dt * coeffs.sigma(carrier) * y_fields[j]
        return v

    return emit


def _picard_rows(cfg: SolverConfig, coeffs: Coefficients, noise: NoiseIncrements,
                 batch_shape: tuple) -> np.ndarray:
    """Picard iteration from zero; the causal recursion is its fixed point."""
    grid = cfg.grid
    rows = np.zeros(batch_shape + (cfg.n_steps + 1,) + grid.shape)
    for _ in range(cfg.picard_depth):
        prev = rows

        def emit(j, _u, prev=prev):
            base = np.take(prev, j, axis=-1 - grid.d)
            dm = realize_field_increment(noise, j, cfg.measure, grid)
            v = coeffs.sigma(base) * dm
            if not coeffs.b_is_zero:
                v = v + (cfg.dt * drift_weight(j)) * coeffs.b(base)
            return v

        prop = WavePropagator(grid, cfg.dt, cfg.n_steps, cfg.mollifier, cfg.guard)
        rows = prop.run(emit, batch_shape=batch_shape, collect="all")
    return rows


def solve_mild(cfg: SolverConfig, coeffs: Coefficients, noise: NoiseIncrements) -> SolutionField:
    """Solve the mild equation along one noise path or a replica batch."""
    if noise.n_steps < cfg.n_steps or noise.dt != cfg.dt:
        raise ValueError("noise increments do not match the solver time grid")
    batch = noise.batch_shape
    if cfg.scheme == "picard":
        rows = _picard_rows(cfg, coeffs, noise, batch)
    else:
        prop = WavePropagator(cfg.grid, cfg.dt, cfg.n_steps, cfg.mollifier, cfg.guard)
        emit = _source_emitter(cfg, coeffs, noise, None, None)
        rows = prop.run(emit, batch_shape=batch, collect="all")
    return SolutionField(rows, cfg, noise.seed, noise.replica)


def solve_shifted(cfg: SolverConfig, coeffs: Coefficients, noise: NoiseIncrements,
                  shift: ShiftDirection, all_terms: Optional[bool] = None,
                  base: Optional[SolutionField] = None) -> SolutionField:
    """Solve the equation shifted along a Cameron-Martin direction.

    With all_terms=False (the equation as written) only the direction drift
    responds to the shifted field; the stochastic and drift integrals are
    driven by the unshifted solution, which is solved first (or passed in).
    With all_terms=True every term is driven by the shifted field, i.e. the
    discrete solution functional composed with the noise translation.
    A zero shift returns exactly the plain solution.
    """
    if all_terms is None:
        all_terms = cfg.shifted_all_terms
    if shift.is_zero():
        y_fields = None
    else:
        y_fields = shift.filtered_fields()
    prop = WavePropagator(cfg.grid, cfg.dt, cfg.n_steps, cfg.mollifier, cfg.guard)
    if all_terms or y_fields is None:
        emit = _source_emitter(cfg, coeffs, noise, y_fields, None)
        rows = prop.run(emit, batch_shape=noise.batch_shape, collect="all")
        return SolutionField(rows, cfg, noise.seed, noise.replica)
    if base is None:
        base = solve_mild(cfg, coeffs, noise)
    emit = _source_emitter(cfg, coeffs, noise, y_fields, base.u)
    rows = prop.run(emit, batch_shape=noise.batch_shape, collect="all")
    return SolutionField(rows, cfg, noise.seed, noise.replica)


def solve_mollified(cfg: SolverConfig, coeffs: Coefficients, noise: NoiseIncrements,
                    n: float) -> SolutionField:
    """Solve with the kernel multiplier of index n from the configured family."""
    if n < 1:
        raise ValueError("mollifier index must be >= 1")
    family = cfg.mollifier if cfg.mollifier is not None else MollifierFamily("band-limit", 1)
    return solve_mild(cfg.with_mollifier(family.with_index(n)), coeffs, noise)


# ---------------------------------------------------------------------------
# Monte Carlo reports over a mollifier schedule
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class MollifierSweep:
    """Second-moment tables over a mollifier schedule, with paired noise."""

    n_schedule: list
    sup_second_moment: np.ndarray      # per n: sup_(t,x) E[u_n^2]
    sup_gap_moment: np.ndarray         # per n: sup_(t,x) E[(u_n - u)^2]
    se_second_moment: np.ndarray       # standard errors at the argmax points
    se_gap_moment: np.ndarray
    replicas: int


def mollifier_sweep(cfg: SolverConfig, coeffs: Coefficients, seed: int, replicas: int,
                    n_schedule: Sequence[float], batch: int = 64,
                    family: Optional[MollifierFamily] = None) -> MollifierSweep:
    """Estimate sup E[u_n^2] and sup E[(u_n - u)^2] over the schedule.

    Each replica pairs every mollified solve with the reference solve on
    the same noise path, so the gap moments are free of cross-path noise.
    """
    from .noise import sample_increments
    if family is None:
        family = cfg.mollifier if cfg.mollifier is not None else MollifierFamily("gaussian", 1)
    n_schedule = list(n_schedule)
    shape = (cfg.n_steps + 1,) + cfg.grid.shape
    acc_sq = np.zeros((len(n_schedule),) + shape)
    acc_4 = np.zeros((len(n_schedule),) + shape)
    acc_gap = np.zeros((len(n_schedule),) + shape)
    acc_gap4 = np.zeros((len(n_schedule),) + shape)
    done = 0
    while done < replicas:
        b = min(batch, replicas - done)
        reps = np.arange(done, done + b)
        noise = sample_increments(cfg.grid, cfg.measure, cfg.n_steps, cfg.dt, seed, reps)
        ref = solve_mild(cfg.with_mollifier(None), coeffs, noise).u
        for i, n in enumerate(n_schedule):
            un = solve_mild(cfg.with_mollifier(family.with_index(n)), coeffs, noise).u
            acc_sq[i] += np.sum(un**2, axis=0)
            acc_4[i] += np.sum(un**4, axis=0)
            gap = (un - ref) ** 2
            acc_gap[i] += np.sum(gap, axis=0)
            acc_gap4[i] += np.sum(gap**2, axis=0)
        done += b
    mean_sq = acc_sq / replicas
    mean_gap = acc_gap / replicas
    sup_sq = np.array([float(np.max(m)) for m in mean_sq])
    sup_gap = np.array([float(np.max(m)) for m in mean_gap])
    se_sq = np.empty(len(n_schedule))
    se_gap = np.empty(len(n_schedule))
    for i in range(len(n_schedule)):
        arg = np.unravel_index(np.argmax(mean_sq[i]), shape)
        var = acc_4[i][arg] / replicas - mean_sq[i][arg] ** 2
        se_sq[i] = np.sqrt(max(var, 0.0) / replicas)
        arg = np.unravel_index(np.argmax(mean_gap[i]), shape)
        var = acc_gap4[i][arg] / replicas - mean_gap[i][arg] ** 2
        se_gap[i] = np.sqrt(max(var, 0.0) / replicas)
    return MollifierSweep(n_schedule, sup_sq, sup_gap, se_sq, se_gap, replicas)


def moment_report(cfg: SolverConfig, coeffs: Coefficients, seed: int, replicas: int,
                  n_schedule: Sequence[float], batch: int = 64,
                  family: Optional[MollifierFamily] = None) -> MollifierSweep:
    """Table of sup_(t,x) E[u_n(t,x)^2] per mollifier index (bounded uniformly in n)."""
    if replicas < 2:
        raise ValueError("need at least two replicas")
    return mollifier_sweep(cfg, coeffs, seed, replicas, n_schedule, batch, family)


def convergence_report(cfg: SolverConfig, coeffs: Coefficients, seed: int, replicas: int,
                       n_schedule: Sequence[float], batch: int = 64,
                       family: Optional[MollifierFamily] = None) -> MollifierSweep:
    """sup_(t,x) E[(u_n - u)^2] along the schedule, paired-path Monte Carlo."""
    return mollifier_sweep(cfg, coeffs, seed, replicas, n_schedule, batch, family)


# ---------------------------------------------------------------------------
# binary persistence of solution fields
# ---------------------------------------------------------------------------

_FIELD_MAGIC = b"SWUF"


def save_field(path, sol: SolutionField) -> None:
    if sol.u.ndim != sol.config.grid.d + 1:
        raise ValueError("persist single-replica fields only")
    grid = sol.config.grid
    with open(path, "wb") as fh:
        fh.write(_FIELD_MAGIC)
        fh.write(struct.pack("<iidiidq", 1, grid.d, grid.L, grid.K,
                             sol.config.n_steps, sol.config.dt, sol.seed))
        fh.write(np.ascontiguousarray(sol.u, dtype="<f8").tobytes())


def load_field(path):
    with open(path, "rb") as fh:
        if fh.read(4) != _FIELD_MAGIC:
            raise ValueError("not a field file")
        version, d, L, K, n_steps, dt, seed = struct.unpack(
            "<iidiidq", fh.read(struct.calcsize("<iidiidq")))
        if version != 1:
            raise ValueError(f"unsupported field file version {version}")
        grid = TorusGrid(d, L, K)
        u = np.frombuffer(fh.read(), dtype="<f8").reshape((n_steps + 1,) + grid.shape)
    return u, dict(d=d, L=L, K=K, n_steps=n_steps, dt=dt, seed=seed)
