"""Derivative of the solution functional and the nondegeneracy estimates.

The discrete solution u(t, x) is a smooth function of the Brownian
increments dW^i_j attached to the orthonormal system, and its derivative
field

    Du(t,x)[i, j] = d u(t,x) / d dW^i_j

solves the linear recursion obtained by differentiating the solver sweep:
a birth term (the kernel window against sigma(u) in the direction's mode
field) plus the same convolution recursion driven by sigma'(u) Du dM and
b'(u) Du.  Because the recursion is differentiated exactly, the chain rule
and the commutation of the derivative with both integrals hold by
construction, and the finite-difference quotient along any direction
converges to <Du, h> with first order (exactly, in the additive case).

The nondegeneracy report estimates the decomposition

    |Du(t,x)|^2 >= 1/2 sigma^2 J(delta) - I(t,x; delta)

for constant sigma, where I is the squared norm of the drift-feedback
remainder over the window [t - delta, t]; the ratio E[I]/(J(delta)
Jbar(delta)) stays bounded as delta shrinks and the probability of a small
derivative norm collapses, which is the executable content of the density
criterion.
"""

from __future__ import annotations

import dataclasses
import json
import math
from typing import Callable, Optional, Sequence

import numpy as np

from .kernels import hnorm_sq_profile, jbar_delta
from .noise import ConsBasis, NoiseIncrements, cons_basis, realize_field_increment, sample_increments
from .solver import (Coefficients, ShiftDirection, SolutionField, SolverConfig,
                     WavePropagator, drift_weight, solve_mild, solve_shifted)
from . import stats
from .integrals import step_index


# ---------------------------------------------------------------------------
# derivative containers
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class MalliavinField:
    """Derivative coefficients over (basis element, time slab).

    coeffs has shape (batch...,) + (n_basis, n_steps) + space where space is
    () for a single target point or the lattice shape when the derivative
    was evaluated at every x.  The induced squared norm is
    dt * sum_{i,j} coeffs^2; coefficients on slabs at or after the target
    time vanish identically (the solution is adapted).
    """

    coeffs: np.ndarray
    dt: float
    target_step: int
    space_dims: int = 0
    direct: Optional[np.ndarray] = None   # birth-only part, same shape

    def _sum_axes(self):
        return (-2 - self.space_dims, -1 - self.space_dims)

    def norm_sq(self):
        out = self.dt * np.sum(self.coeffs**2, axis=self._sum_axes())
        return float(out) if np.ndim(out) == 0 else out

    def feedback(self) -> np.ndarray:
        if self.direct is None:
            raise ValueError("no direct/feedback split available")
        return self.coeffs - self.direct

    def remainder_norm_sq(self, delta: float):
        """dt-weighted squared norm of the feedback part over [t - delta, t]."""
        k = int(round(delta / self.dt))
        if abs(k - delta / self.dt) > 1e-9 or not 1 <= k <= self.target_step:
            raise ValueError("delta must be a grid multiple within ]0, t]")
        fb = self.feedback()
        steps_ax = self._sum_axes()[1]
        sl = [slice(None)] * fb.ndim
        sl[steps_ax] = slice(self.target_step - k, self.target_step)
        out = self.dt * np.sum(fb[tuple(sl)]**2, axis=self._sum_axes())
        return float(out) if np.ndim(out) == 0 else out

    def pair_with(self, direction: ShiftDirection):
        """<Du(t,x), h>_{H_T} for a direction with the same slab layout."""
        h = direction.coeffs
        shape = h.shape + (1,) * self.space_dims
        out = self.dt * np.sum(self.coeffs * h.reshape(shape), axis=self._sum_axes())
        return float(out) if np.ndim(out) == 0 else out


@dataclasses.dataclass
class DirectionalDerivative:
    """D^h u rows on the full space-time lattice for one direction h."""

    rows: np.ndarray      # (batch...,) + (n_steps+1,) + grid.shape
    direction: ShiftDirection
    dt: float

    def at(self, t: float, x_idx=None):
        i = step_index(t, self.dt, self.rows.shape[-1 - self.direction.cons.grid.d] - 1)
        row = np.take(self.rows, i, axis=-1 - self.direction.cons.grid.d)
        if x_idx is None:
            return row
        return row[(Ellipsis,) + tuple(x_idx)]


# ---------------------------------------------------------------------------
# directional derivative
# ---------------------------------------------------------------------------

def solve_derivative_directional(cfg: SolverConfig, coeffs: Coefficients,
                                 noise: NoiseIncrements, u: SolutionField,
                                 direction: ShiftDirection) -> DirectionalDerivative:
    """Solve the linearized recursion along a fixed Cameron-Martin direction.

    The slab source is dt sigma(u_j) Y_j (the direction drift) plus the
    feedback sigma'(u_j) D_j dM_j + dt c_j b'(u_j) D_j; the solve costs the
    same as one forward pass.
    """
    grid, dt = cfg.grid, cfg.dt
    y_fields = direction.filtered_fields()
    prop = WavePropagator(grid, dt, cfg.n_steps, cfg.mollifier, cfg.guard)
    sig_lin = coeffs.sigma_constant

    def emit(j, d_j):
        u_j = np.take(u.u, j, axis=-1 - grid.d)
        v = dt * coeffs.sigma(u_j) * y_fields[j]
        if not sig_lin:
            dm = realize_field_increment(noise, j, cfg.measure, grid)
            v = v + coeffs.sigma_prime(u_j) * d_j * dm
        if not coeffs.b_is_zero:
            v = v + (dt * drift_weight(j)) * coeffs.b_prime(u_j) * d_j
        return v

    rows = prop.run(emit, batch_shape=noise.batch_shape, collect="all")
    return DirectionalDerivative(rows, direction, dt)


# ---------------------------------------------------------------------------
# full derivative field over all (basis, slab) directions
# ---------------------------------------------------------------------------

def _expand(a: np.ndarray, extra: int, d: int) -> np.ndarray:
    """Insert `extra` broadcast axes before the last d lattice axes."""
    for _ in range(extra):
        a = np.expand_dims(a, axis=-1 - d)
    return a


def solve_derivative_full(cfg: SolverConfig, coeffs: Coefficients,
                          noise: NoiseIncrements, u: SolutionField, t: float,
                          x_idx: Optional[tuple] = None,
                          cons: Optional[ConsBasis] = None,
                          with_direct: bool = False,
                          max_directions: int = 200_000) -> MalliavinField:
    """Derivative with respect to every Brownian coordinate, batched.

    All (basis element, birth slab) directions propagate through one sweep
    of the recursion: direction (i0, j0) is activated at slab j0 with the
    birth source sigma(u_{j0}) m_{i0}, where m_{i0} is the mode field of the
    basis element, and all directions share the per-step FFTs.  With
    with_direct=True a second, birth-only sweep provides the drift-feedback
    split used by the nondegeneracy estimates.
    """
    grid, dt = cfg.grid, cfg.dt
    if cons is None:
        cons = cons_basis(grid, cfg.measure)
    i_t = step_index(t, dt, cfg.n_steps)
    n_dir = cons.n_basis * i_t
    if n_dir > max_directions:
        raise MemoryError(f"{n_dir} derivative directions exceed the budget {max_directions}")
    m_fields = cons.direction_fields()          # (n_basis,) + shape
    batch = noise.batch_shape
    dir_shape = (cons.n_basis, i_t)

    def make_emit(feedback: bool):
        def emit(j, d_j):
            u_j = np.take(u.u, j, axis=-1 - grid.d)
            if feedback:
                sp = np.zeros_like(u_j)
                if not coeffs.sigma_constant:
                    dm = realize_field_increment(noise, j, cfg.measure, grid)
                    sp = coeffs.sigma_prime(u_j) * dm
                if not coeffs.b_is_zero:
                    sp = sp + (dt * drift_weight(j)) * coeffs.b_prime(u_j)
                v = _expand(sp, 2, grid.d) * d_j
            else:
                v = np.zeros_like(d_j)
            if j < i_t:
                sig = coeffs.sigma(u_j)
                v[(Ellipsis, slice(None), j) + (slice(None),) * grid.d] += (
                    _expand(sig, 1, grid.d) * m_fields)
            return v
        return emit

    prop = WavePropagator(grid, dt, cfg.n_steps, cfg.mollifier, cfg.guard)
    has_feedback = (not coeffs.sigma_constant) or (not coeffs.b_is_zero)
    full = prop.run(make_emit(has_feedback), batch_shape=batch + dir_shape,
                    collect="target", target_step=i_t)
    direct = None
    if with_direct:
        if has_feedback:
            direct = prop.run(make_emit(False), batch_shape=batch + dir_shape,
                              collect="target", target_step=i_t)
        else:
            direct = full
    def pick(arr):
        if x_idx is None:
            return arr
        return arr[(Ellipsis,) + tuple(x_idx)]
    space = grid.d if x_idx is None else 0
    return MalliavinField(pick(full), dt, i_t, space,
                          None if direct is None else pick(direct))


def solve_derivative_mollified(cfg: SolverConfig, coeffs: Coefficients,
                               noise: NoiseIncrements, u_n: SolutionField, n: float,
                               t: float, x_idx: Optional[tuple] = None,
                               **kw) -> MalliavinField:
    """Derivative of the mollified solution: same recursion under Fzeta_n."""
    from .kernels import MollifierFamily
    family = cfg.mollifier if cfg.mollifier is not None else MollifierFamily("band-limit", 1)
    cfg_n = cfg.with_mollifier(family.with_index(n))
    return solve_derivative_full(cfg_n, coeffs, noise, u_n, t, x_idx, **kw)


# ---------------------------------------------------------------------------
# finite-difference validation
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class FdCheckReport:
    eps: np.ndarray
    errors: np.ndarray
    slope: float
    points_used: int
    derivative_value: float
    all_terms: bool
    exact_to_rounding: bool

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d["eps"] = list(map(float, self.eps))
        d["errors"] = list(map(float, self.errors))
        return json.dumps(d, indent=2, sort_keys=True)


def fd_check(cfg: SolverConfig, coeffs: Coefficients, noise: NoiseIncrements,
             h: ShiftDirection, eps_schedule: Sequence[float], t: float,
             x_idx: tuple, all_terms: bool = True) -> FdCheckReport:
    """Compare (u^{eps h} - u)/eps against <Du(t,x), h> over the schedule.

    The shifted solves reuse the same noise path; with smooth coefficients
    the error decays with slope one in eps, and in the additive linear case
    it sits at the rounding floor for every eps.
    """
    base = solve_mild(cfg, coeffs, noise)
    dd = solve_derivative_directional(cfg, coeffs, noise, base, h)
    deriv = float(dd.at(t, x_idx))
    u0 = float(base.at(t, x_idx))
    eps_schedule = np.asarray(list(eps_schedule), dtype=float)
    errors = np.empty_like(eps_schedule)
    for i, eps in enumerate(eps_schedule):
        ue = solve_shifted(cfg, coeffs, noise, h.scaled(eps), all_terms=all_terms, base=base)
        errors[i] = abs((float(ue.at(t, x_idx)) - u0) / eps - deriv)
    scale = max(1.0, abs(deriv), abs(u0))
    floor = 1e-11 * scale
    exact = bool(np.all(errors <= floor))
    slope, used = stats.fit_loglog_slope(eps_schedule, errors, floor=floor)
    return FdCheckReport(eps_schedule, errors, slope, used, deriv, all_terms, exact)


# ---------------------------------------------------------------------------
# nondegeneracy estimates
# ---------------------------------------------------------------------------

def window_j_delta(cfg: SolverConfig, t: float, delta: float) -> float:
    """J_n over [t - delta, t] with the solver's slab rule (dt sum over slabs)."""
    i_t = step_index(t, cfg.dt, cfg.n_steps)
    k = int(round(delta / cfg.dt))
    if abs(k - delta / cfg.dt) > 1e-9 or not 1 <= k <= i_t:
        raise ValueError("delta must be a grid multiple within ]0, t]")
    kern = _wave_kernel(cfg)
    s_nodes = t - cfg.dt * np.arange(i_t - k, i_t)
    vals = hnorm_sq_profile(kern, cfg.measure, s_nodes, cfg.mollifier)
    return float(cfg.dt * np.sum(vals))


def _wave_kernel(cfg: SolverConfig):
    from .kernels import WaveKernelFT
    return WaveKernelFT(cfg.grid.d)


def derivative_norm_samples(cfg: SolverConfig, coeffs: Coefficients, seed: int,
                            replicas: int, t: float, x_idx: tuple,
                            batch: int = 32, with_remainders: bool = False,
                            delta_schedule: Sequence[float] = (),
                            replica_offset: int = 0):
    """Per-replica |Du(t,x)|^2 (and window remainders I(t,x;delta)).

    Replicas are generated from their own keyed streams, so any partition
    into batches or workers reproduces the same numbers in the same order.
    """
    norms = np.empty(replicas)
    values = np.empty(replicas)
    rems = np.empty((len(delta_schedule), replicas)) if with_remainders else None
    done = 0
    while done < replicas:
        b = min(batch, replicas - done)
        reps = np.arange(replica_offset + done, replica_offset + done + b)
        noise = sample_increments(cfg.grid, cfg.measure, cfg.n_steps, cfg.dt, seed, reps)
        u = solve_mild(cfg, coeffs, noise)
        mf = solve_derivative_full(cfg, coeffs, noise, u, t, x_idx,
                                   with_direct=with_remainders)
        norms[done:done + b] = mf.norm_sq()
        values[done:done + b] = u.at(t, x_idx)
        if with_remainders:
            for q, delta in enumerate(delta_schedule):
                rems[q, done:done + b] = mf.remainder_norm_sq(delta)
        done += b
    return (norms, values, rems) if with_remainders else (norms, values)


@dataclasses.dataclass
class NondegeneracyReport:
    t: float
    x_idx: tuple
    replicas: int
    sigma: float
    delta: list
    j_window: list            # J_n over [t-delta, t], slab rule
    jbar: list                # closed-form time integral of the sup modulus
    mean_remainder: list      # E[I(t,x;delta)]
    se_remainder: list
    ratio: list               # E[I] / (J * Jbar)
    ratio_se: list
    prob_small: list          # P[|Du|^2 < sigma^2 J(delta)/3]
    mean_norm_sq: float
    se_norm_sq: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)


def nondegeneracy(cfg: SolverConfig, coeffs: Coefficients, seed: int, replicas: int,
                  t: float, x_idx: tuple, delta_schedule: Sequence[float],
                  batch: int = 32) -> NondegeneracyReport:
    """Estimate the derivative-norm lower bound over a window schedule.

    Requires constant sigma (the density criterion's regime): the first
    term of the derivative is then deterministic with squared norm
    sigma^2 J_n, and I(t,x;delta) collects only the drift feedback.
    """
    if not coeffs.sigma_constant:
        raise ValueError("nondegeneracy estimates require constant sigma")
    if not 0 < t <= cfg.T:
        raise ValueError("target time must be in ]0, T]")
    deltas = list(delta_schedule)
    if any(d > t for d in deltas):
        raise ValueError("delta exceeds the target time")
    sigma = coeffs.sigma_value
    kern = _wave_kernel(cfg)
    norms, _, rems = derivative_norm_samples(
        cfg, coeffs, seed, replicas, t, x_idx, batch,
        with_remainders=True, delta_schedule=deltas)
    j_win, jbar, mean_r, se_r, ratio, ratio_se, prob = [], [], [], [], [], [], []
    for q, delta in enumerate(deltas):
        jw = window_j_delta(cfg, t, delta)
        jb = jbar_delta(delta, kern)
        m, se = stats.mean_se(rems[q])
        j_win.append(jw)
        jbar.append(jb)
        mean_r.append(float(m))
        se_r.append(float(se))
        ratio.append(float(m / (jw * jb)))
        ratio_se.append(float(se / (jw * jb)))
        prob.append(float(np.mean(norms < sigma**2 * jw / 3.0)))
    mn, mse = stats.mean_se(norms)
    return NondegeneracyReport(t, tuple(x_idx), replicas, sigma, deltas, j_win, jbar,
                               mean_r, se_r, ratio, ratio_se, prob,
                               float(mn), float(mse))


# ---------------------------------------------------------------------------
# stationarity of derivative functionals
# ---------------------------------------------------------------------------

def stationarity_check_DBu(cfg: SolverConfig, coeffs: Coefficients, seed: int,
                           replicas: int, t: float,
                           B: Callable, B_prime: Callable,
                           batch: int = 16, alpha: float = 0.01,
                           bound_check_points: int = 64) -> stats.StationarityReport:
    """Translation invariance of E<D(B(u(t,x))), D(B(u(t,x+y)))> across x.

    The chain rule gives D(B(u(t,x))) = B'(u(t,x)) Du(t,x) pathwise; the
    inner products are aggregated per mode-pair subspace of the orthonormal
    system (the pair sums are the basis-free projections; a single
    trigonometric element carries the phase of its mode and is not itself
    translation invariant).  The z statistics are compared against a
    familywise threshold.
    """
    grid, dt = cfg.grid, cfg.dt
    cons = cons_basis(grid, cfg.measure)
    shifts = stats.all_lattice_shifts(grid)
    i_t = step_index(t, dt, cfg.n_steps)
    # group basis elements into pair subspaces: const alone, then (cos, sin)
    groups = []
    pos = 0
    if cons.w0 > 0:
        groups.append([0])
        pos = 1
    for p in range(cons.n_pairs):
        groups.append([pos + 2 * p, pos + 2 * p + 1])
    samples = []
    done = 0
    # spot check that B' is bounded on sampled field values
    probe = np.linspace(-6, 6, bound_check_points)
    if not np.all(np.isfinite(B_prime(probe))):
        raise ValueError("B' is not finite on the probed range")
    while done < replicas:
        b = min(batch, replicas - done)
        reps = np.arange(done, done + b)
        noise = sample_increments(grid, cfg.measure, cfg.n_steps, dt, seed, reps)
        u = solve_mild(cfg, coeffs, noise)
        mf = solve_derivative_full(cfg, coeffs, noise, u, t, x_idx=None, cons=cons)
        u_t = u.at(t)                             # (b,) + shape
        dbu = _expand(B_prime(u_t), 2, grid.d) * mf.coeffs   # (b, n_basis, i_t*, shape)
        per_group = []
        for g in groups:
            block = dbu[:, g]                     # (b, |g|, steps, shape)
            per_group.append(stats.pair_products(block, grid.d, shifts) * dt)
        aggregate = stats.pair_products(dbu, grid.d, shifts) * dt
        # cases axis: groups then aggregate -> (b, n_cases, n_shifts, n_pos)
        stacked = np.stack(per_group + [aggregate], axis=1)
        samples.append(stacked)
        done += b
    samples = np.concatenate(samples, axis=0)
    return stats.stationarity_report(samples, alpha=alpha)


def chain_rule_gap(cfg: SolverConfig, coeffs: Coefficients, noise: NoiseIncrements,
                   t: float, x_idx: tuple, B_prime: Callable,
                   direction: ShiftDirection) -> float:
    """Pathwise gap in the chain rule <D(B(u)), h> = B'(u(t,x)) <Du, h>.

    The left side assembles D(B(u)) = B'(u) Du from the full derivative
    field and pairs it with the direction; the right side runs the single
    directional recursion.  Both sides are the same derivative computed
    along independent code paths, so the gap measures only rounding.
    """
    u = solve_mild(cfg, coeffs, noise)
    mf = solve_derivative_full(cfg, coeffs, noise, u, t, x_idx)
    bprime_val = float(B_prime(u.at(t, x_idx)))
    lhs = bprime_val * mf.pair_with(direction)
    dd = solve_derivative_directional(cfg, coeffs, noise, u, direction)
    rhs = bprime_val * float(dd.at(t, x_idx))
    return abs(lhs - rhs)
