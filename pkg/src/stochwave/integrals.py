"""Stochastic and pathwise integrals on the lattice, with their norms.

Three constructions of the stochastic convolution against the martingale
measure are provided and proved equal path by path in the discretization:

  * the Fourier-domain form: per time step, multiply the transformed
    product (integrand x realized noise increment) by the mollified kernel
    transform and invert (cd_integral);
  * the series form over the orthonormal system of the spectral space,
    driven by the attached independent Brownian motions
    (ito_series_integral);
  * the divergence form on elementary processes, X * F(window) minus the
    derivative correction (skorohod_elementary), which composes linearly.

All time integrals follow the causal convention: the integrand on the slab
(t_j, t_{j+1}] is its value at t_j, and a stochastic integral up to a grid
time t uses the increments j < t/dt.
"""

from __future__ import annotations

import dataclasses
import json
import math
from typing import Callable, Optional, Sequence

import numpy as np

from .kernels import MollifierFamily, kernel_ft_lattice, mollifier_lattice
from .noise import (ConsBasis, DiscreteSpectralMeasure, NoiseIncrements,
                    TorusGrid, lattice_ft, realize_field_increment)


def step_index(t: float, dt: float, n_steps: int, endpoint_ok: bool = True) -> int:
    """Index of a grid time; rejects times off the grid."""
    j = t / dt
    if abs(j - round(j)) > 1e-9 * max(1.0, abs(j)):
        raise ValueError(f"time {t} is not on the grid with dt={dt}")
    j = int(round(j))
    top = n_steps if endpoint_ok else n_steps - 1
    if not 0 <= j <= top:
        raise ValueError(f"time {t} outside [0, {n_steps * dt}]")
    return j


# ---------------------------------------------------------------------------
# integrands
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class AdaptedIntegrand:
    """Lattice process Z(t_j, z); row j is the value on the slab (t_j, t_{j+1}].

    Adaptedness is structural: the constructors either take deterministic
    data or evaluate row j from the noise increments strictly before t_j.
    """

    values: np.ndarray        # (n_steps,) + grid.shape
    adapted: bool
    origin: str = "unknown"

    @staticmethod
    def deterministic(values: np.ndarray) -> "AdaptedIntegrand":
        return AdaptedIntegrand(np.asarray(values, dtype=float), True, "deterministic")

    @staticmethod
    def constant(c: float, n_steps: int, grid: TorusGrid) -> "AdaptedIntegrand":
        return AdaptedIntegrand(np.full((n_steps,) + grid.shape, float(c)), True, "constant")

    @staticmethod
    def from_solution(u_rows: np.ndarray, transform: Optional[Callable] = None) -> "AdaptedIntegrand":
        """Rows u(t_0..t_{n_steps-1}); the solution recursion is causal."""
        vals = np.asarray(u_rows, dtype=float)
        if transform is not None:
            vals = transform(vals)
        return AdaptedIntegrand(vals, True, "solution")

    @staticmethod
    def from_causal(fn: Callable[[int, np.ndarray], np.ndarray],
                    noise: NoiseIncrements, measure: DiscreteSpectralMeasure,
                    grid: TorusGrid) -> "AdaptedIntegrand":
        """Row j = fn(j, past) where past holds the realized increments < j."""
        rows = np.empty((noise.n_steps,) + grid.shape)
        past = np.zeros((0,) + grid.shape)
        for j in range(noise.n_steps):
            rows[j] = fn(j, past)
            incr_j = realize_field_increment(noise, j, measure, grid)
            past = np.concatenate([past, incr_j[None]], axis=0)
        return AdaptedIntegrand(rows, True, "causal")


def _integrand_rows(Z, n_steps: int, grid: TorusGrid, require_adapted: bool) -> np.ndarray:
    if isinstance(Z, AdaptedIntegrand):
        if require_adapted and not Z.adapted:
            raise ValueError("integrand is not adapted")
        rows = Z.values
    else:
        if require_adapted:
            raise ValueError("stochastic integration requires an AdaptedIntegrand")
        rows = np.asarray(Z, dtype=float)
    if rows.shape[0] < n_steps or rows.shape[-grid.d:] != grid.shape:
        raise ValueError("integrand rows do not match the time/space grid")
    return rows


# ---------------------------------------------------------------------------
# Fourier-domain stochastic integral
# ---------------------------------------------------------------------------

def cd_integral(kernel, mollifier: Optional[MollifierFamily], Z, noise: NoiseIncrements,
                measure: DiscreteSpectralMeasure, t: float, x_idx: tuple) -> float:
    """Stochastic convolution of the mollified kernel against Z dM at (t, x).

    Per step: pointwise product Z(t_j,.) * DM_j on the lattice, forward FFT,
    multiply by FG(t - t_j) Fzeta_n, accumulate, single inverse FFT, read at
    x.  Equals the series and divergence forms path by path.
    """
    grid = measure.grid
    jt = step_index(t, noise.dt, noise.n_steps)
    rows = _integrand_rows(Z, jt, grid, require_adapted=True)
    zeta = mollifier_lattice(mollifier, grid)
    axes = tuple(range(-grid.d, 0))
    acc = np.zeros(grid.shape, dtype=complex)
    for j in range(jt):
        v = rows[j] * realize_field_increment(noise, j, measure, grid)
        acc += kernel.ft(t - j * noise.dt, grid.xi_norm) * np.fft.fftn(v, axes=axes)
    field = np.fft.ifftn(zeta * acc, axes=axes).real
    return float(field[tuple(x_idx)])


def translated_kernel(kernel, mollifier: Optional[MollifierFamily], grid: TorusGrid,
                      s: float, x_idx: tuple) -> np.ndarray:
    """Lattice kernel y -> G_n(s, x - y) (periodized through its mode samples)."""
    ghat = kernel_ft_lattice(kernel, grid, s, mollifier)
    g = np.fft.ifftn(ghat).real / grid.cell
    idx = np.ix_(*[(x - np.arange(grid.n)) % grid.n for x in x_idx])
    return g[idx]


def kernel_window(kernel, mollifier: Optional[MollifierFamily], grid: TorusGrid,
                  t: float, x_idx: tuple, Z, dt: float, n_steps: int) -> AdaptedIntegrand:
    """The process (s, y) -> G_n(t - s, x - y) Z(s, y) on the lattice.

    This is the canonical integrand whose series integral reproduces the
    Fourier-domain stochastic convolution; rows at or after t are zero.
    The deterministic kernel factor preserves the adaptedness of Z.
    """
    jt = step_index(t, dt, n_steps)
    rows = _integrand_rows(Z, jt, grid, require_adapted=False)
    out = np.zeros((n_steps,) + grid.shape)
    for j in range(jt):
        out[j] = translated_kernel(kernel, mollifier, grid, t - j * dt, x_idx) * rows[j]
    adapted = Z.adapted if isinstance(Z, AdaptedIntegrand) else False
    return AdaptedIntegrand(out, adapted, "kernel-window")


def ito_series_integral(Phi, cons: ConsBasis, noise: NoiseIncrements, t: float) -> float:
    """Series integral sum_i sum_j <Phi(t_j,.), e_i> dW^i_j up to the grid time t."""
    grid = cons.grid
    jt = step_index(t, noise.dt, noise.n_steps)
    rows = Phi.values if isinstance(Phi, AdaptedIntegrand) else np.asarray(Phi, dtype=float)
    if isinstance(Phi, AdaptedIntegrand) and not Phi.adapted:
        raise ValueError("integrand is not adapted")
    if rows.shape[-grid.d:] != grid.shape:
        raise ValueError("basis and integrand live on different grids")
    coeffs = cons.coeffs(rows[:jt])             # (jt, n_basis)
    dW = cons.brownian_increments(noise)        # (n_basis, n_steps)
    return float(np.sum(coeffs * dW[:, :jt].T))


# ---------------------------------------------------------------------------
# divergence (Skorohod) form on elementary processes
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class WienerFunctional:
    """A random variable with its derivative along the Brownian coordinates.

    dcoeffs[i, j] is the derivative with respect to the increment dW^i_j of
    the Brownian motion attached to basis element e_i; equivalently the
    coefficients of the derivative over (basis element, time slab).
    """

    value: float
    dcoeffs: Optional[np.ndarray] = None   # (n_basis, n_steps)

    @staticmethod
    def constant(c: float, cons: ConsBasis, n_steps: int) -> "WienerFunctional":
        return WienerFunctional(float(c), np.zeros((cons.n_basis, n_steps)))


@dataclasses.dataclass
class ElementaryProcess:
    """g = 1_{(a,b]} 1_A X with A a lattice subset and X a Wiener functional."""

    a: float
    b: float
    site_mask: np.ndarray
    X: WienerFunctional

    def validate(self, dt: float, n_steps: int) -> tuple:
        if not 0.0 <= self.a < self.b <= n_steps * dt + 1e-12:
            raise ValueError("need 0 <= a < b <= T")
        ja = step_index(self.a, dt, n_steps)
        jb = step_index(self.b, dt, n_steps)
        if not np.any(self.site_mask):
            raise ValueError("empty site set")
        return ja, jb


def window_mass(noise: NoiseIncrements, measure: DiscreteSpectralMeasure,
                grid: TorusGrid, a: float, b: float,
                site_mask: np.ndarray) -> WienerFunctional:
    """F(1_{(a,b]} 1_A): the noise mass of a space-time window, with derivative."""
    ja = step_index(a, noise.dt, noise.n_steps)
    jb = step_index(b, noise.dt, noise.n_steps)
    mask = np.asarray(site_mask, dtype=float)
    total = 0.0
    for j in range(ja, jb):
        total += float(np.sum(realize_field_increment(noise, j, measure, grid) * mask)) * grid.cell
    cons = ConsBasis(grid, measure)
    dcoeffs = np.zeros((cons.n_basis, noise.n_steps))
    dcoeffs[:, ja:jb] = cons.coeffs(mask)[:, None]
    return WienerFunctional(total, dcoeffs)


def skorohod_elementary(ep: ElementaryProcess, noise: NoiseIncrements,
                        measure: DiscreteSpectralMeasure, grid: TorusGrid,
                        cons: ConsBasis) -> float:
    """delta(g) = X F(1_{(a,b]} 1_A) - <DX, 1_{(a,b]} 1_A> for g = 1_{(a,b]} 1_A X.

    The correction pairs the derivative coefficients of X with the window:
    it vanishes when X is measurable with respect to the noise before a,
    and produces the second-chaos value X^2 - |window|^2 when X is the
    window mass itself.
    """
    ja, jb = ep.validate(noise.dt, noise.n_steps)
    if ep.X.dcoeffs is None:
        raise ValueError("Skorohod integration needs the derivative evaluator of X")
    mask = np.asarray(ep.site_mask, dtype=float)
    f_win = 0.0
    for j in range(ja, jb):
        f_win += float(np.sum(realize_field_increment(noise, j, measure, grid) * mask)) * grid.cell
    mask_coeffs = cons.coeffs(mask)
    correction = noise.dt * float(np.sum(ep.X.dcoeffs[:, ja:jb] * mask_coeffs[:, None]))
    return ep.X.value * f_win - correction


def skorohod_adapted_sum(Phi, noise: NoiseIncrements, measure: DiscreteSpectralMeasure,
                         grid: TorusGrid, t: float) -> float:
    """Divergence of an adapted lattice integrand by elementary decomposition.

    The integrand splits into one elementary process per (slab, site) with
    X = Phi(t_j, z_m), measurable before its own window, so every
    derivative correction pairs a window with a region where the
    coefficients of DX vanish and the divergence reduces to the linear sum
    sum_{j,m} Phi(t_j, z_m) DM_j(z_m) cell.
    """
    jt = step_index(t, noise.dt, noise.n_steps)
    rows = _integrand_rows(Phi, jt, grid, require_adapted=True)
    total = 0.0
    for j in range(jt):
        total += float(np.sum(rows[j] * realize_field_increment(noise, j, measure, grid)))
    return total * grid.cell


# ---------------------------------------------------------------------------
# pathwise integral
# ---------------------------------------------------------------------------

def pathwise_integral(kernel, mollifier: Optional[MollifierFamily], Z,
                      grid: TorusGrid, t: float, x_idx: tuple,
                      dt: float, n_steps: int) -> float:
    """Time-trapezoid, FFT-convolution integral of G_n(t-s, x-.) Z(s,.) ds dz.

    The right endpoint carries the zero kernel G_n(0), so the trapezoid
    weights reduce to 1/2 at s=0 and 1 at interior slabs; the rule is exact
    for the linear-in-s transform of the wave kernel at frequency zero.
    """
    jt = step_index(t, dt, n_steps)
    rows = _integrand_rows(Z, jt, grid, require_adapted=False)
    zeta = mollifier_lattice(mollifier, grid)
    axes = tuple(range(-grid.d, 0))
    acc = np.zeros(grid.shape, dtype=complex)
    for j in range(jt):
        weight = 0.5 if j == 0 else 1.0
        acc += (weight * dt) * kernel.ft(t - j * dt, grid.xi_norm) * np.fft.fftn(rows[j], axes=axes)
    field = np.fft.ifftn(zeta * acc, axes=axes).real
    return float(field[tuple(x_idx)])


# ---------------------------------------------------------------------------
# Hilbert space valued integrals (finite coordinate space)
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class HilbertIntegrand:
    """Finitely many coordinate integrands along a fixed orthonormal frame."""

    coordinates: list  # of AdaptedIntegrand

    def __post_init__(self):
        if not self.coordinates:
            raise ValueError("need at least one coordinate")


def hilbert_cd_integral(kernel, mollifier, Z: HilbertIntegrand, noise, measure,
                        t: float, x_idx: tuple) -> np.ndarray:
    """Coordinatewise stochastic convolution; squared norm is the coordinate sum."""
    return np.array([cd_integral(kernel, mollifier, zk, noise, measure, t, x_idx)
                     for zk in Z.coordinates])


def hilbert_pathwise_integral(kernel, mollifier, Z: HilbertIntegrand, grid,
                              t: float, x_idx: tuple, dt: float, n_steps: int) -> np.ndarray:
    return np.array([pathwise_integral(kernel, mollifier, zk, grid, t, x_idx, dt, n_steps)
                     for zk in Z.coordinates])


# ---------------------------------------------------------------------------
# covariance-weighted norms
# ---------------------------------------------------------------------------

def empirical_spectral_weights(z_rows: np.ndarray, grid: TorusGrid):
    """Estimate the spectral weights of the stationary covariance of Z.

    z_rows has shape (replicas, n_steps) + grid.shape.  For each step the
    circular autocovariance over the lattice is averaged over replicas and
    transformed; negative estimated weights (possible for a finite-sample
    covariance) are clipped at zero and the clipped mass reported.
    """
    axes = tuple(range(-grid.d, 0))
    fz = np.fft.fftn(z_rows, axes=axes)
    power = (fz * np.conj(fz)).real / grid.n_modes
    gamma = np.fft.ifftn(power.mean(axis=0), axes=axes).real  # (n_steps,) + shape
    nu = np.fft.fftn(gamma, axes=axes).real / grid.n_modes
    clip_mass = float(np.sum(np.abs(np.minimum(nu, 0.0))))
    return np.maximum(nu, 0.0), clip_mass


def convolved_mode_weights(measure: DiscreteSpectralMeasure, nu: np.ndarray) -> np.ndarray:
    """mu_hat = w (*) nu: circular convolution of atom weights over the mode lattice."""
    grid = measure.grid
    axes = tuple(range(-grid.d, 0))
    out = np.fft.ifftn(np.fft.fftn(measure.w) * np.fft.fftn(nu, axes=axes), axes=axes).real
    return np.maximum(out, 0.0)


@dataclasses.dataclass
class NormReport:
    """Covariance-weighted norms of a kernel window with the Monte Carlo check."""

    norm0_sq: float
    norm1_sq: float
    mc_second_moment: float
    mc_standard_error: float
    replicas: int
    clip_mass: float = 0.0

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)


def window_mode_profile(kernel, mollifier, grid: TorusGrid, t: float,
                        dt: float) -> np.ndarray:
    """|FG_n(t - t_j)(xi_k)|^2 for the causal steps j < t/dt, shape (jt,) + grid.shape."""
    jt = step_index(t, dt, int(math.ceil(t / dt)), endpoint_ok=True)
    zeta = mollifier_lattice(mollifier, grid)
    out = np.empty((jt,) + grid.shape)
    for j in range(jt):
        g = kernel.ft(t - j * dt, grid.xi_norm) * zeta
        out[j] = g * g
    return out


def norm_0Z(kernel, mollifier, measure: DiscreteSpectralMeasure, t: float, dt: float,
            Z_const: Optional[float] = None,
            z_samples: Optional[np.ndarray] = None,
            mc_values: Optional[np.ndarray] = None,
            min_replicas: int = 32) -> NormReport:
    """Norms of the window G_n(t-., x-*) under the law of Z.

    For constant Z the spectral weights of the covariance are exact
    (c^2 at frequency zero); otherwise they are estimated from the supplied
    replica ensemble of Z rows.  The time rule matches the causal stochastic
    convolution, so the first norm is the exact second moment of
    cd_integral for stationary Z.
    """
    grid = measure.grid
    profile = window_mode_profile(kernel, mollifier, grid, t, dt)
    jt = profile.shape[0]
    clip = 0.0
    if Z_const is not None:
        nu = np.zeros((jt,) + grid.shape)
        nu[(slice(None),) + (0,) * grid.d] = Z_const**2
    else:
        if z_samples is None:
            raise ValueError("need Z_const or a replica ensemble of Z rows")
        if z_samples.shape[0] < min_replicas:
            raise ValueError(f"need at least {min_replicas} replicas to estimate the covariance weights")
        nu, clip = empirical_spectral_weights(z_samples[:, :jt], grid)
    mu_hat = convolved_mode_weights(measure, nu)
    axes = tuple(range(1, 1 + grid.d))
    norm0 = float(dt * np.sum(profile * mu_hat))
    norm1 = float(dt * np.sum(profile * nu))
    if mc_values is not None:
        mc_values = np.asarray(mc_values, dtype=float)
        sq = mc_values**2
        mc = float(np.mean(sq))
        se = float(np.std(sq, ddof=1) / np.sqrt(len(sq)))
        n_rep = len(sq)
    else:
        mc = math.nan
        se = math.nan
        n_rep = 0
    return NormReport(norm0, norm1, mc, se, n_rep, clip)


def mollifier_convergence(kernel, family: MollifierFamily, n_schedule: Sequence[float],
                          measure: DiscreteSpectralMeasure, t: float, dt: float,
                          Z_const: float = 1.0,
                          z_samples: Optional[np.ndarray] = None) -> np.ndarray:
    """|Lambda_n - Lambda_ref|_{0,Z} along the mollifier schedule.

    The reference is the sharpest kernel representable on the lattice
    (multiplier identically one on the modes), so the band-limit family
    reaches exactly zero once its index covers the lattice.
    """
    if np.any(np.diff(np.asarray(list(n_schedule), dtype=float)) <= 0):
        raise ValueError("mollifier schedule must be increasing")
    grid = measure.grid
    profile = window_mode_profile(kernel, None, grid, t, dt)
    jt = profile.shape[0]
    if z_samples is not None:
        nu, _ = empirical_spectral_weights(z_samples[:, :jt], grid)
        mu_hat = convolved_mode_weights(measure, nu)
    else:
        mu_hat = Z_const**2 * np.broadcast_to(measure.w, (jt,) + grid.shape)
    out = []
    for n in n_schedule:
        zeta = family.with_index(n).ft(grid.xi)
        gap = (zeta - 1.0) ** 2
        out.append(math.sqrt(max(0.0, float(dt * np.sum(profile * gap * mu_hat)))))
    return np.array(out)
