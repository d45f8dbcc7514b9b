"""Mode lattice, discretized spectral measure, and the cylindrical noise.

The spatial domain is the torus [0, L)^d sampled at n = 2K+1 points per
axis; the dual lattice carries the modes xi_k = k/L, k in {-K..K}^d, stored
in FFT layout.  Discrete transforms follow the convention

    Fphi(xi_k) = cell * fftn(phi)[k],      cell = (L/n)^d,
    phi(z_m)   = ifftn(Fphi / cell)[m],

which matches the continuum transform Fphi(xi) = int exp(-2 pi i xi.x) phi.

The driving noise is a family of complex Gaussian increments per (mode,
time step) with exact Hermitian symmetry, so every realized field is real;
equivalently, one independent standard Brownian motion per element of the
orthonormal system of the spectral Hilbert space.
"""

from __future__ import annotations

import dataclasses
import struct
from typing import Optional

import numpy as np

from .kernels import SpectralMeasureSpec, sphere_area
from numpy.polynomial.legendre import leggauss


class CapacityError(RuntimeError):
    """Requested lattice exceeds the configured memory budget."""


# ---------------------------------------------------------------------------
# grid
# ---------------------------------------------------------------------------

class TorusGrid:
    """Mode lattice {-K..K}^d and spatial lattice {m L/(2K+1)} on the torus."""

    def __init__(self, d: int, L: float, K: int):
        if d < 1 or L <= 0 or K < 0:
            raise ValueError("require d >= 1, L > 0, K >= 0")
        self.d = int(d)
        self.L = float(L)
        self.K = int(K)
        self.n = 2 * self.K + 1
        self.shape = (self.n,) * self.d
        self.n_modes = self.n**self.d
        self.cell = (self.L / self.n) ** self.d
        freqs = np.fft.fftfreq(self.n, d=self.L / self.n)  # = k/L in FFT layout
        mesh = np.meshgrid(*([freqs] * self.d), indexing="ij")
        self.xi = np.stack(mesh)                   # (d, n, ..., n)
        self.xi_norm = np.sqrt(sum(m * m for m in mesh))
        coords = np.arange(self.n) * (self.L / self.n)
        self.z = np.stack(np.meshgrid(*([coords] * self.d), indexing="ij"))

    def conj_flip(self, a: np.ndarray) -> np.ndarray:
        """Index map k -> -k on the trailing d axes (FFT layout)."""
        axes = tuple(range(a.ndim - self.d, a.ndim))
        out = a
        for ax in axes:
            out = np.roll(np.flip(out, axis=ax), 1, axis=ax)
        return out

    def k_integers(self) -> np.ndarray:
        """Integer mode vectors, shape (d, n, ..., n), FFT layout."""
        return np.rint(self.xi * self.L).astype(int)

    def to_natural(self, a: np.ndarray) -> np.ndarray:
        """Reorder a lattice-of-modes array from FFT layout to -K..K order."""
        out = a
        for ax in range(a.ndim - self.d, a.ndim):
            out = np.roll(out, self.K, axis=ax)
        return out

    def flat_index(self, k: tuple) -> int:
        """Flat FFT-layout index of an integer mode vector."""
        idx = tuple(int(ki) % self.n for ki in k)
        return int(np.ravel_multi_index(idx, self.shape))

    def __repr__(self):
        return f"TorusGrid(d={self.d}, L={self.L}, K={self.K})"


def build_grid(d: int, L: float, K: int, max_modes: int = 2**22) -> TorusGrid:
    """Construct the torus lattice; rejects (2K+1)^d beyond the memory budget."""
    n_modes = (2 * K + 1) ** d
    if n_modes > max_modes:
        raise CapacityError(
            f"(2K+1)^d = {n_modes} modes exceeds the budget of {max_modes}")
    return TorusGrid(d, L, K)


# ---------------------------------------------------------------------------
# measure discretization
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class DiscreteSpectralMeasure:
    """Atomized spectral measure: weight w_k >= 0 per lattice mode."""

    grid: TorusGrid
    w: np.ndarray
    spec: Optional[SpectralMeasureSpec] = None

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        if self.w.shape != self.grid.shape:
            raise ValueError("weight array does not match the grid")
        if not np.all(np.isfinite(self.w)) or np.any(self.w < 0):
            raise ValueError("weights must be finite and nonnegative")
        if not np.any(self.w > 0):
            raise ValueError("measure must have at least one positive weight")
        if not np.array_equal(self.w, self.grid.conj_flip(self.w)):
            raise ValueError("weights must satisfy w_k = w_{-k}")

    @property
    def total_mass(self) -> float:
        return float(np.sum(self.w))

    def sqrt_w(self) -> np.ndarray:
        return np.sqrt(self.w)


def _origin_cell_weight(spec: SpectralMeasureSpec, grid: TorusGrid) -> float:
    """mu-mass of the frequency cell at the origin.

    The cube of side 1/L is replaced by the ball of equal volume and the
    radial profile integrated by 64-point Gauss-Legendre (finite for any
    beta > 0; the substitution r = r0 u^(2/beta) absorbs the singularity).
    """
    import math as _math
    d = grid.d
    vol = grid.L ** (-d)
    ball_vol_unit = _math.pi ** (d / 2.0) / _math.gamma(d / 2.0 + 1.0)
    r0 = (vol / ball_vol_unit) ** (1.0 / d)
    u, wu = leggauss(64)
    u = 0.5 * (u + 1.0)
    wu = 0.5 * wu
    area = sphere_area(d)
    if spec.kind == "riesz":
        beta = spec.beta
        r = r0 * u ** (2.0 / beta)
        jac = r0 * (2.0 / beta) * u ** (2.0 / beta - 1.0)
    else:
        r = r0 * u
        jac = np.full_like(u, r0)
    dens = spec.radial_density(r, d)
    return float(np.sum(wu * dens * area * r ** (d - 1) * jac))


def discretize_measure(spec: SpectralMeasureSpec, grid: TorusGrid) -> DiscreteSpectralMeasure:
    """Atomize the spectral measure on the mode lattice.

    Off-origin atoms carry density(xi_k) * L^-d (midpoint rule over the
    frequency cell of volume L^-d); the origin atom integrates the density
    over its cell so that singular low-frequency mass is not dropped.
    """
    spec.validate_for_dimension(grid.d)
    if spec.kind == "dirac-at-zero":
        w = np.zeros(grid.shape)
        w[(0,) * grid.d] = 1.0
        return DiscreteSpectralMeasure(grid, w, spec)
    cell_freq = grid.L ** (-grid.d)
    if spec.kind == "lebesgue":
        w = np.full(grid.shape, cell_freq)
        return DiscreteSpectralMeasure(grid, w, spec)
    with np.errstate(divide="ignore"):
        w = spec.radial_density(grid.xi_norm, grid.d) * cell_freq
    w[(0,) * grid.d] = _origin_cell_weight(spec, grid)
    return DiscreteSpectralMeasure(grid, w, spec)


# ---------------------------------------------------------------------------
# noise increments
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class NoiseIncrements:
    """Hermitian complex Gaussian increments, one per (time step, mode).

    dbeta has shape (..., n_steps) + grid.shape where the optional leading
    axes index a replica batch.  For a paired mode k != -k the real and
    imaginary parts are independent N(0, dt/2); the self-paired mode k = 0
    is real with variance dt; and dbeta[-k] = conj(dbeta[k]) holds exactly.
    """

    grid: TorusGrid
    dbeta: np.ndarray
    dt: float
    n_steps: int
    seed: int
    replica: object  # int or array of ints for a batch

    @property
    def batch_shape(self) -> tuple:
        return self.dbeta.shape[: self.dbeta.ndim - self.grid.d - 1]

    def step(self, j: int) -> np.ndarray:
        idx = (Ellipsis, j) + (slice(None),) * self.grid.d
        return self.dbeta[idx]

    def shifted(self, mode_shift: np.ndarray, scale: float) -> "NoiseIncrements":
        """Increments translated by a deterministic drift per (step, mode)."""
        return NoiseIncrements(self.grid, self.dbeta + scale * mode_shift,
                               self.dt, self.n_steps, self.seed, self.replica)


def _philox(seed: int, replica: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array(
        [seed & 0xFFFFFFFFFFFFFFFF, replica & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)))


def sample_increments(grid: TorusGrid, measure: Optional[DiscreteSpectralMeasure],
                      n_steps: int, dt: float, seed: int,
                      replica=0) -> NoiseIncrements:
    """Draw the cylindrical noise increments for one replica or a batch.

    Each replica owns a counter-based Philox stream keyed by (seed, replica),
    so any number of replicas can be generated concurrently and in any order
    with bit-identical results.  `replica` may be an int or a sequence of
    ints (leading batch axis in the result).  Modes with zero spectral
    weight are sampled anyway: the weight multiplies them out downstream and
    keeping the draw order fixed makes paths comparable across measures.
    """
    if dt <= 0 or n_steps < 1:
        raise ValueError("require dt > 0 and n_steps >= 1")
    if np.ndim(replica) == 0:
        reps = [int(replica)]
        batch = False
    else:
        reps = [int(r) for r in np.asarray(replica).ravel()]
        batch = True
    if any(r < 0 for r in reps) or seed < 0:
        raise ValueError("seed and replica ids must be nonnegative integers")
    out = np.empty((len(reps), n_steps) + grid.shape, dtype=complex)
    scale = np.sqrt(dt / 2.0)
    for i, rep in enumerate(reps):
        rng = _philox(seed, rep)
        a = rng.standard_normal((n_steps,) + grid.shape)
        b = rng.standard_normal((n_steps,) + grid.shape)
        w = (a + 1j * b) * scale
        out[i] = (w + grid.conj_flip(np.conj(w))) / np.sqrt(2.0)
    dbeta = out if batch else out[0]
    rep_field = np.asarray(replica) if batch else int(replica)
    return NoiseIncrements(grid, dbeta, float(dt), int(n_steps), int(seed), rep_field)


def realize_field_increment(incr: NoiseIncrements, j: int,
                            measure: DiscreteSpectralMeasure,
                            grid: TorusGrid) -> np.ndarray:
    """Realize DM_j(z) = sum_k sqrt(w_k) exp(2 pi i xi_k . z) dbeta[k][j]."""
    if j >= incr.n_steps:
        raise ValueError("step index out of range")
    spec_coeff = measure.sqrt_w() * incr.step(j)
    field = np.fft.ifftn(spec_coeff, axes=tuple(range(-grid.d, 0))) * grid.n_modes
    return field.real


def realize_field_increments(incr: NoiseIncrements, measure: DiscreteSpectralMeasure,
                             grid: TorusGrid) -> np.ndarray:
    """All realized increments at once, shape (..., n_steps) + grid.shape."""
    spec_coeff = measure.sqrt_w() * incr.dbeta
    field = np.fft.ifftn(spec_coeff, axes=tuple(range(-grid.d, 0))) * grid.n_modes
    return field.real


# ---------------------------------------------------------------------------
# spectral inner product and orthonormal system
# ---------------------------------------------------------------------------

def lattice_ft(phi: np.ndarray, grid: TorusGrid) -> np.ndarray:
    """Continuum-normalized Fourier transform of a lattice function."""
    return np.fft.fftn(phi, axes=tuple(range(-grid.d, 0))) * grid.cell


def lattice_ift(fhat: np.ndarray, grid: TorusGrid) -> np.ndarray:
    """Inverse of lattice_ft (returns a complex array)."""
    return np.fft.ifftn(fhat, axes=tuple(range(-grid.d, 0))) / grid.cell


def inner_h(phi: np.ndarray, psi: np.ndarray, measure: DiscreteSpectralMeasure) -> float:
    """Spectral inner product <phi, psi> = Re sum_k w_k Fphi(xi_k) conj(Fpsi(xi_k))."""
    grid = measure.grid
    if phi.shape[-grid.d:] != grid.shape or psi.shape[-grid.d:] != grid.shape:
        raise ValueError("lattice functions do not match the grid")
    fp = lattice_ft(phi, grid)
    fq = lattice_ft(psi, grid)
    axes = tuple(range(-grid.d, 0))
    out = np.sum(measure.w * fp * np.conj(fq), axis=axes).real
    return float(out) if np.ndim(out) == 0 else out


def covariance_function(measure: DiscreteSpectralMeasure) -> np.ndarray:
    """Gamma on the spatial lattice: Gamma(z) = sum_k w_k cos(2 pi xi_k . z)."""
    grid = measure.grid
    g = np.fft.ifftn(measure.w) * grid.n_modes
    return g.real


def norm_plus_sq(g: np.ndarray, measure: DiscreteSpectralMeasure, dt: float = 1.0) -> float:
    """Diagnostic |g|_+^2 for a deterministic lattice process g(t_j, z).

    Evaluates dt * sum_j sum_z (|g_j| * |g~_j|)(z) Gamma(z) cell with the
    circular convolution on the torus.  Finite for every lattice function;
    provided as a diagnostic only.
    """
    grid = measure.grid
    gam = covariance_function(measure)
    g = np.abs(np.asarray(g, dtype=float))
    if g.ndim == grid.d:
        g = g[None]
    axes = tuple(range(-grid.d, 0))
    fa = np.fft.fftn(g, axes=axes)
    # (|g| * |g~|)(z) = cell * ifft(|fft(|g|)|^2)
    conv = np.fft.ifftn(fa * np.conj(fa), axes=axes).real * grid.cell
    return float(dt * np.sum(conv * gam) * grid.cell)


class ConsBasis:
    """Real orthonormal system of the discrete spectral Hilbert space.

    One constant element for the self-paired mode k = 0 (when weighted) and
    a cosine/sine pair for every weighted mode pair {k, -k}.  The basis is
    orthonormal for inner_h by construction, and the Brownian motions
    attached to the elements recover exactly the Hermitian mode increments.
    """

    def __init__(self, grid: TorusGrid, measure: DiscreteSpectralMeasure):
        self.grid = grid
        self.measure = measure
        w = measure.w.reshape(-1)
        neg = grid.conj_flip(np.arange(grid.n_modes).reshape(grid.shape)).reshape(-1)
        self._has_const = w[0] > 0
        pair_idx = np.nonzero((np.arange(grid.n_modes) < neg) & (w > 0))[0]
        self.pair_flat = pair_idx                     # canonical mode per pair
        self.n_pairs = len(pair_idx)
        self.n_basis = (1 if self._has_const else 0) + 2 * self.n_pairs
        if self.n_basis == 0:
            raise ValueError("measure carries no positive weight")
        self.w0 = float(w[0])
        self.w_pair = w[pair_idx]
        # element order: [const?] then (cos, sin) per canonical pair
        self.mode_weight = np.concatenate(
            ([self.w0] if self._has_const else [], np.repeat(self.w_pair, 2)))

    # -- coordinates ------------------------------------------------------

    def coeffs(self, phi: np.ndarray) -> np.ndarray:
        """<phi, e_i> for every basis element; phi may carry leading axes."""
        grid = self.grid
        fhat = lattice_ft(phi, grid).reshape(phi.shape[: -grid.d] + (grid.n_modes,))
        out = np.empty(phi.shape[: -grid.d] + (self.n_basis,))
        pos = 0
        if self._has_const:
            out[..., 0] = np.sqrt(self.w0) * fhat[..., 0].real
            pos = 1
        sel = fhat[..., self.pair_flat]
        amp = np.sqrt(2.0 * self.w_pair)
        out[..., pos::2] = amp * sel.real
        out[..., pos + 1::2] = -amp * sel.imag
        return out

    def synthesize(self, coeffs: np.ndarray) -> np.ndarray:
        """Real lattice function sum_i coeffs[i] e_i."""
        grid = self.grid
        coeffs = np.asarray(coeffs, dtype=float)
        lead = coeffs.shape[:-1]
        fhat = np.zeros(lead + (grid.n_modes,), dtype=complex)
        pos = 0
        if self._has_const:
            fhat[..., 0] = coeffs[..., 0] / np.sqrt(self.w0)
            pos = 1
        amp = 1.0 / np.sqrt(2.0 * self.w_pair)
        vals = amp * (coeffs[..., pos::2] - 1j * coeffs[..., pos + 1::2])
        fhat[..., self.pair_flat] = vals
        fhat = fhat.reshape(lead + grid.shape)
        fhat = fhat + grid.conj_flip(np.conj(fhat))
        if self._has_const:
            idx = (Ellipsis,) + (0,) * grid.d
            fhat[idx] /= 2.0  # self-paired mode was doubled by the symmetrization
        return lattice_ift(fhat, grid).real

    def lattice_values(self) -> np.ndarray:
        """All basis elements as lattice functions, shape (n_basis,) + grid.shape."""
        return self.synthesize(np.eye(self.n_basis))

    def direction_fields(self) -> np.ndarray:
        """Fields m_i = L^d w_i e_i so that DM_j = sum_i dW^i_j m_i."""
        return self.lattice_values() * (
            self.grid.L**self.grid.d * self.mode_weight[:, None].reshape(
                (self.n_basis,) + (1,) * self.grid.d))

    def brownian_increments(self, incr: NoiseIncrements) -> np.ndarray:
        """Increments dW^i_j of the attached Brownian motions, (..., n_basis, n_steps)."""
        db = incr.dbeta.reshape(incr.dbeta.shape[: -self.grid.d] + (self.grid.n_modes,))
        lead = db.shape[:-2]
        n_steps = db.shape[-2]
        out = np.empty(lead + (self.n_basis, n_steps))
        pos = 0
        if self._has_const:
            out[..., 0, :] = db[..., :, 0].real
            pos = 1
        sel = db[..., :, self.pair_flat]  # (..., n_steps, n_pairs)
        out[..., pos::2, :] = np.sqrt(2.0) * np.moveaxis(sel.real, -1, -2)
        out[..., pos + 1::2, :] = -np.sqrt(2.0) * np.moveaxis(sel.imag, -1, -2)
        return out

    def mode_shift_from_coeffs(self, coeffs: np.ndarray) -> np.ndarray:
        """Per-mode translation of dbeta equivalent to a Cameron-Martin shift.

        For a direction with basis coordinates h_i(t_j) the increments move
        by dt * sqrt(w_k) FH_j(xi_k); this returns the (n_steps,) + shape
        complex array of those factors per unit (dt * epsilon).
        """
        grid = self.grid
        h_field = self.synthesize(coeffs)  # (..., n_steps?, shape) caller supplies per-step
        fh = lattice_ft(h_field, grid)
        return self.measure.sqrt_w() * fh

    def gram(self) -> np.ndarray:
        e = self.lattice_values()
        g = np.empty((self.n_basis, self.n_basis))
        for i in range(self.n_basis):
            g[i] = inner_h(np.broadcast_to(e[i], e.shape), e, self.measure)
        return g


def cons_basis(grid: TorusGrid, measure: DiscreteSpectralMeasure) -> ConsBasis:
    return ConsBasis(grid, measure)


# ---------------------------------------------------------------------------
# binary persistence of noise paths
# ---------------------------------------------------------------------------

_NOISE_MAGIC = b"SWNZ"


def save_noise(path, incr: NoiseIncrements) -> None:
    """Write increments as little-endian float64 pairs with a small header."""
    if incr.batch_shape:
        raise ValueError("persist single-replica noise only")
    grid = incr.grid
    with open(path, "wb") as fh:
        fh.write(_NOISE_MAGIC)
        fh.write(struct.pack("<iidiidqq", 1, grid.d, grid.L, grid.K,
                             incr.n_steps, incr.dt, incr.seed, int(incr.replica)))
        data = np.empty(incr.dbeta.shape + (2,))
        data[..., 0] = incr.dbeta.real
        data[..., 1] = incr.dbeta.imag
        fh.write(data.astype("<f8").tobytes())


def load_noise(path) -> NoiseIncrements:
    with open(path, "rb") as fh:
        if fh.read(4) != _NOISE_MAGIC:
            raise ValueError("not a noise file")
        version, d, L, K, n_steps, dt, seed, replica = struct.unpack(
            "<iidiidqq", fh.read(struct.calcsize("<iidiidqq")))
        if version != 1:
            raise ValueError(f"unsupported noise file version {version}")
        grid = TorusGrid(d, L, K)
        raw = np.frombuffer(fh.read(), dtype="<f8").reshape((n_steps,) + grid.shape + (2,))
        dbeta = raw[..., 0] + 1j * raw[..., 1]
    return NoiseIncrements(grid, dbeta, dt, n_steps, seed, replica)
