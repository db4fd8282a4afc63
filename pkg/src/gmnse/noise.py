"""Divergence-free transport-noise machinery.

For every lattice mode k an orthonormal pair {a_{k,1}, a_{k,2}} of k-perp is
fixed deterministically, the radial coefficient family carries the total
noise variance, and complex Brownian increments are drawn per conjugate pair
so that the field-level increment is always real and divergence-free.

Partition rule ("lex-positive"): k belongs to the positive half-lattice when
its first nonzero coordinate is positive; a_{-k,i} = a_{k,i}.

Basis rule ("least-aligned-axis-cross"): with e the unit vector out of
{(0,0,1), (0,1,0)} least aligned with k (ties to (0,0,1)),
a_{k,1} = normalize(e x k) and a_{k,2} = normalize(k x a_{k,1}).
"""

from __future__ import annotations

import numpy as np

from .spectral import SpectralVelocity, advect, min_grid_for_product, mode_set

PARTITION_RULE = "lex-positive"
BASIS_RULE = "least-aligned-axis-cross"

#: stream derivation tags hung off the root seed (replica index is the third
#: spawn-key component)
STREAM_NOISE = 1
STREAM_INIT = 2
STREAM_EXPERIMENT = 3


class NoiseBasis:
    """Orthonormal k-perp pairs for every mode of the band 1 <= |k| <= n.

    Vectors are stored for canonical representatives only; a_{-k,i} = a_{k,i}
    extends them to the whole band.
    """

    def __init__(self, n):
        ms = mode_set(n)
        self.n = int(n)
        self.modes = ms
        k = ms.reps.astype(np.float64)
        abs_k = np.abs(ms.reps)
        ez = np.array([0.0, 0.0, 1.0])
        ey = np.array([0.0, 1.0, 0.0])
        use_z = abs_k[:, 2] <= abs_k[:, 1]
        e = np.where(use_z[:, None], ez[None, :], ey[None, :])
        a1 = np.cross(e, k)
        a1 /= np.linalg.norm(a1, axis=1)[:, None]
        a2 = np.cross(k, a1)
        a2 /= np.linalg.norm(a2, axis=1)[:, None]
        self.a1 = a1
        self.a2 = a2

    def vectors(self, k):
        """(a_{k,1}, a_{k,2}) for any mode of the band (sign-symmetric)."""
        row, _ = self.modes.row(k)
        return self.a1[row].copy(), self.a2[row].copy()


def build_basis(n):
    if n < 1:
        raise ValueError("noise band must contain at least the unit shell")
    return NoiseBasis(n)


class ThetaSpectrum:
    """Radial coefficients theta_k = sqrt(eps_n) |k|^(-r) on 1 <= |k| <= n.

    eps_n normalizes the square sum over the whole (two-sided) band to one.
    """

    def __init__(self, r, n):
        if not 0.0 < r < 1.5:
            raise ValueError("radial exponent must lie in (0, 3/2)")
        if n < 1:
            raise ValueError("noise cutoff must be a positive integer")
        self.r = float(r)
        self.n = int(n)
        self.modes = mode_set(n)
        k2 = self.modes.k2.astype(np.float64)
        # representative storage covers half the lattice: double the sum
        self.eps_n = 1.0 / (2.0 * np.sum(k2 ** (-self.r)))
        self.values = np.sqrt(self.eps_n) * k2 ** (-self.r / 2.0)

    def theta(self, k):
        row, _ = self.modes.row(k)
        return float(self.values[row])

    def ell2_norm_sq(self):
        return float(2.0 * np.sum(self.values**2))

    def ell_inf(self):
        return float(np.max(self.values))


def build_theta(r, n):
    return ThetaSpectrum(r, n)


class BrownianIncrements:
    """One batch of complex increments, one entry per representative and i.

    dw[row, i - 1] is the increment at the canonical (positive half-lattice)
    representative; the increment at -k is the implied complex conjugate.
    """

    __slots__ = ("modes", "dw", "dt")

    def __init__(self, modes, dw, dt):
        self.modes = modes
        self.dw = dw
        self.dt = dt

    def at(self, k, i):
        row, conj = self.modes.row(k)
        val = self.dw[row, i - 1]
        return np.conj(val) if conj else val

    def as_dict(self):
        out = {}
        for row, k in enumerate(self.modes.reps):
            key = tuple(int(c) for c in k)
            neg = tuple(-c for c in key)
            for i in (1, 2):
                out[(key, i)] = self.dw[row, i - 1]
                out[(neg, i)] = np.conj(self.dw[row, i - 1])
        return out


class BrownianDriver:
    """Seeded source of complex Brownian increment batches over steps of dt.

    Per representative pair {k, -k} and i the increment is X + iY with X, Y
    independent N(0, dt), so E|dW|^2 = 2 dt and conjugate pairing holds by
    assembly.  Uses the counter-based Philox generator; independent replicas
    derive independent streams from (root seed, stream tag, replica index).
    """

    def __init__(self, seed, dt, n, stream=0):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.dt = float(dt)
        self.modes = mode_set(n)
        if isinstance(seed, np.random.SeedSequence):
            seq = seed
        else:
            seq = np.random.SeedSequence(int(seed), spawn_key=(STREAM_NOISE, int(stream)))
        self._rng = np.random.Generator(np.random.Philox(seq))

    def sample(self):
        scale = np.sqrt(self.dt)
        z = self._rng.normal(size=(self.modes.count, 2, 2)) * scale
        dw = z[:, :, 0] + 1j * z[:, :, 1]
        return BrownianIncrements(self.modes, dw, self.dt)


def sample_increments(driver):
    """One increment batch; advancing the driver yields independent batches."""
    return driver.sample()


def noise_velocity_field(theta, basis, incr):
    """Random advecting field V with V_hat(k) = theta_k sum_i dW^{k,i} a_{k,i}.

    V is real (conjugate pairing) and divergence-free (a_{k,i} . k = 0); the
    transport Ito integrand collapses to Pi((V . grad) u) by linearity.
    """
    if theta.n != basis.n or theta.modes is not incr.modes:
        raise ValueError("theta, basis and increments live on different bands")
    coeffs = theta.values[:, None] * (
        incr.dw[:, 0:1] * basis.a1 + incr.dw[:, 1:2] * basis.a2
    )
    return SpectralVelocity(theta.modes, coeffs)


def transport_increment(u, basis, theta, incr, nu, grid=None, out_cutoff=None):
    """sqrt(3 nu / 2) sum_{k,i} theta_k Pi(sigma_{k,i} . grad u) dW^{k,i}.

    Each sigma shift moves mode l to l + k, so the band grows from |l| <= m
    to |l| <= m + n; Galerkin re-truncation is the stepper's job, not ours.
    """
    if nu <= 0:
        raise ValueError("noise intensity must be positive")
    if out_cutoff is None:
        out_cutoff = u.cutoff + theta.n
    if out_cutoff > 192:
        raise ValueError(
            f"combined band {out_cutoff} exceeds the representable limit (192)"
        )
    need = min_grid_for_product(theta.n, u.cutoff, out_cutoff)
    if grid is not None and grid < need:
        raise ValueError(
            f"grid {grid} cannot dealias the noise band: need at least {need}"
        )
    v = noise_velocity_field(theta, basis, incr)
    return np.sqrt(1.5 * nu) * advect(v, u, out_cutoff=out_cutoff, grid=grid)
