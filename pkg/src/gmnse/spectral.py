"""Truncated Fourier representation of divergence-free vector fields on the 3-torus.

Fields are real, mean-zero and incompressible.  A field with Galerkin cutoff m
keeps the lattice band 1 <= |k| <= m (Euclidean norm) and stores one complex
3-vector per conjugate pair {k, -k}; the -k coefficient is the implied complex
conjugate, so Hermitian symmetry and the zero spatial mean cannot be violated
by construction.

Norm convention: homogeneous Sobolev weights, ||u||_{H^s}^2 = sum_k
(2 pi |k|)^(2s) |u_hat(k)|^2.  With this convention the symbol of -Laplace at
mode k is exactly the H^1 weight 4 pi^2 |k|^2.
"""

from __future__ import annotations

import functools

import numpy as np
from scipy import fft as sfft

TWO_PI = 2.0 * np.pi

#: identifier recorded in run manifests (norm weights above)
NORM_CONVENTION = "homogeneous:(2*pi*|k|)^(2s)"


def _lex_positive(k):
    """Mask of lattice vectors whose first nonzero coordinate is positive."""
    kx, ky, kz = k[:, 0], k[:, 1], k[:, 2]
    return (kx > 0) | ((kx == 0) & ((ky > 0) | ((ky == 0) & (kz > 0))))


def is_canonical(k):
    """True if k is the stored representative of its conjugate pair."""
    arr = np.asarray(k, dtype=np.int64).reshape(1, 3)
    return bool(_lex_positive(arr)[0])


@functools.lru_cache(maxsize=64)
def mode_set(cutoff):
    """Shared ModeSet for a given cutoff (row layout is identical across fields)."""
    return ModeSet(cutoff)


class ModeSet:
    """Canonical bookkeeping for the band 1 <= |k| <= cutoff.

    Representatives (first nonzero coordinate positive) are sorted
    lexicographically so that every field on the same band shares one row
    layout and reductions run in a fixed order.
    """

    def __init__(self, cutoff):
        cutoff = int(cutoff)
        if cutoff < 1:
            raise ValueError("cutoff must be a positive integer")
        self.cutoff = cutoff
        rng = np.arange(-cutoff, cutoff + 1)
        kx, ky, kz = np.meshgrid(rng, rng, rng, indexing="ij")
        k = np.stack([kx.ravel(), ky.ravel(), kz.ravel()], axis=1)
        k2 = np.sum(k * k, axis=1)
        k = k[(k2 > 0) & (k2 <= cutoff * cutoff)]
        reps = k[_lex_positive(k)]
        order = np.lexsort((reps[:, 2], reps[:, 1], reps[:, 0]))
        self.reps = np.ascontiguousarray(reps[order], dtype=np.int64)
        self.k2 = np.sum(self.reps * self.reps, axis=1)
        self.count = int(len(self.reps))
        self._row = {tuple(int(c) for c in v): i for i, v in enumerate(self.reps)}

    def row(self, k):
        """(row index, conjugate flag) for any lattice vector in the band."""
        key = tuple(int(c) for c in k)
        if key in self._row:
            return self._row[key], False
        neg = tuple(-c for c in key)
        if neg in self._row:
            return self._row[neg], True
        raise KeyError(f"mode {key} outside band |k| <= {self.cutoff}")

    def __contains__(self, k):
        key = tuple(int(c) for c in k)
        return key in self._row or tuple(-c for c in key) in self._row

    def sobolev_weights(self, s):
        """Spectral weights (2 pi |k|)^(2s) aligned with the representative rows."""
        base = (TWO_PI * TWO_PI) * self.k2.astype(np.float64)
        if s == 0:
            return np.ones_like(base)
        return base**s


class SpectralVelocity:
    """Band-limited, real, divergence-free, mean-zero velocity field.

    coeffs[i] is the complex 3-vector at modes.reps[i]; the -k coefficient is
    the implied conjugate.  Values are never mutated in place by library code.
    """

    __slots__ = ("modes", "coeffs")

    def __init__(self, modes, coeffs):
        if coeffs.shape != (modes.count, 3):
            raise ValueError("coefficient array does not match the mode layout")
        self.modes = modes
        self.coeffs = np.ascontiguousarray(coeffs, dtype=np.complex128)

    @property
    def cutoff(self):
        return self.modes.cutoff

    @classmethod
    def zero(cls, cutoff):
        ms = mode_set(cutoff)
        return cls(ms, np.zeros((ms.count, 3), dtype=np.complex128))

    @classmethod
    def from_modes(cls, entries, cutoff):
        """Build a field from a {wavevector: complex 3-vector} mapping.

        Either member of a conjugate pair may be given; if both appear they
        must be consistent (Hermitian symmetry).  A k = 0 entry is rejected.
        """
        ms = mode_set(cutoff)
        coeffs = np.zeros((ms.count, 3), dtype=np.complex128)
        seen = {}
        for k, v in entries.items():
            key = tuple(int(c) for c in k)
            if key == (0, 0, 0):
                raise ValueError("zero-mean field cannot carry a k = 0 mode")
            v = np.asarray(v, dtype=np.complex128).reshape(3)
            row, conj = ms.row(key)
            stored = v.conj() if conj else v
            if row in seen and not np.allclose(seen[row], stored, rtol=0, atol=1e-13):
                raise ValueError(f"conflicting conjugate-pair entries near mode {key}")
            seen[row] = stored
            coeffs[row] = stored
        return cls(ms, coeffs)

    def coefficient(self, k):
        """u_hat(k) for any lattice vector in the band (conjugate implied)."""
        row, conj = self.modes.row(k)
        c = self.coeffs[row]
        return c.conj() if conj else c.copy()

    def copy(self):
        return SpectralVelocity(self.modes, self.coeffs.copy())

    def restrict(self, cutoff):
        """Truncate (or zero-pad) to another band."""
        ms = mode_set(cutoff)
        out = np.zeros((ms.count, 3), dtype=np.complex128)
        src, dst = self.modes, ms
        n = min(src.cutoff, dst.cutoff)
        small = mode_set(n)
        for k in small.reps:
            i, _ = src.row(k)
            j, _ = dst.row(k)
            out[j] = self.coeffs[i]
        return SpectralVelocity(ms, out)

    def __add__(self, other):
        self._check(other)
        return SpectralVelocity(self.modes, self.coeffs + other.coeffs)

    def __sub__(self, other):
        self._check(other)
        return SpectralVelocity(self.modes, self.coeffs - other.coeffs)

    def __mul__(self, scalar):
        return SpectralVelocity(self.modes, self.coeffs * float(scalar))

    __rmul__ = __mul__

    def _check(self, other):
        if self.modes is not other.modes:
            raise ValueError("fields live on different bands")

    def max_divergence(self):
        """max_k |k . u_hat(k)| (should sit at rounding level)."""
        if self.modes.count == 0:
            return 0.0
        d = np.einsum("mi,mi->m", self.modes.reps.astype(np.float64), self.coeffs)
        return float(np.max(np.abs(d)))


def sobolev_norm(u, s):
    """Homogeneous H^s norm, ( sum_k (2 pi |k|)^(2s) |u_hat(k)|^2 )^(1/2)."""
    w = u.modes.sobolev_weights(s)
    total = 2.0 * np.sum(w * np.sum(np.abs(u.coeffs) ** 2, axis=1))
    return float(np.sqrt(total))


def duality_pairing(u, v):
    """L^2 inner product <u, v> = sum_k u_hat(k) . conj(v_hat(k))."""
    u._check(v)
    return float(2.0 * np.real(np.sum(u.coeffs * np.conj(v.coeffs))))


def leray_coeffs(reps, coeffs):
    """Mode-wise (I - k k^T / |k|^2) applied to a coefficient array.

    Divergence components already at rounding level (|k . v| below 1e-14
    |k| |v|) are left untouched, which makes repeated projection bitwise
    idempotent.
    """
    kf = reps.astype(np.float64)
    k2 = np.sum(kf * kf, axis=1)
    dot = np.einsum("mi,mi->m", kf, coeffs)
    mag2 = np.sum(np.abs(coeffs) ** 2, axis=1)
    live = np.abs(dot) ** 2 > (1e-28 * k2) * mag2
    out = coeffs.copy()
    out[live] -= kf[live] * (dot[live] / k2[live])[:, None]
    return out


def leray_project(entries, cutoff):
    """Leray projection of a Hermitian mean-zero mode mapping onto a band.

    Gradient directions are annihilated mode by mode; the output satisfies the
    incompressibility invariant.  Rejects any k = 0 entry.
    """
    raw = SpectralVelocity.from_modes(entries, cutoff)
    return SpectralVelocity(raw.modes, leray_coeffs(raw.modes.reps, raw.coeffs))


def leray_project_field(u):
    """Re-apply the mode-wise Leray projection to an existing field."""
    return SpectralVelocity(u.modes, leray_coeffs(u.modes.reps, u.coeffs))


def fractional_laplacian(u, lam):
    """-(-Laplace)^lam, i.e. mode-wise multiplication by -(4 pi^2 |k|^2)^lam."""
    if not 1.0 <= lam < 2.0:
        raise ValueError("dissipation exponent must lie in [1, 2)")
    sym = -((TWO_PI * TWO_PI) * u.modes.k2.astype(np.float64)) ** lam
    return SpectralVelocity(u.modes, u.coeffs * sym[:, None])


# ---------------------------------------------------------------------------
# physical-grid transforms and the dealiased advection term
# ---------------------------------------------------------------------------


def default_grid(band):
    """Smallest fast FFT length that dealiases a quadratic band-`band` product."""
    return sfft.next_fast_len(3 * band, real=True)


def min_grid_for_product(band_a, band_b, out_band):
    """Grid needed so a band_a x band_b advection is alias-free on out_band.

    The only products that would wrap onto the output band at exactly this
    size sit at the extreme lattice corners (+-band, 0, 0), where the
    advection coefficient vanishes for divergence-free fields, so equality is
    safe and matches the 2/3 rule (grid >= 3 m for the self-advection).
    """
    return band_a + band_b + out_band


@functools.lru_cache(maxsize=64)
def _scatter_plan(cutoff, grid):
    """Index arrays embedding the half-stored band into an rfftn spectrum."""
    ms = mode_set(cutoff)
    gz = grid // 2 + 1
    direct = []  # rows placed as-is at +k
    conj = []  # rows placed conjugated at -k
    d_idx = []
    c_idx = []
    for i, k in enumerate(ms.reps):
        kx, ky, kz = (int(c) for c in k)
        if kz >= 0:
            direct.append(i)
            d_idx.append((kx % grid, ky % grid, kz))
        if kz <= 0:
            conj.append(i)
            c_idx.append((-kx % grid, -ky % grid, -kz))
    plan = {
        "direct": np.array(direct, dtype=np.intp),
        "conj": np.array(conj, dtype=np.intp),
        "d_idx": tuple(np.array([p[a] for p in d_idx], dtype=np.intp) for a in range(3)),
        "c_idx": tuple(np.array([p[a] for p in c_idx], dtype=np.intp) for a in range(3)),
        "gz": gz,
    }
    if plan["d_idx"][2].size and plan["d_idx"][2].max() >= gz:
        raise ValueError("grid too small to hold the requested band")
    return plan


def to_physical(u, grid):
    """Real-space samples of u on a grid^3 lattice, shape (3, grid, grid, grid)."""
    return to_physical_stack([u], grid)[0]


def to_physical_stack(fields, grid):
    """Batched inverse transform of several fields sharing one grid.

    Returns shape (len(fields), 3, grid, grid, grid); one FFT call total.
    """
    for u in fields:
        if grid <= 2 * u.cutoff:
            raise ValueError("grid too small to represent the band")
    gz = grid // 2 + 1
    spec = np.zeros((len(fields), 3, grid, grid, gz), dtype=np.complex128)
    for row, u in enumerate(fields):
        # scalar row + slice push the broadcast dims to the front: (N, 3)
        plan = _scatter_plan(u.cutoff, grid)
        dx, dy, dz = plan["d_idx"]
        spec[row, :, dx, dy, dz] = u.coeffs[plan["direct"]]
        cx, cy, cz = plan["c_idx"]
        spec[row, :, cx, cy, cz] = np.conj(u.coeffs[plan["conj"]])
    vol = float(grid) ** 3
    return sfft.irfftn(spec, s=(grid, grid, grid), axes=(2, 3, 4)) * vol


def _gather(spec, cutoff, grid):
    """Read band coefficients out of a stacked rfftn spectrum (truncation).

    spec has shape (F, grid, grid, grid//2+1); returns (modes, F).
    """
    plan = _scatter_plan(cutoff, grid)
    ms = mode_set(cutoff)
    out = np.empty((ms.count, spec.shape[0]), dtype=np.complex128)
    dx, dy, dz = plan["d_idx"]
    out[plan["direct"]] = spec[:, dx, dy, dz].T
    cx, cy, cz = plan["c_idx"]
    out[plan["conj"]] = np.conj(spec[:, cx, cy, cz]).T
    return out


def advect_physical(w_phys, u_phys, out_cutoff, grid):
    """Leray-projected advection Pi((w . grad) u) from physical-space samples.

    Uses the divergence form d_a(w_a u_b), valid because w is
    divergence-free; the caller guarantees the grid dealiases the product for
    the requested output band.  All nine product transforms run in one
    batched FFT call.
    """
    vol = float(grid) ** 3
    ms = mode_set(out_cutoff)
    kf = ms.reps.astype(np.float64)
    prod = w_phys[:, None, :, :, :] * u_phys[None, :, :, :, :]
    spec = sfft.rfftn(prod.reshape(9, grid, grid, grid), axes=(1, 2, 3)) / vol
    gathered = _gather(spec, out_cutoff, grid).reshape(ms.count, 3, 3)
    acc = (TWO_PI * 1j) * np.einsum("ma,mab->mb", kf, gathered)
    return SpectralVelocity(ms, leray_coeffs(ms.reps, acc))


def advect(w, u, out_cutoff=None, grid=None):
    """Pi((w . grad) u) on a chosen output band, fully dealiased.

    w must be divergence-free.  The default output band is u's; the default
    grid is the smallest alias-free fast length for that combination.
    """
    if out_cutoff is None:
        out_cutoff = u.cutoff
    need = min_grid_for_product(w.cutoff, u.cutoff, out_cutoff)
    if grid is None:
        grid = sfft.next_fast_len(need, real=True)
    elif grid < need:
        raise ValueError(
            f"grid {grid} too small for cutoffs ({w.cutoff}, {u.cutoff}) -> "
            f"{out_cutoff}: anti-aliasing needs at least {need}"
        )
    return advect_physical(to_physical(w, grid), to_physical(u, grid), out_cutoff, grid)


def nonlinear_term(u, grid=None):
    """Dealiased Pi(u . grad u) on u's own band (2/3-rule pseudo-spectral)."""
    if grid is not None and grid < 3 * u.cutoff:
        raise ValueError(
            f"grid {grid} too small for cutoff {u.cutoff}: anti-aliasing violated"
        )
    return advect(u, u, u.cutoff, grid)


# ---------------------------------------------------------------------------
# test / experiment field constructors
# ---------------------------------------------------------------------------


def random_field(cutoff, rng, decay=1.0, norm=None):
    """Random divergence-free field with |u_hat(k)| ~ |k|^(-decay) envelope."""
    ms = mode_set(cutoff)
    raw = rng.normal(size=(ms.count, 3)) + 1j * rng.normal(size=(ms.count, 3))
    envelope = ms.k2.astype(np.float64) ** (-decay / 2.0)
    coeffs = leray_coeffs(ms.reps, raw * envelope[:, None])
    u = SpectralVelocity(ms, coeffs)
    if norm is not None:
        current = sobolev_norm(u, 0)
        if current > 0:
            u = u * (norm / current)
    return u


def single_mode_field(k, amplitude, cutoff=None):
    """Real shear field a cos(2 pi k . x) + rotated sine part, from one pair.

    `amplitude` is the complex coefficient at +k; it is projected onto k-perp,
    so the result is always divergence-free.
    """
    k = tuple(int(c) for c in k)
    if cutoff is None:
        cutoff = int(np.ceil(np.sqrt(sum(c * c for c in k))))
    return leray_project({k: np.asarray(amplitude, dtype=np.complex128)}, cutoff)
