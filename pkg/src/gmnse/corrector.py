"""Stratonovich-Ito corrector for transport noise.

The corrector (3 nu / 2) sum_{k,i} theta_k^2 Pi[sigma_{k,i} . grad
Pi(sigma_{-k,i} . grad u)] shifts every mode l to l - k and straight back, so
it acts block-diagonally: one real symmetric 3x3 matrix per mode,

    A(l) = -6 pi^2 nu sum_k theta_k^2 (|l|^2 - (k.l)^2/|k|^2) P(l) P(l-k) P(l),

where P(q) = I - q q^T/|q|^2 and the sum runs over both signs of every active
noise mode (the i-sum collapses because {a_{k,1}, a_{k,2}} is an orthonormal
basis of k-perp).  With both projections dropped the angular average over each
radial shell gives exactly nu * Laplacian; with them kept, A converges to
(3 nu / 5) * Laplacian as the noise band widens at fixed total variance.

Matrices are assembled once per (band, theta, basis) and reused; application
is a batched 3x3 matrix-vector product, bit-stable because the k-ordering is
fixed.
"""

from __future__ import annotations

import numpy as np

from .spectral import SpectralVelocity, fractional_laplacian, mode_set, sobolev_norm

SIX_PI_SQ = 6.0 * np.pi**2


def _two_sided_band(theta):
    """(K,3) active noise modes over both signs with aligned theta^2 weights."""
    reps = theta.modes.reps.astype(np.float64)
    k_all = np.concatenate([reps, -reps], axis=0)
    theta2 = np.concatenate([theta.values**2, theta.values**2])
    return k_all, theta2


def _projector(q):
    """P(q) = I - q q^T / |q|^2 row-wise for a (K,3) array; zero rows for q=0."""
    q2 = np.einsum("ki,ki->k", q, q)
    safe = np.where(q2 > 0, q2, 1.0)
    outer = q[:, :, None] * q[:, None, :] / safe[:, None, None]
    eye = np.broadcast_to(np.eye(3), outer.shape).copy()
    eye[q2 == 0] = 0.0
    outer[q2 == 0] = 0.0
    return eye - outer


def _projector_moment_sums(l_block, k_all, theta2, sign, band_limit=None):
    """sum_k w_k(l) P(l + sign * k) for a block of modes l, via BLAS moments.

    w_k(l) = theta_k^2 (|l|^2 - (k.l)^2 / |k|^2).  With q = l + sign k the
    projector sum expands into weighted moments of 1, k and k k^T, which are
    (L,K) x (K,.) matrix products.  band_limit restricts to 0 < |q| <= limit
    (used by the truncated noise-energy form); otherwise only q = 0 drops out
    (its weight already vanishes).
    """
    l2 = np.einsum("li,li->l", l_block, l_block)
    k2 = np.einsum("ki,ki->k", k_all, k_all)
    lk = l_block @ k_all.T
    w = theta2[None, :] * (l2[:, None] - lk * lk / k2[None, :])
    q2 = l2[:, None] + 2.0 * sign * lk + k2[None, :]
    keep = q2 > 0
    if band_limit is not None:
        keep &= q2 <= band_limit * band_limit
        w = np.where(keep, w, 0.0)
    wt = np.where(keep, w / np.where(keep, q2, 1.0), 0.0)

    kk9 = (k_all[:, :, None] * k_all[:, None, :]).reshape(-1, 9)
    s0 = np.sum(w, axis=1)
    s0t = np.sum(wt, axis=1)
    s1 = wt @ k_all
    s2 = (wt @ kk9).reshape(-1, 3, 3)

    ll = l_block[:, :, None] * l_block[:, None, :]
    cross = sign * (l_block[:, :, None] * s1[:, None, :])
    caa = s0t[:, None, None] * ll + cross + cross.transpose(0, 2, 1) + s2
    eye = np.eye(3)[None, :, :]
    return s0[:, None, None] * eye - caa, s0


class CorrectorOperator:
    """Precomputed block-diagonal corrector on a fixed velocity band."""

    def __init__(self, cutoff, theta, basis, nu, project=True):
        if theta.n != basis.n:
            raise ValueError("theta and basis bands disagree")
        if nu <= 0:
            raise ValueError("noise intensity must be positive")
        self.cutoff = int(cutoff)
        self.nu = float(nu)
        self.project = bool(project)
        ms = mode_set(cutoff)
        self.modes = ms
        k_all, theta2 = _two_sided_band(theta)
        mats = np.empty((ms.count, 3, 3))
        chunk = max(1, int(4_000_000 / max(len(theta2), 1)))
        for lo in range(0, ms.count, chunk):
            block = ms.reps[lo : lo + chunk].astype(np.float64)
            if project:
                summed, _ = _projector_moment_sums(block, k_all, theta2, -1.0)
                pl = _projector(block)
                mats[lo : lo + chunk] = (
                    -SIX_PI_SQ * self.nu * np.einsum("lij,ljk,lkn->lin", pl, summed, pl)
                )
            else:
                _, s0 = _projector_moment_sums(block, k_all, theta2, -1.0)
                mats[lo : lo + chunk] = (
                    -SIX_PI_SQ * self.nu * s0[:, None, None] * np.eye(3)[None]
                )
        self.matrices = mats

    def apply(self, u):
        if u.modes is not self.modes:
            raise ValueError("field band does not match the operator band")
        out = np.einsum("mij,mj->mi", self.matrices, u.coeffs)
        return SpectralVelocity(self.modes, out)


def corrector_apply(u, theta, basis, nu, project=True):
    """Evaluate the corrector drift on u (exact mode-space evaluation)."""
    return CorrectorOperator(u.cutoff, theta, basis, nu, project=project).apply(u)


def corrector_deviation(phi, theta, basis, nu, b, alpha):
    """Distance of the corrector from its wide-band limit.

    Returns || S(phi) - (3 nu / 5) Laplace(phi) ||_{H^(b - 2 - alpha)}.
    """
    s_phi = corrector_apply(phi, theta, basis, nu)
    target = 0.6 * nu * fractional_laplacian(phi, 1.0)
    return sobolev_norm(s_phi - target, b - 2.0 - alpha)


class NoiseEnergyForm:
    """Quadratic form giving the exact one-step Ito noise energy input.

    E ||dM||^2 = dt * sum_l u_hat(l)* Q(l) u_hat(l) with

        Q(l) = 12 pi^2 nu sum_{k : 0 < |l+k| <= m} theta_k^2
               (|l|^2 - (k.l)^2/|k|^2) P(l + k),

    i.e. the Galerkin-truncated counterpart of the corrector's dissipation.
    Used by the energy audit to compensate the martingale part exactly.
    """

    def __init__(self, cutoff, theta, basis, nu):
        ms = mode_set(cutoff)
        self.modes = ms
        self.nu = float(nu)
        k_all, theta2 = _two_sided_band(theta)
        mats = np.empty((ms.count, 3, 3))
        chunk = max(1, int(4_000_000 / max(len(theta2), 1)))
        for lo in range(0, ms.count, chunk):
            block = ms.reps[lo : lo + chunk].astype(np.float64)
            summed, _ = _projector_moment_sums(
                block, k_all, theta2, +1.0, band_limit=cutoff
            )
            mats[lo : lo + chunk] = 2.0 * SIX_PI_SQ * self.nu * summed
        self.matrices = mats

    def rate(self, u):
        """sum over the full band of u_hat(l)* Q(l) u_hat(l) (real)."""
        if u.modes is not self.modes:
            raise ValueError("field band does not match the form's band")
        vals = np.einsum("mi,mij,mj->m", np.conj(u.coeffs), self.matrices, u.coeffs)
        return float(2.0 * np.sum(np.real(vals)))
