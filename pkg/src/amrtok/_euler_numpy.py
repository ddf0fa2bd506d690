"""Pure-numpy MUSCL + Rusanov sweep, the fallback for the compiled kernel.

The compiled Cython version in ``amrtok._native._euler`` mirrors these
expressions operation for operation (and is built with -ffp-contract=off),
so both backends produce bit-identical results. Any change here must be
made in the .pyx file as well; the parity tests enforce agreement.

Conservative variable order along the last axis: [rho, rho*u, rho*v, E].
"""
import numpy as np


def _minmod(a, b):
    # sign-consistent pair -> the one nearer zero, else 0
    return np.where(a * b <= 0.0, 0.0, np.where(np.abs(a) < np.abs(b), a, b))


def _flux_and_speed(U, gamma):
    rho = U[..., 0]
    u = U[..., 1] / rho
    v = U[..., 2] / rho
    p = (gamma - 1.0) * (U[..., 3] - 0.5 * rho * (u * u + v * v))
    F = np.empty_like(U)
    F[..., 0] = U[..., 1]
    F[..., 1] = U[..., 1] * u + p
    F[..., 2] = U[..., 2] * u
    F[..., 3] = (U[..., 3] + p) * u
    speed = np.abs(u) + np.sqrt(gamma * p / rho)
    return F, speed, rho, p


def muscl_rusanov_sweep(Up, gamma, h):
    """Flux-difference update along the last spatial axis.

    Up: (H, W + 4, 4) float64, two ghost cells per side already applied.
    Returns dU = -(F_{j+1/2} - F_{j-1/2}) / h of shape (H, W, 4).
    """
    dL = Up[:, 1:-1] - Up[:, :-2]
    dR = Up[:, 2:] - Up[:, 1:-1]
    slope = _minmod(dL, dR)

    mid = Up[:, 1:-1]
    right_edge = mid + 0.5 * slope
    left_edge = mid - 0.5 * slope

    UL = right_edge[:, :-1]
    UR = left_edge[:, 1:]

    # fall back to first-order at interfaces whose reconstructed state is
    # unphysical (can happen across strong shocks)
    gm1 = gamma - 1.0

    def _bad(U):
        rho = U[..., 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            ke = 0.5 * (U[..., 1] * U[..., 1] + U[..., 2] * U[..., 2]) / rho
            p = gm1 * (U[..., 3] - ke)
        return ~((rho > 0.0) & (p > 0.0))

    bad = (_bad(UL) | _bad(UR))[..., None]
    UL = np.where(bad, Up[:, 1:-2], UL)
    UR = np.where(bad, Up[:, 2:-1], UR)

    FL, sL, _, _ = _flux_and_speed(UL, gamma)
    FR, sR, _, _ = _flux_and_speed(UR, gamma)
    smax = np.maximum(sL, sR)[..., None]
    flux = 0.5 * (FL + FR) - 0.5 * smax * (UR - UL)

    return -(flux[:, 1:] - flux[:, :-1]) / h
