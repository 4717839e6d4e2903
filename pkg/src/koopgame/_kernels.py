"""Hot loops with a numba implementation and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``KOOPGAME_NO_NUMBA`` is unset or ``0``.  Both paths are always
importable as ``NUMPY_KERNELS`` and ``NUMBA_KERNELS`` (the latter is ``None``
without numba) so they can be compared directly.

Kernels
-------
turret_rk4
    Batched fixed-step RK4 of the turret game under zero-order-hold
    velocity controls, with the running cost carried as an extra state.
rbf_matrices
    Gaussian RBF values and first derivatives at a set of points.
turret_closed_loop
    Batched RK4 of the turret game under RBF feedback policies that are
    re-evaluated at every stage.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

__all__ = ["KERNELS", "NUMPY_KERNELS", "NUMBA_KERNELS", "BACKEND", "numba_disabled"]


def numba_disabled() -> bool:
    """Return True when the environment asks for the numpy fallback."""
    flag = os.environ.get("KOOPGAME_NO_NUMBA", "0").strip().lower()
    return flag not in ("", "0", "false", "no")


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def _turret_rhs_np(r, a, vpar, vperp, u, c_h):
    return r * r * vpar, r * vperp - u, c_h * r * np.cos(a)


def turret_rk4_np(x0, u, vpar, vperp, dt, c_h):
    """Integrate a batch of turret trajectories with RK4.

    Parameters
    ----------
    x0 : ndarray, shape (B, 2)
        Initial states ``(r, alpha)``.
    u, vpar, vperp : ndarray, shape (B, n)
        Piecewise-constant turret rate and agent velocity components.
    dt : float
        Step length.
    c_h : float
        Running-cost weight, ``h = c_h * r * cos(alpha)``.

    Returns
    -------
    states : ndarray, shape (B, n + 1, 2)
    running : ndarray, shape (B,)
        RK4 integral of the running cost.
    """
    B, n = u.shape
    states = np.empty((B, n + 1, 2))
    states[:, 0] = x0
    r = x0[:, 0].astype(float).copy()
    a = x0[:, 1].astype(float).copy()
    acc = np.zeros(B)
    h2 = 0.5 * dt
    for k in range(n):
        uk, pk, qk = u[:, k], vpar[:, k], vperp[:, k]
        k1r, k1a, k1c = _turret_rhs_np(r, a, pk, qk, uk, c_h)
        k2r, k2a, k2c = _turret_rhs_np(r + h2 * k1r, a + h2 * k1a, pk, qk, uk, c_h)
        k3r, k3a, k3c = _turret_rhs_np(r + h2 * k2r, a + h2 * k2a, pk, qk, uk, c_h)
        k4r, k4a, k4c = _turret_rhs_np(r + dt * k3r, a + dt * k3a, pk, qk, uk, c_h)
        r = r + dt / 6.0 * (k1r + 2 * k2r + 2 * k3r + k4r)
        a = a + dt / 6.0 * (k1a + 2 * k2a + 2 * k3a + k4a)
        acc = acc + dt / 6.0 * (k1c + 2 * k2c + 2 * k3c + k4c)
        states[:, k + 1, 0] = r
        states[:, k + 1, 1] = a
    return states, acc


def rbf_matrices_np(X, centers, scale, eps2):
    """Gaussian kernel values and gradients.

    The kernel is ``exp(-eps2 * sum_k ((x_k - c_k) / scale_k) ** 2)``.

    Returns
    -------
    G : ndarray, shape (M, nb)
    dG : ndarray, shape (d, M, nb)
        ``dG[k, j, i]`` is the derivative of kernel ``i`` along coordinate
        ``k`` at point ``j``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    d = (X[:, None, :] - centers[None, :, :]) / scale
    G = np.exp(-eps2 * np.sum(d * d, axis=-1))
    dG = np.empty((X.shape[1],) + G.shape)
    for k in range(X.shape[1]):
        dG[k] = -2.0 * eps2 * d[..., k] / scale[k] * G
    return G, dG


def _policy_np(r, a, centers, scale, eps2, coef, u_max, v_max):
    X = np.stack([r, a], axis=-1)
    d = (X[:, None, :] - centers[None, :, :]) / scale
    phi = np.exp(-eps2 * np.sum(d * d, axis=-1))
    vals = phi @ coef.T
    u = np.clip(vals[:, 0], -u_max, u_max)
    p, q = vals[:, 1], vals[:, 2]
    nrm = np.sqrt(p * p + q * q)
    s = np.where(nrm > v_max, v_max / np.maximum(nrm, 1e-300), 1.0)
    return u, p * s, q * s


def turret_closed_loop_np(x0, centers, scale, eps2, coef, dt, n, c_h, u_max, v_max):
    """Closed-loop RK4 rollout under RBF feedback policies.

    ``coef`` has rows for ``u``, ``v`` and ``v_perp``.  The turret rate is
    saturated at ``u_max`` and the agent velocity at norm ``v_max``.
    """
    B = x0.shape[0]
    states = np.empty((B, n + 1, 2))
    states[:, 0] = x0
    r = x0[:, 0].astype(float).copy()
    a = x0[:, 1].astype(float).copy()
    acc = np.zeros(B)
    h2 = 0.5 * dt

    def rhs(rr, aa):
        u, p, q = _policy_np(rr, aa, centers, scale, eps2, coef, u_max, v_max)
        return _turret_rhs_np(rr, aa, p, q, u, c_h)

    for k in range(n):
        k1r, k1a, k1c = rhs(r, a)
        k2r, k2a, k2c = rhs(r + h2 * k1r, a + h2 * k1a)
        k3r, k3a, k3c = rhs(r + h2 * k2r, a + h2 * k2a)
        k4r, k4a, k4c = rhs(r + dt * k3r, a + dt * k3a)
        r = r + dt / 6.0 * (k1r + 2 * k2r + 2 * k3r + k4r)
        a = a + dt / 6.0 * (k1a + 2 * k2a + 2 * k3a + k4a)
        acc = acc + dt / 6.0 * (k1c + 2 * k2c + 2 * k3c + k4c)
        states[:, k + 1, 0] = r
        states[:, k + 1, 1] = a
    return states, acc


NUMPY_KERNELS = SimpleNamespace(
    name="numpy",
    turret_rk4=turret_rk4_np,
    rbf_matrices=rbf_matrices_np,
    turret_closed_loop=turret_closed_loop_np,
)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

def _build_numba():
    try:
        from numba import njit
    except Exception:  # pragma: no cover - numba missing or broken
        return None

    @njit(cache=True)
    def turret_rk4(x0, u, vpar, vperp, dt, c_h):
        B, n = u.shape
        states = np.empty((B, n + 1, 2))
        acc = np.zeros(B)
        h2 = 0.5 * dt
        for b in range(B):
            r = x0[b, 0]
            a = x0[b, 1]
            states[b, 0, 0] = r
            states[b, 0, 1] = a
            s = 0.0
            for k in range(n):
                uk = u[b, k]
                pk = vpar[b, k]
                qk = vperp[b, k]
                k1r = r * r * pk
                k1a = r * qk - uk
                k1c = c_h * r * np.cos(a)
                r2 = r + h2 * k1r
                a2 = a + h2 * k1a
                k2r = r2 * r2 * pk
                k2a = r2 * qk - uk
                k2c = c_h * r2 * np.cos(a2)
                r3 = r + h2 * k2r
                a3 = a + h2 * k2a
                k3r = r3 * r3 * pk
                k3a = r3 * qk - uk
                k3c = c_h * r3 * np.cos(a3)
                r4 = r + dt * k3r
                a4 = a + dt * k3a
                k4r = r4 * r4 * pk
                k4a = r4 * qk - uk
                k4c = c_h * r4 * np.cos(a4)
                r = r + dt / 6.0 * (k1r + 2.0 * k2r + 2.0 * k3r + k4r)
                a = a + dt / 6.0 * (k1a + 2.0 * k2a + 2.0 * k3a + k4a)
                s = s + dt / 6.0 * (k1c + 2.0 * k2c + 2.0 * k3c + k4c)
                states[b, k + 1, 0] = r
                states[b, k + 1, 1] = a
            acc[b] = s
        return states, acc

    @njit(cache=True)
    def rbf_matrices(X, centers, scale, eps2):
        M, dim = X.shape
        nb = centers.shape[0]
        G = np.empty((M, nb))
        dG = np.empty((dim, M, nb))
        for j in range(M):
            for i in range(nb):
                s = 0.0
                for k in range(dim):
                    t = (X[j, k] - centers[i, k]) / scale[k]
                    s += t * t
                g = np.exp(-eps2 * s)
                G[j, i] = g
                for k in range(dim):
                    t = (X[j, k] - centers[i, k]) / scale[k]
                    dG[k, j, i] = -2.0 * eps2 * t / scale[k] * g
        return G, dG

    @njit(cache=True)
    def _policy(r, a, centers, scale, eps2, coef, u_max, v_max):
        nb = centers.shape[0]
        u = 0.0
        p = 0.0
        q = 0.0
        for i in range(nb):
            t0 = (r - centers[i, 0]) / scale[0]
            t1 = (a - centers[i, 1]) / scale[1]
            g = np.exp(-eps2 * (t0 * t0 + t1 * t1))
            u += coef[0, i] * g
            p += coef[1, i] * g
            q += coef[2, i] * g
        if u > u_max:
            u = u_max
        elif u < -u_max:
            u = -u_max
        nrm = np.sqrt(p * p + q * q)
        if nrm > v_max:
            p *= v_max / nrm
            q *= v_max / nrm
        return u, p, q

    @njit(cache=True)
    def turret_closed_loop(x0, centers, scale, eps2, coef, dt, n, c_h, u_max, v_max):
        B = x0.shape[0]
        states = np.empty((B, n + 1, 2))
        acc = np.zeros(B)
        h2 = 0.5 * dt
        for b in range(B):
            r = x0[b, 0]
            a = x0[b, 1]
            states[b, 0, 0] = r
            states[b, 0, 1] = a
            s = 0.0
            for k in range(n):
                u, p, q = _policy(r, a, centers, scale, eps2, coef, u_max, v_max)
                k1r = r * r * p
                k1a = r * q - u
                k1c = c_h * r * np.cos(a)
                r2 = r + h2 * k1r
                a2 = a + h2 * k1a
                u, p, q = _policy(r2, a2, centers, scale, eps2, coef, u_max, v_max)
                k2r = r2 * r2 * p
                k2a = r2 * q - u
                k2c = c_h * r2 * np.cos(a2)
                r3 = r + h2 * k2r
                a3 = a + h2 * k2a
                u, p, q = _policy(r3, a3, centers, scale, eps2, coef, u_max, v_max)
                k3r = r3 * r3 * p
                k3a = r3 * q - u
                k3c = c_h * r3 * np.cos(a3)
                r4 = r + dt * k3r
                a4 = a + dt * k3a
                u, p, q = _policy(r4, a4, centers, scale, eps2, coef, u_max, v_max)
                k4r = r4 * r4 * p
                k4a = r4 * q - u
                k4c = c_h * r4 * np.cos(a4)
                r = r + dt / 6.0 * (k1r + 2.0 * k2r + 2.0 * k3r + k4r)
                a = a + dt / 6.0 * (k1a + 2.0 * k2a + 2.0 * k3a + k4a)
                s = s + dt / 6.0 * (k1c + 2.0 * k2c + 2.0 * k3c + k4c)
                states[b, k + 1, 0] = r
                states[b, k + 1, 1] = a
            acc[b] = s
        return states, acc

    return SimpleNamespace(
        name="numba",
        turret_rk4=turret_rk4,
        rbf_matrices=rbf_matrices,
        turret_closed_loop=turret_closed_loop,
    )


NUMBA_KERNELS = _build_numba()

if NUMBA_KERNELS is not None and not numba_disabled():
    KERNELS = NUMBA_KERNELS
else:
    KERNELS = NUMPY_KERNELS

BACKEND = KERNELS.name
