"""Open-loop equilibria of lifted linear games as complementarity problems.

Both players share the lifted dynamics ``Psi_{t+1} = K Psi_t + B w_t`` with
``w_t = [u_t; v_t]``.  Eliminating the states with the Markov parameters
``C K^{i-1-s} B`` leaves a square system in the controls and the
inequality duals:

* one stationarity row per control component, each in its owner's
  Lagrangian (``v`` minimizes ``J``, ``u`` maximizes it),
* one Fischer-Burmeister row ``phi(lambda, -c) = 0`` per inequality
  ``c <= 0``.

The eliminated dynamics duals (costates) are recovered afterwards by a
backward recursion, which also gives the full uncondensed KKT residual.
"""

from __future__ import annotations

import itertools
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .edmdc import KoopmanControlModel
from .errors import LinearSolveFailure, ModelMismatchError
from .game import (Trajectory, TrajectoryClass, TurretDefenseGame, classify_trajectory,
                   integrate_flow)

__all__ = [
    "fischer_burmeister",
    "ConstraintBlock",
    "GameMCP",
    "NewtonResult",
    "semismooth_newton",
    "solve_lcp",
    "lcp_enumerate",
    "lq_mcp",
    "assemble_mcp",
    "initial_guess",
    "solve_mcp",
    "EquilibriumTrajectory",
    "validate_in_truth",
    "batch_solve",
    "BatchResult",
]


# ---------------------------------------------------------------------------
# Fischer-Burmeister
# ---------------------------------------------------------------------------

def fischer_burmeister(a, b):
    """``phi(a, b) = a + b - sqrt(a^2 + b^2)`` and its partial derivatives.

    At the kink ``a = b = 0`` the element ``(1 - 1/sqrt 2, 1 - 1/sqrt 2)``
    of the generalized Jacobian is returned.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    rho = np.hypot(a, b)
    kink = rho <= 1e-14
    safe = np.where(kink, 1.0, rho)
    phi = a + b - rho
    da = np.where(kink, 1.0 - 1.0 / math.sqrt(2.0), 1.0 - a / safe)
    db = np.where(kink, 1.0 - 1.0 / math.sqrt(2.0), 1.0 - b / safe)
    return phi, da, db


# ---------------------------------------------------------------------------
# Semismooth Newton
# ---------------------------------------------------------------------------

@dataclass
class NewtonResult:
    z: np.ndarray
    residual: float
    iterations: int
    converged: bool
    history: list
    status: str


def _solve_newton_system(J, F):
    try:
        d = np.linalg.solve(J, -F)
        if np.all(np.isfinite(d)):
            return d
    except np.linalg.LinAlgError:
        pass
    try:
        d = np.linalg.solve(J + 1e-8 * np.eye(J.shape[0]), -F)
        if np.all(np.isfinite(d)):
            return d
    except np.linalg.LinAlgError:
        pass
    raise LinearSolveFailure("Newton system singular after Tikhonov shift 1e-8")


def semismooth_newton(fun: Callable, z0, *, tol: float = 1e-6, max_iter: int = 200,
                      memory: int = 5, armijo: float = 1e-4, max_backtracks: int = 20,
                      callback: Optional[Callable] = None) -> NewtonResult:
    """Newton's method for a semismooth equation ``F(z) = 0``.

    Parameters
    ----------
    fun : callable
        ``fun(z, jac)`` returns ``F`` or ``(F, J)``.
    z0 : ndarray
    tol : float
        Success when ``max |F| <= tol``.
    memory : int
        Window of the nonmonotone Armijo test on ``0.5 |F|^2``.  When the
        Newton direction fails it, a Levenberg-Marquardt step with damping
        ``|F|`` is tried against the monotone test.

    Returns
    -------
    NewtonResult
        Always the best iterate seen, flagged ``converged`` or not.
    """
    z = np.array(z0, dtype=float)
    best_res, best_z = np.inf, z.copy()
    hist, merits = [], []
    status = "max_iterations"
    it = 0
    for it in range(max_iter + 1):
        F, J = fun(z, True)
        res = float(np.max(np.abs(F))) if F.size else 0.0
        hist.append(res)
        if not math.isfinite(res):
            status = "non_finite"
            break
        if res < best_res:
            best_res, best_z = res, z.copy()
        if callback is not None:
            callback(it, z, res)
        if res <= tol:
            status = "converged"
            break
        if it == max_iter:
            break
        theta = 0.5 * float(F @ F)
        merits.append(theta)
        ref = max(merits[-memory:])
        g = J.T @ F
        try:
            d = _solve_newton_system(J, F)
        except LinearSolveFailure:
            d = None
        accepted = False
        if d is not None:
            slope = float(g @ d)
            t = 1.0
            for _ in range(max_backtracks):
                Ft = fun(z + t * d, False)
                if np.all(np.isfinite(Ft)) and 0.5 * float(Ft @ Ft) <= ref + armijo * t * slope:
                    accepted = True
                    break
                t *= 0.5
        if not accepted:
            lam = math.sqrt(2.0 * theta)
            A = J.T @ J + lam * np.eye(J.shape[1])
            try:
                d = np.linalg.solve(A, -g)
            except np.linalg.LinAlgError:
                raise LinearSolveFailure("Levenberg-Marquardt system singular") from None
            slope = float(g @ d)
            t = 1.0
            for _ in range(2 * max_backtracks):
                Ft = fun(z + t * d, False)
                if np.all(np.isfinite(Ft)) and 0.5 * float(Ft @ Ft) <= theta + armijo * t * slope:
                    break
                t *= 0.5
        z = z + t * d
    return NewtonResult(best_z, best_res, it, best_res <= tol, hist, status if best_res > tol else "converged")


# ---------------------------------------------------------------------------
# Linear complementarity
# ---------------------------------------------------------------------------

def solve_lcp(M, q, *, tol: float = 1e-10, max_iter: int = 100, x0=None) -> NewtonResult:
    """Solve ``0 <= x  perp  M x + q >= 0`` by semismooth Newton.

    Examples
    --------
    >>> res = solve_lcp(np.array([[1.0]]), np.array([-1.0]))
    >>> round(float(res.z[0]), 12)
    1.0
    """
    M = np.asarray(M, dtype=float)
    q = np.asarray(q, dtype=float)
    n = q.size

    def fun(x, jac):
        w = M @ x + q
        phi, da, db = fischer_burmeister(x, w)
        if not jac:
            return phi
        return phi, np.diag(da) + db[:, None] * M

    z0 = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float)
    return semismooth_newton(fun, z0, tol=tol, max_iter=max_iter)


def lcp_enumerate(M, q, tol: float = 1e-10):
    """Brute-force LCP solution over all ``2^n`` active sets.

    Returns the first complementary solution found, or None.
    """
    M = np.asarray(M, dtype=float)
    q = np.asarray(q, dtype=float)
    n = q.size
    for k in range(n + 1):
        for S in itertools.combinations(range(n), k):
            S = list(S)
            x = np.zeros(n)
            if S:
                try:
                    x[S] = np.linalg.solve(M[np.ix_(S, S)], -q[S])
                except np.linalg.LinAlgError:
                    continue
            w = M @ x + q
            if np.all(x >= -tol) and np.all(w >= -tol):
                return x
    return None


# ---------------------------------------------------------------------------
# Condensed game MCP
# ---------------------------------------------------------------------------

@dataclass
class ConstraintBlock:
    """Inequality ``c(xi_t) <= 0`` at a set of time indices.

    ``xi_t = [y_t; w_t]`` stacks the outputs and the controls of step
    ``t`` (controls are zero at the terminal index).

    Attributes
    ----------
    name : str
    players : tuple of str
        Players whose Lagrangians carry this block.  A shared block has a
        single dual used by both players.
    times : ndarray of int
    fun : callable
        ``fun(xi) -> (c, grad, hess)`` for ``xi`` of shape ``(k, c + m)``.
    active_hint : bool
        The constraint is expected active everywhere; the dual warm start
        then uses a norm estimate with a small floor.
    """

    name: str
    players: tuple
    times: np.ndarray
    fun: Callable
    active_hint: bool = False

    @property
    def size(self) -> int:
        return int(len(self.times))


class GameMCP:
    """Condensed KKT system of a lifted linear zero-sum game.

    Parameters
    ----------
    K : ndarray, shape (N, N)
    B : ndarray, shape (N, m)
    C : ndarray, shape (c, N)
        Output map; costs and constraints depend on ``y = C Psi``.
    psi0 : ndarray, shape (N,)
    n_steps : int
        Number of control intervals; states are indexed ``0..n_steps``.
    u_cols, v_cols : sequence of int
        Columns of ``w`` owned by the maximizer ``u`` and minimizer ``v``.
    hess, lin : ndarray
        Stage cost ``0.5 xi^T hess[t] xi + lin[t] . xi`` for
        ``t = 0..n_steps`` with shapes ``(n + 1, c + m, c + m)`` and
        ``(n + 1, c + m)``.
    blocks : sequence of ConstraintBlock
    output_names : sequence of str, optional
    """

    def __init__(self, K, B, C, psi0, n_steps, u_cols, v_cols, hess, lin, blocks=(),
                 output_names=None):
        self.K = np.asarray(K, dtype=float)
        self.B = np.asarray(B, dtype=float)
        self.C = np.asarray(C, dtype=float)
        self.psi0 = np.asarray(psi0, dtype=float)
        self.n = int(n_steps)
        if self.n < 1:
            raise ValueError("need at least one control interval")
        self.N = self.K.shape[0]
        self.m = self.B.shape[1]
        self.c = self.C.shape[0]
        self.u_cols = list(u_cols)
        self.v_cols = list(v_cols)
        self.hess = np.asarray(hess, dtype=float)
        self.lin = np.asarray(lin, dtype=float)
        self.blocks = list(blocks)
        self.output_names = list(output_names) if output_names is not None else None
        self._build()

    def _build(self):
        n, c, m = self.n, self.c, self.m
        P = np.empty((n + 1, c, self.N))
        P[0] = self.C
        for i in range(1, n + 1):
            P[i] = P[i - 1] @ self.K
        self.markov_free = P
        self.y0 = P @ self.psi0
        PB = P[:n] @ self.B
        E = np.zeros((n + 1, c + m, n, m))
        for i in range(1, n + 1):
            # y_i depends on w_s through C K^{i-1-s} B
            E[i, :c, :i, :] = np.transpose(PB[i - 1::-1], (1, 0, 2)) if i > 0 else 0.0
        for s in range(n):
            E[s, c:, s, :] = np.eye(m)
        self.E3 = E.reshape(n + 1, c + m, n * m)
        self.E = self.E3.reshape((n + 1) * (c + m), n * m)
        self.xi0 = np.zeros((n + 1, c + m))
        self.xi0[:, :c] = self.y0
        self.player_cols = {
            "u": np.array([s * m + k for s in range(n) for k in self.u_cols], dtype=int),
            "v": np.array([s * m + k for s in range(n) for k in self.v_cols], dtype=int),
        }
        self.sign = {"u": -1.0, "v": 1.0}
        offs = [n * m]
        for b in self.blocks:
            offs.append(offs[-1] + b.size)
        self.dual_slices = {b.name: slice(offs[i], offs[i + 1]) for i, b in enumerate(self.blocks)}
        self.n_vars = offs[-1]

    # bookkeeping -----------------------------------------------------------
    def variable_counts(self) -> dict:
        """Variable counts of the condensed and of the full KKT systems.

        The full system carries lifted states ``Psi_0..Psi_n``, controls,
        one dynamics dual per state row and player (including the initial
        condition row) and the inequality duals.
        """
        n, N, m = self.n, self.N, self.m
        ineq = sum(b.size for b in self.blocks)
        return {
            "condensed": self.n_vars,
            "full_primal": (n + 1) * N + n * m,
            "full_dynamics_duals": 2 * (n + 1) * N,
            "inequality_duals": ineq,
            "full_total": (n + 1) * N + n * m + 2 * (n + 1) * N + ineq,
        }

    def split(self, z):
        w = z[:self.n * self.m].reshape(self.n, self.m)
        duals = {b.name: z[self.dual_slices[b.name]] for b in self.blocks}
        return w, duals

    def xi(self, w):
        return self.xi0 + (self.E @ np.ravel(w)).reshape(self.n + 1, self.c + self.m)

    def outputs(self, w):
        return self.xi(w)[:, :self.c]

    def lifted_states(self, w):
        psi = np.empty((self.n + 1, self.N))
        psi[0] = self.psi0
        for t in range(self.n):
            psi[t + 1] = self.K @ psi[t] + self.B @ w[t]
        return psi

    def cost(self, w) -> float:
        X = self.xi(w)
        return float(0.5 * np.einsum("ta,tab,tb->", X, self.hess, X) + np.einsum("ta,ta->", self.lin, X))

    # residual --------------------------------------------------------------
    def _player_gradients(self, X, duals, evals):
        gxi = np.einsum("tab,tb->ta", self.hess, X) + self.lin
        out = {}
        for p in ("u", "v"):
            G = self.sign[p] * gxi
            for b in self.blocks:
                if p in b.players:
                    _, gr, _ = evals[b.name]
                    np.add.at(G, b.times, duals[b.name][:, None] * gr)
            out[p] = G
        return out

    def residual(self, z, jac: bool = True):
        w, duals = self.split(z)
        X = self.xi(w)
        T = self.n + 1
        evals = {b.name: b.fun(X[b.times]) for b in self.blocks}
        G = self._player_gradients(X, duals, evals)
        parts = []
        for p in ("u", "v"):
            Ep = self.E[:, self.player_cols[p]]
            parts.append(Ep.T @ G[p].ravel())
        fb = {}
        for b in self.blocks:
            cval, _, _ = evals[b.name]
            fb[b.name] = fischer_burmeister(duals[b.name], -cval)
            parts.append(fb[b.name][0])
        F = np.concatenate(parts)
        if not jac:
            return F
        J = np.zeros((self.n_vars, self.n_vars))
        nw = self.n * self.m
        row = 0
        for p in ("u", "v"):
            cols = self.player_cols[p]
            Ep = self.E[:, cols]
            H = self.sign[p] * self.hess.copy()
            for b in self.blocks:
                if p in b.players:
                    _, _, hb = evals[b.name]
                    np.add.at(H, b.times, duals[b.name][:, None, None] * hb)
            HE = np.einsum("tab,tbj->taj", H, self.E3).reshape(-1, nw)
            rows = slice(row, row + cols.size)
            J[rows, :nw] = Ep.T @ HE
            for b in self.blocks:
                if p in b.players:
                    _, gr, _ = evals[b.name]
                    D = np.zeros((T, self.c + self.m, b.size))
                    D[b.times, :, np.arange(b.size)] = gr
                    J[rows, self.dual_slices[b.name]] = Ep.T @ D.reshape(-1, b.size)
            row += cols.size
        for b in self.blocks:
            _, gr, _ = evals[b.name]
            _, da, db = fb[b.name]
            rows = self.dual_slices[b.name]
            J[rows, rows] = np.diag(da)
            dc = np.einsum("ja,jaw->jw", gr, self.E3[b.times])
            J[rows, :nw] = -db[:, None] * dc
        return F, J

    # warm start ------------------------------------------------------------
    def dual_warm_start(self, w, floor: float = 1e-6) -> np.ndarray:
        """Projected multiplier estimates from the zero-dual residual.

        For each step where a block has a gradient in its owners' controls,
        the dual is the nonnegative least-squares multiplier of that step's
        stationarity rows; blocks with ``active_hint`` use the norm ratio
        with a floor so the Newton matrix starts nonsingular.  State-only
        blocks start at zero.
        """
        z = np.concatenate([np.ravel(w), np.zeros(self.n_vars - self.n * self.m)])
        F = self.residual(z, jac=False)
        X = self.xi(w)
        nw = self.n * self.m
        stat = {}
        off = 0
        for p in ("u", "v"):
            k = self.player_cols[p].size
            full = np.zeros(nw)
            full[self.player_cols[p]] = F[off:off + k]
            stat[p] = full.reshape(self.n, self.m)
            off += k
        for b in self.blocks:
            _, gr, _ = b.fun(X[b.times])
            lam = np.zeros(b.size)
            usable = b.times < self.n
            for p in b.players:
                own = self.u_cols if p == "u" else self.v_cols
                gw = gr[:, self.c:][:, own]
                Fp = stat[p][np.minimum(b.times, self.n - 1)][:, own]
                nrm2 = np.sum(gw * gw, axis=1)
                ok = usable & (nrm2 > 1e-24)
                if b.active_hint:
                    est = np.sqrt(np.sum(Fp * Fp, axis=1)) / np.sqrt(np.maximum(nrm2, 1e-24))
                    lam = np.where(ok, np.maximum(est, floor), lam)
                else:
                    est = -np.sum(Fp * gw, axis=1) / np.maximum(nrm2, 1e-24)
                    lam = np.where(ok, np.maximum(lam, np.maximum(est, 0.0)), lam)
            z[self.dual_slices[b.name]] = lam
        return z

    # costates and the full KKT residual -----------------------------------
    def costates(self, z):
        """Dynamics duals ``lambda_{p,t}``, ``t = 0..n``, for both players.

        ``lambda_{p,0}`` is the dual of the initial-condition row.
        """
        w, duals = self.split(z)
        X = self.xi(w)
        evals = {b.name: b.fun(X[b.times]) for b in self.blocks}
        G = self._player_gradients(X, duals, evals)
        out = {}
        for p in ("u", "v"):
            lam = np.zeros((self.n + 1, self.N))
            gy = G[p][:, :self.c] @ self.C
            lam[self.n] = -gy[self.n]
            for t in range(self.n - 1, -1, -1):
                lam[t] = self.K.T @ lam[t + 1] - gy[t]
            out[p] = lam
        return out

    def full_residual(self, z, psi=None, lam=None) -> np.ndarray:
        """Residual of the uncondensed KKT system.

        Stacks the initial-condition and dynamics rows, both players'
        lifted-state and control stationarity rows, and the
        Fischer-Burmeister rows.  ``psi`` and ``lam`` default to the
        rollout and the recovered costates.
        """
        w, duals = self.split(z)
        if psi is None:
            psi = self.lifted_states(w)
        if lam is None:
            lam = self.costates(z)
        Y = psi @ self.C.T
        X = np.concatenate([Y, np.vstack([w, np.zeros((1, self.m))])], axis=1)
        evals = {b.name: b.fun(X[b.times]) for b in self.blocks}
        G = self._player_gradients(X, duals, evals)
        rows = [psi[0] - self.psi0]
        rows += [psi[t + 1] - self.K @ psi[t] - self.B @ w[t] for t in range(self.n)]
        for p, own in (("u", self.u_cols), ("v", self.v_cols)):
            L = lam[p]
            Lnext = np.vstack([L[1:], np.zeros((1, self.N))])
            rows.append((G[p][:, :self.c] @ self.C + L - Lnext @ self.K).ravel())
            rows.append((G[p][:self.n, self.c:][:, own] - L[1:] @ self.B[:, own]).ravel())
        for b in self.blocks:
            rows.append(fischer_burmeister(duals[b.name], -evals[b.name][0])[0])
        return np.concatenate([np.ravel(r) for r in rows])

    def solve(self, w0, *, tol: float = 1e-6, max_iter: int = 200, warm_duals: bool = True,
              callback=None) -> NewtonResult:
        z0 = self.dual_warm_start(w0) if warm_duals else np.concatenate(
            [np.ravel(w0), np.zeros(self.n_vars - self.n * self.m)])
        return semismooth_newton(self.residual, z0, tol=tol, max_iter=max_iter, callback=callback)


# ---------------------------------------------------------------------------
# Scalar linear-quadratic instance
# ---------------------------------------------------------------------------

def lq_mcp(A, Bu, Bv, W, P_T, x0, n_steps) -> GameMCP:
    """Unconstrained scalar LQ game as a (linear) condensed MCP.

    Stage cost ``[x, u, v] W [x, u, v]^T`` and terminal ``P_T x_n^2``.
    """
    W = np.asarray(W, dtype=float)
    hess = np.zeros((n_steps + 1, 3, 3))
    hess[:n_steps] = W + W.T
    hess[n_steps, 0, 0] = 2.0 * P_T
    return GameMCP(np.array([[A]]), np.array([[Bu, Bv]]), np.eye(1), np.array([x0]), n_steps,
                   [0], [1], hess, np.zeros((n_steps + 1, 3)), [], ["x"])


# ---------------------------------------------------------------------------
# Turret instance
# ---------------------------------------------------------------------------

_OUT = ("x0", "x1", "cos(x1)")


def _turret_blocks(n, v_A):
    """Inequality blocks over ``xi = (r, alpha, cos alpha, u, nu, nu_perp)``."""
    e = np.eye(6)
    zero_h = np.zeros((6, 6))

    def linear(idx, sgn, const):
        def fun(X):
            k = X.shape[0]
            return (sgn * X[:, idx] + const, np.repeat(sgn * e[idx][None], k, axis=0),
                    np.zeros((k, 6, 6)))
        return fun

    def ellipse(X):
        r, nu, nq = X[:, 0], X[:, 4], X[:, 5]
        c = nu * nu + r * r * nq * nq - v_A ** 2 * r ** 4
        g = np.zeros((X.shape[0], 6))
        g[:, 0] = 2 * r * nq * nq - 4 * v_A ** 2 * r ** 3
        g[:, 4] = 2 * nu
        g[:, 5] = 2 * r * r * nq
        H = np.zeros((X.shape[0], 6, 6))
        H[:, 0, 0] = 2 * nq * nq - 12 * v_A ** 2 * r * r
        H[:, 4, 4] = 2.0
        H[:, 5, 5] = 2 * r * r
        H[:, 0, 5] = H[:, 5, 0] = 4 * r * nq
        return c, g, H

    states = np.arange(1, n + 1)
    stages = np.arange(0, n)
    return [
        ConstraintBlock("sigma_pi", ("u", "v"), states, linear(1, 1.0, -np.pi)),
        ConstraintBlock("sigma_0", ("u", "v"), states, linear(1, -1.0, 0.0)),
        ConstraintBlock("sigma_r", ("v",), states, linear(0, 1.0, -1.0)),
        ConstraintBlock("mu", ("v",), stages, ellipse, active_hint=True),
        ConstraintBlock("omega_plus", ("u",), stages, linear(3, 1.0, -1.0)),
        ConstraintBlock("omega_minus", ("u",), stages, linear(3, -1.0, -1.0)),
    ]


def assemble_mcp(model: KoopmanControlModel, x0, n_steps: int, v_A: Optional[float] = None) -> GameMCP:
    """Condensed turret-game MCP over a fitted lifted-control model.

    The agent's lifted controls ``(nu, nu_perp)`` are relaxed to the
    ellipse ``nu^2 + r^2 nu_perp^2 <= v_A^2 r^4``; the turret carries only
    ``|u| <= 1``, the agent only the ellipse and ``r <= 1``, and the
    ``alpha`` bounds are shared.

    Raises
    ------
    ModelMismatchError
        If the model lacks the ``r``, ``alpha`` or ``cos alpha``
        observables, the cost matrices, or lifted controls.
    """
    if model.control_lifting != "lifted":
        raise ModelMismatchError("the turret MCP needs a lifted-control model")
    if model.Q_g is None:
        raise ModelMismatchError("model has no cost matrices")
    d = model.dictionary
    try:
        idx = [d.index_of(name) for name in _OUT]
    except KeyError as exc:
        raise ModelMismatchError(f"dictionary lacks observable {exc}") from None
    N = model.n_lifted
    allowed = set(idx) | {N}
    for Q in (model.Q_g, model.Q_h):
        nz = np.argwhere(Q != 0)
        if any(i not in allowed or j not in allowed for i, j in nz):
            raise ModelMismatchError("cost matrices touch observables outside r, alpha, cos alpha")
    v_A = model.v_A if v_A is None else float(v_A)
    C = np.eye(N)[idx]
    B = np.hstack([model.K_u, model.K_v])

    def forms(Q):
        Qs = Q[np.ix_(idx, idx)]
        H = np.zeros((6, 6))
        H[:3, :3] = Qs + Qs.T
        lin = np.zeros(6)
        lin[:3] = Q[idx, N] + Q[N, idx]
        return H, lin, Q[N, N]

    Hh, lh, _ = forms(model.Q_h)
    Hg, lg, _ = forms(model.Q_g)
    hess = np.empty((n_steps + 1, 6, 6))
    lin = np.empty((n_steps + 1, 6))
    hess[:n_steps], lin[:n_steps] = Hh, lh
    hess[n_steps], lin[n_steps] = Hg, lg
    psi0 = model.lift(np.asarray(x0, dtype=float))
    prob = GameMCP(model.K, B, C, psi0, n_steps, [0], [1, 2], hess, lin,
                   _turret_blocks(n_steps, v_A), list(_OUT))
    prob.x0 = np.asarray(x0, dtype=float)
    prob.v_A = v_A
    prob.dt = model.dt
    return prob


def initial_guess(problem: GameMCP, x0=None, switch_alpha: float = 1.0) -> np.ndarray:
    """Heuristic controls for the turret MCP.

    The turret turns at full rate toward the agent (``u = sign(alpha)``).
    The agent heads at the turret for ``alpha >= switch_alpha`` and
    perpendicular to the line of sight otherwise; at ``alpha = 0`` it runs
    directly away.  Motion toward the turret is shortened so the predicted
    ``r`` never exceeds 1, and at ``r = 1`` the agent moves perpendicular.
    States are rolled out through the lifted model.

    Returns
    -------
    ndarray, shape (n, 3)
        Rows ``(u, nu, nu_perp)``.
    """
    x0 = problem.x0 if x0 is None else np.asarray(x0, dtype=float)
    v_A, dt = problem.v_A, problem.dt
    a0 = float(x0[1])
    u0 = float(np.sign(a0))
    n = problem.n
    w = np.zeros((n, 3))
    psi = problem.psi0.copy()
    r_row = problem.C[0]
    for s in range(n):
        r = float(r_row @ psi)
        if a0 >= switch_alpha and r < 1.0 - 1e-9:
            nu, nq = min(r * r * v_A, (1.0 - r) / dt), 0.0
        elif a0 >= switch_alpha:
            nu, nq = 0.0, r * v_A
        elif a0 == 0.0:
            nu, nq = -r * r * v_A, 0.0
        else:
            nu, nq = 0.0, r * v_A
        w[s] = (u0, nu, nq)
        psi = problem.K @ psi + problem.B @ w[s]
    return w


@dataclass
class EquilibriumTrajectory:
    """Solved open-loop equilibrium of the lifted turret game.

    Attributes
    ----------
    trajectory : Trajectory
        Predicted ``(r, alpha)`` with the turret rate and recovered agent
        headings as controls.
    lifted_controls : ndarray, shape (n, 2)
        ``(nu, nu_perp)``.
    duals : dict of ndarray
    model_cost : float
    diagnostics : dict
        ``iterations``, ``final_residual``, ``status``, ``wall_time``.
    classification : TrajectoryClass
    z : ndarray
        Raw solver vector.
    """

    trajectory: Trajectory
    lifted_controls: np.ndarray
    duals: dict
    model_cost: float
    diagnostics: dict
    classification: TrajectoryClass
    z: np.ndarray = field(repr=False, default=None)
    x0: np.ndarray = None

    @property
    def converged(self) -> bool:
        return self.diagnostics.get("status") == "converged"

    def ellipse_gap(self, v_A: float = 1.0) -> np.ndarray:
        """Relative slack ``|nu^2 + r^2 nu_perp^2 - v_A^2 r^4| / (v_A^2 r^4)``."""
        r = self.trajectory.states[:-1, 0]
        nu, nq = self.lifted_controls.T
        cap = v_A ** 2 * r ** 4
        return np.abs(nu * nu + r * r * nq * nq - cap) / np.maximum(cap, 1e-300)

    def to_json(self) -> dict:
        return {
            "x0": np.asarray(self.x0).tolist(),
            "value": self.model_cost,
            "classification": self.classification.value,
            **{k: (float(v) if isinstance(v, (float, np.floating)) else v)
               for k, v in self.diagnostics.items()},
        }


def recover_headings(r, nu, nq, v_A: float = 1.0, r_min: float = 1e-6) -> np.ndarray:
    """Headings from lifted controls; below ``r_min`` the previous heading is kept."""
    psi = np.empty(len(r))
    prev = np.pi
    for t in range(len(r)):
        if r[t] > r_min and (nu[t] != 0.0 or nq[t] != 0.0):
            prev = math.atan2(nq[t] / (r[t] * v_A), nu[t] / (r[t] * r[t] * v_A))
        psi[t] = prev
    return np.mod(psi, 2.0 * np.pi)


def solve_mcp(problem: GameMCP, warm_start=None, *, tol: float = 1e-6, max_iter: int = 200,
              classify_tol: float = 1e-3) -> EquilibriumTrajectory:
    """Solve the turret MCP from ``warm_start`` (defaults to :func:`initial_guess`).

    Non-convergence is reported through ``diagnostics["status"]``; the best
    iterate is returned either way.
    """
    t0 = time.perf_counter()
    w0 = initial_guess(problem) if warm_start is None else np.asarray(warm_start, dtype=float)
    if w0.size == problem.n_vars:
        res = semismooth_newton(problem.residual, w0, tol=tol, max_iter=max_iter)
    else:
        res = problem.solve(w0.reshape(problem.n, problem.m), tol=tol, max_iter=max_iter)
    wall = time.perf_counter() - t0
    return _package(problem, res, wall, classify_tol)


def _package(problem, res, wall, classify_tol):
    w, duals = problem.split(res.z)
    Y = problem.outputs(w)
    states = Y[:, :2].copy()
    nu, nq = w[:, 1], w[:, 2]
    heads = recover_headings(states[:-1, 0], nu, nq, problem.v_A)
    traj = Trajectory(problem.dt * np.arange(problem.n + 1), states, w[:, :1], heads[:, None])
    cost = problem.cost(w)
    traj.realized_cost = cost
    diag = {"iterations": res.iterations, "final_residual": res.residual,
            "status": res.status, "wall_time": wall}
    return EquilibriumTrajectory(traj, w[:, 1:].copy(), {k: v.copy() for k, v in duals.items()},
                                 cost, diag, classify_trajectory(traj, classify_tol), res.z,
                                 problem.x0.copy())


# ---------------------------------------------------------------------------
# Truth replay and batches
# ---------------------------------------------------------------------------

def validate_in_truth(eq: EquilibriumTrajectory, game: TurretDefenseGame) -> dict:
    """Replay the recovered controls through the RK4 truth."""
    tr = eq.trajectory
    truth = integrate_flow(game, eq.x0, tr.controls_u, tr.controls_v, tr.dt)
    div = np.abs(truth.states - tr.states).max(axis=0)
    return {"truth_cost": truth.realized_cost, "model_cost": eq.model_cost,
            "state_divergence": div.tolist(), "truth_trajectory": truth}


@dataclass
class BatchResult:
    results: list
    points: np.ndarray
    values: np.ndarray
    status: list
    failures: list

    def manifest(self) -> list:
        out = []
        for x0, eq, st in zip(self.points, self.results, self.status):
            rec = {"r0": float(x0[0]), "alpha0": float(x0[1]), "status": st}
            if eq is not None:
                rec.update(value=eq.model_cost, classification=eq.classification.value,
                           wall_time=eq.diagnostics["wall_time"],
                           final_residual=eq.diagnostics["final_residual"])
            out.append(rec)
        return out


def _solve_one(args):
    model, x0, n_steps, tol, max_iter = args
    try:
        prob = assemble_mcp(model, x0, n_steps)
        return solve_mcp(prob, tol=tol, max_iter=max_iter), None
    except Exception as exc:  # collected, never aborts a batch
        return None, f"{type(exc).__name__}: {exc}"


def batch_solve(model: KoopmanControlModel, points, *, n_steps: Optional[int] = None,
                horizon: float = 1.0, tol: float = 1e-6, max_iter: int = 200,
                workers: int = 1) -> BatchResult:
    """Independent MCP solves from each initial condition in ``points``."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n_steps = int(round(horizon / model.dt)) if n_steps is None else n_steps
    jobs = [(model, x0, n_steps, tol, max_iter) for x0 in points]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            outs = list(ex.map(_solve_one, jobs))
    else:
        outs = [_solve_one(j) for j in jobs]
    results = [o[0] for o in outs]
    status = [o[0].diagnostics["status"] if o[0] is not None else "error" for o in outs]
    failures = [{"index": i, "x0": points[i].tolist(), "status": s,
                 "error": outs[i][1],
                 "final_residual": outs[i][0].diagnostics["final_residual"] if outs[i][0] else None}
                for i, s in enumerate(status) if s != "converged"]
    values = np.array([o.model_cost if o is not None else np.nan for o in results])
    return BatchResult(results, points, values, status, failures)
