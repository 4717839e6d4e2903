"""Continuous-time two-player zero-sum games and their reference integrator.

The sign convention is fixed here and used everywhere else: player ``v``
minimizes the cost and player ``u`` maximizes it.

For the turret-defense game the state is ``x = (r, alpha)`` with
``r = 1 / d`` the inverse distance between agent and turret, ``u`` is the
turret's turn rate and ``v`` is the agent heading ``psi`` measured from the
line of sight, so that

    r' = r**2 * v_A * cos(psi),    alpha' = v_A * r * sin(psi) - u.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from ._kernels import KERNELS
from .errors import InadmissibleStrategyError, NonFiniteError

__all__ = [
    "Constraint",
    "ConstraintSet",
    "GameSpec",
    "FunctionGame",
    "TurretDefenseGame",
    "LinearQuadraticGame",
    "Trajectory",
    "TrajectoryClass",
    "DeviationReport",
    "integrate_flow",
    "integrate_batch",
    "evaluate_cost",
    "saddle_point_deviation_test",
    "classify_trajectory",
    "lq_saddle_recursion",
    "simulate_lq_saddle",
    "mirror_trajectory",
    "cost_report",
    "write_trajectory_csv",
    "read_trajectory_csv",
]


# ---------------------------------------------------------------------------
# Constraints
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Constraint:
    """Scalar constraint ``fun(x, u, v) <= 0``.

    Parameters
    ----------
    name : str
    fun : callable
        Vectorized over leading axes of ``x``, ``u`` and ``v``.
    players : tuple of str
        Players whose controls appear in (or who are bound by) the constraint,
        a subset of ``("u", "v")``.  State-only constraints shared by both
        players list both.
    """

    name: str
    fun: Callable
    players: tuple = ("u", "v")

    def __call__(self, x, u, v):
        return self.fun(x, u, v)


@dataclass(frozen=True)
class ConstraintSet:
    """An ordered collection of :class:`Constraint`."""

    constraints: tuple = ()

    def __iter__(self):
        return iter(self.constraints)

    def __len__(self):
        return len(self.constraints)

    def names(self):
        return [c.name for c in self.constraints]

    def for_player(self, player: str) -> "ConstraintSet":
        return ConstraintSet(tuple(c for c in self.constraints if player in c.players))

    def evaluate(self, x, u, v) -> np.ndarray:
        """Stack constraint values along a new last axis."""
        if not self.constraints:
            return np.zeros(np.shape(x)[:-1] + (0,))
        return np.stack([np.asarray(c(x, u, v), dtype=float) for c in self.constraints], axis=-1)

    def max_violation(self, x, u, v) -> float:
        vals = self.evaluate(x, u, v)
        return float(np.max(vals, initial=-np.inf)) if vals.size else -np.inf


# ---------------------------------------------------------------------------
# Games
# ---------------------------------------------------------------------------

class GameSpec:
    """Base class for a two-player zero-sum differential game.

    Subclasses provide vectorized :meth:`dynamics`, :meth:`terminal_cost`
    and :meth:`running_cost`.  Arrays carry the state / control index on
    the last axis.

    Attributes
    ----------
    state_dim : int
    control_dims : tuple of int
        ``(m_u, m_v)``.
    horizon : float
    control_bounds : dict
        ``{"u": (lo, hi), "v": (lo, hi)}`` box bounds used to sample
        admissible controls.
    constraints : ConstraintSet
    domain : tuple of ndarray
        Lower and upper corners of the state box.
    """

    state_dim: int = 1
    control_dims: tuple = (1, 1)
    horizon: float = 1.0
    name: str = "game"

    def __init__(self, horizon: float = 1.0):
        if not horizon > 0:
            raise ValueError("horizon must be positive")
        self.horizon = float(horizon)
        self.control_bounds = {
            "u": (np.full(self.control_dims[0], -np.inf), np.full(self.control_dims[0], np.inf)),
            "v": (np.full(self.control_dims[1], -np.inf), np.full(self.control_dims[1], np.inf)),
        }
        self.constraints = ConstraintSet()
        self.domain = (np.full(self.state_dim, -np.inf), np.full(self.state_dim, np.inf))

    def dynamics(self, x, u, v):
        raise NotImplementedError

    def terminal_cost(self, x):
        raise NotImplementedError

    def running_cost(self, x, u, v):
        return np.zeros(np.shape(x)[:-1])

    def in_domain(self, x, tol: float = 1e-9) -> np.ndarray:
        lo, hi = self.domain
        x = np.asarray(x)
        return np.all((x >= lo - tol) & (x <= hi + tol), axis=-1)

    def check_admissible(self, player: str, seq, tol: float = 1e-9) -> None:
        lo, hi = self.control_bounds[player]
        seq = np.asarray(seq, dtype=float)
        if np.any(seq < lo - tol) or np.any(seq > hi + tol):
            raise InadmissibleStrategyError(f"{player}-controls leave their bounds")


class FunctionGame(GameSpec):
    """Game assembled from plain callables.

    Examples
    --------
    >>> decay = FunctionGame(1, (1, 1), lambda x, u, v: -x, lambda x: x[..., 0])
    """

    def __init__(self, state_dim, control_dims, dynamics, terminal_cost,
                 running_cost=None, horizon=1.0, name="function-game"):
        self.state_dim = int(state_dim)
        self.control_dims = tuple(int(m) for m in control_dims)
        self.name = name
        super().__init__(horizon)
        self._f = dynamics
        self._g = terminal_cost
        self._h = running_cost

    def dynamics(self, x, u, v):
        return self._f(x, u, v)

    def terminal_cost(self, x):
        return self._g(x)

    def running_cost(self, x, u, v):
        if self._h is None:
            return np.zeros(np.shape(x)[:-1])
        return self._h(x, u, v)


class TurretDefenseGame(GameSpec):
    """Turret defense in inverse-distance coordinates.

    Parameters
    ----------
    v_A : float
        Agent speed (the turret's maximum turn rate is 1).
    horizon : float
        Final time ``T``.
    running_weight : float
        ``h = running_weight * r * cos(alpha)``.
    """

    state_dim = 2
    control_dims = (1, 1)
    name = "turret-defense"

    def __init__(self, v_A: float = 1.0, horizon: float = 1.0, running_weight: float = 0.1):
        super().__init__(horizon)
        self.v_A = float(v_A)
        self.running_weight = float(running_weight)
        self.control_bounds = {
            "u": (np.array([-1.0]), np.array([1.0])),
            "v": (np.array([0.0]), np.array([2.0 * np.pi])),
        }
        self.domain = (np.array([0.0, 0.0]), np.array([1.0, np.pi]))
        self.constraints = ConstraintSet((
            Constraint("u_upper", lambda x, u, v: u[..., 0] - 1.0, ("u",)),
            Constraint("u_lower", lambda x, u, v: -1.0 - u[..., 0], ("u",)),
            Constraint("r_upper", lambda x, u, v: x[..., 0] - 1.0, ("v",)),
            Constraint("alpha_upper", lambda x, u, v: x[..., 1] - np.pi, ("u", "v")),
            Constraint("alpha_lower", lambda x, u, v: -x[..., 1], ("u", "v")),
        ))

    # heading form -------------------------------------------------------
    def dynamics(self, x, u, v):
        x = np.asarray(x, dtype=float)
        psi = np.asarray(v, dtype=float)[..., 0]
        return self.velocity_dynamics(x, np.asarray(u, dtype=float)[..., 0],
                                      self.v_A * np.cos(psi), self.v_A * np.sin(psi))

    def terminal_cost(self, x):
        x = np.asarray(x, dtype=float)
        return x[..., 0] * np.cos(x[..., 1])

    def running_cost(self, x, u=None, v=None):
        x = np.asarray(x, dtype=float)
        return self.running_weight * x[..., 0] * np.cos(x[..., 1])

    # velocity-component form ---------------------------------------------
    @staticmethod
    def velocity_dynamics(x, u, vpar, vperp):
        """Dynamics with the agent velocity given by components.

        ``vpar`` is the component along the line of sight toward the turret
        and ``vperp`` the component across it, both in absolute units.
        """
        r = x[..., 0]
        return np.stack([r * r * vpar, r * vperp - u], axis=-1)

    def lifted_controls(self, r, psi):
        """Return ``(nu, nu_perp) = (r^2 v_A cos psi, r v_A sin psi)``."""
        r = np.asarray(r, dtype=float)
        return r * r * self.v_A * np.cos(psi), r * self.v_A * np.sin(psi)

    def heading_from_lifted(self, r, nu, nu_perp):
        """Invert :meth:`lifted_controls` for ``r > 0``."""
        r = np.asarray(r, dtype=float)
        return np.arctan2(nu_perp / (r * self.v_A), nu / (r * r * self.v_A))


class LinearQuadraticGame(GameSpec):
    """Scalar linear-quadratic game.

    ``x' = a x + b u + c v`` with cost
    ``q_T x_T^2 + int (q x^2 + r_v v^2 - r_u u^2) dt``.
    """

    state_dim = 1
    control_dims = (1, 1)
    name = "scalar-lq"

    def __init__(self, a=-0.5, b=0.5, c=1.0, q=1.0, r_u=2.0, r_v=1.0, q_T=1.0, horizon=1.0):
        super().__init__(horizon)
        self.a, self.b, self.c = float(a), float(b), float(c)
        self.q, self.r_u, self.r_v, self.q_T = float(q), float(r_u), float(r_v), float(q_T)

    def dynamics(self, x, u, v):
        return self.a * x + self.b * u + self.c * v

    def terminal_cost(self, x):
        return self.q_T * np.asarray(x)[..., 0] ** 2

    def running_cost(self, x, u, v):
        return (self.q * np.asarray(x)[..., 0] ** 2 + self.r_v * np.asarray(v)[..., 0] ** 2
                - self.r_u * np.asarray(u)[..., 0] ** 2)

    def zoh_matrices(self, dt):
        """Exact zero-order-hold discretization ``(A, B_u, B_v)``."""
        a = self.a
        A = math.exp(a * dt)
        beta = dt if abs(a) < 1e-12 else (A - 1.0) / a
        return A, self.b * beta, self.c * beta

    def sampled_stage_matrix(self, dt) -> np.ndarray:
        """Exact one-step cost form over ``(x_k, u_k, v_k)`` under ZOH."""
        a = self.a
        if abs(a) < 1e-12:
            i11, i1b, ibb = dt, dt * dt / 2, dt ** 3 / 3
        else:
            e1 = (math.exp(a * dt) - 1.0) / a
            e2 = (math.exp(2 * a * dt) - 1.0) / (2 * a)
            i11 = e2
            i1b = (e2 - e1) / a
            ibb = (e2 - 2 * e1 + dt) / (a * a)
        phi = np.array([[i11, i1b * self.b, i1b * self.c],
                        [i1b * self.b, ibb * self.b ** 2, ibb * self.b * self.c],
                        [i1b * self.c, ibb * self.b * self.c, ibb * self.c ** 2]])
        W = self.q * phi
        W[1, 1] -= self.r_u * dt
        W[2, 2] += self.r_v * dt
        return W

    def riccati_stationary(self) -> float:
        """Stabilizing root of ``0 = q + 2 a p - p^2 (c^2/r_v - b^2/r_u)``."""
        S = self.c ** 2 / self.r_v - self.b ** 2 / self.r_u
        if S <= 0:
            raise ValueError("game has no stabilizing saddle (c^2/r_v <= b^2/r_u)")
        return (self.a + math.sqrt(self.a ** 2 + self.q * S)) / S

    def stationary_gains(self):
        """Feedback gains ``(k_u, k_v)`` with ``u = k_u x`` and ``v = k_v x``."""
        p = self.riccati_stationary()
        return self.b * p / self.r_u, -self.c * p / self.r_v


# ---------------------------------------------------------------------------
# Trajectories and integration
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    """Sampled state trajectory with piecewise-constant controls.

    ``controls_u`` and ``controls_v`` have one row fewer than ``states``;
    row ``k`` is held on ``[times[k], times[k + 1])``.
    """

    times: np.ndarray
    states: np.ndarray
    controls_u: np.ndarray
    controls_v: np.ndarray
    realized_cost: float = float("nan")
    terminal_cost: float = float("nan")
    running_integral: float = float("nan")
    domain_exit: bool = False

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.controls_u = _as_2d(self.controls_u)
        self.controls_v = _as_2d(self.controls_v)
        if self.states.shape[0] != self.times.shape[0]:
            raise ValueError("times and states differ in length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        n = self.states.shape[0] - 1
        if self.controls_u.shape[0] != n or self.controls_v.shape[0] != n:
            raise ValueError("controls must be one shorter than states")

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if self.times.size > 1 else 0.0


def _as_2d(a):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    return a


def _rk4_step(game, x, u, v, dt):
    f = game.dynamics
    h = game.running_cost
    k1 = f(x, u, v)
    c1 = h(x, u, v)
    x2 = x + 0.5 * dt * k1
    k2 = f(x2, u, v)
    c2 = h(x2, u, v)
    x3 = x + 0.5 * dt * k2
    k3 = f(x3, u, v)
    c3 = h(x3, u, v)
    x4 = x + dt * k3
    k4 = f(x4, u, v)
    c4 = h(x4, u, v)
    return (x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4),
            dt / 6.0 * (c1 + 2 * c2 + 2 * c3 + c4))


def integrate_batch(game: GameSpec, X0, U, V, dt: float):
    """RK4 rollout of a batch of open-loop control sequences.

    Parameters
    ----------
    X0 : array_like, shape (B, d)
    U : array_like, shape (B, n, m_u)
    V : array_like, shape (B, n, m_v)
    dt : float

    Returns
    -------
    states : ndarray, shape (B, n + 1, d)
    running : ndarray, shape (B,)
        Integral of the running cost, carried as an extra RK4 state.
    terminal : ndarray, shape (B,)
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    U = np.asarray(U, dtype=float)
    V = np.asarray(V, dtype=float)
    if U.ndim == 2:
        U = U[..., None]
    if V.ndim == 2:
        V = V[..., None]
    B, n = U.shape[0], U.shape[1]
    if isinstance(game, TurretDefenseGame):
        psi = V[..., 0]
        states, running = KERNELS.turret_rk4(
            np.ascontiguousarray(X0), np.ascontiguousarray(U[..., 0]),
            np.ascontiguousarray(game.v_A * np.cos(psi)),
            np.ascontiguousarray(game.v_A * np.sin(psi)), float(dt), game.running_weight)
    else:
        states = np.empty((B, n + 1, X0.shape[1]))
        states[:, 0] = X0
        running = np.zeros(B)
        x = X0
        for k in range(n):
            x, c = _rk4_step(game, x, U[:, k], V[:, k], dt)
            states[:, k + 1] = x
            running = running + c
    if not (np.all(np.isfinite(states)) and np.all(np.isfinite(running))):
        raise NonFiniteError("state became non-finite during integration")
    terminal = np.asarray(game.terminal_cost(states[:, -1]), dtype=float)
    return states, running, terminal


def integrate_flow(game: GameSpec, x0, u_seq, v_seq, dt: float) -> Trajectory:
    """Integrate one trajectory with fixed-step RK4 under zero-order hold.

    Examples
    --------
    >>> g = TurretDefenseGame()
    >>> tr = integrate_flow(g, [0.5, 0.0], np.zeros(100), np.full(100, np.pi), 0.01)
    >>> abs(tr.states[-1, 1]) < 1e-12
    True
    """
    u_seq = _as_2d(u_seq)
    v_seq = _as_2d(v_seq)
    if u_seq.shape[0] != v_seq.shape[0]:
        raise ValueError("u and v sequences differ in length")
    states, running, terminal = integrate_batch(game, np.asarray(x0, dtype=float)[None],
                                                u_seq[None], v_seq[None], dt)
    n = u_seq.shape[0]
    times = dt * np.arange(n + 1)
    exit_flag = not bool(np.all(game.in_domain(states[0])))
    return Trajectory(times, states[0], u_seq, v_seq,
                      realized_cost=float(terminal[0] + running[0]),
                      terminal_cost=float(terminal[0]), running_integral=float(running[0]),
                      domain_exit=exit_flag)


def evaluate_cost(game: GameSpec, traj: Trajectory) -> float:
    """Terminal cost plus the running-cost integral along ``traj``.

    Each interval's integral is an RK4 step restarted from the stored
    state, which reproduces :func:`integrate_flow` exactly on its own output.
    """
    total = 0.0
    dts = np.diff(traj.times)
    for k, dt in enumerate(dts):
        _, c = _rk4_step(game, traj.states[k:k + 1], traj.controls_u[k:k + 1],
                         traj.controls_v[k:k + 1], float(dt))
        total += float(np.asarray(c).reshape(-1)[0])
    g = float(np.asarray(game.terminal_cost(traj.states[-1:])).reshape(-1)[0])
    out = g + total
    if not math.isfinite(out):
        raise NonFiniteError("cost is not finite")
    return out


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------

class TrajectoryClass(str, enum.Enum):
    UNIVERSAL_LINE = "UniversalLine"
    CONSTRAINED = "Constrained"
    REGULAR = "Regular"


def classify_trajectory(traj: Union[Trajectory, np.ndarray], tol: float = 1e-3) -> TrajectoryClass:
    """Label a turret-game trajectory.

    A trajectory that reaches ``alpha <= tol`` is on the Universal Line; one
    that reaches ``r >= 1 - tol`` (and not the UL) is Constrained; all
    others are Regular.
    """
    states = traj.states if isinstance(traj, Trajectory) else np.asarray(traj)
    if np.any(states[:, 1] <= tol):
        return TrajectoryClass.UNIVERSAL_LINE
    if np.any(states[:, 0] >= 1.0 - tol):
        return TrajectoryClass.CONSTRAINED
    return TrajectoryClass.REGULAR


def mirror_trajectory(traj: Trajectory) -> Trajectory:
    """Reflect a turret trajectory through ``alpha = 0``.

    The reflection maps ``alpha -> -alpha``, ``psi -> -psi`` and
    ``u -> -u``; ``r`` is unchanged.
    """
    states = traj.states.copy()
    states[:, 1] = -states[:, 1]
    return Trajectory(traj.times.copy(), states, -traj.controls_u, -traj.controls_v,
                      traj.realized_cost, traj.terminal_cost, traj.running_integral,
                      traj.domain_exit)


# ---------------------------------------------------------------------------
# Linear-quadratic saddle oracle
# ---------------------------------------------------------------------------

def lq_saddle_recursion(A: float, Bu: float, Bv: float, W: np.ndarray, P_T: float, n: int):
    """Backward recursion for a scalar discrete-time zero-sum LQ game.

    The stage cost is ``[x, u, v] W [x, u, v]^T`` and the terminal cost
    ``P_T x_n^2``; ``v`` minimizes and ``u`` maximizes.  The saddle
    feedback is ``u_t = Ku[t] x_t``, ``v_t = Kv[t] x_t``.

    Returns
    -------
    P : ndarray, shape (n + 1,)
        Value coefficients, ``V_t(x) = P[t] x^2``.
    Ku, Kv : ndarray, shape (n,)

    Raises
    ------
    ValueError
        If a stage fails the saddle curvature conditions.
    """
    W = np.asarray(W, dtype=float)
    P = np.empty(n + 1)
    Ku = np.empty(n)
    Kv = np.empty(n)
    P[n] = P_T
    Bz = np.array([Bu, Bv])
    for t in range(n - 1, -1, -1):
        p = P[t + 1]
        S = W[1:, 1:] + p * np.outer(Bz, Bz)
        m = W[1:, 0] + p * Bz * A
        if not (S[0, 0] < 0 < S[1, 1]):
            raise ValueError("stage is not a strict saddle")
        k = -np.linalg.solve(S, m)
        Ku[t], Kv[t] = k
        P[t] = W[0, 0] + p * A * A + m @ k
    return P, Ku, Kv


def simulate_lq_saddle(A, Bu, Bv, Ku, Kv, x0):
    """Open-loop sequences generated by the saddle feedback from ``x0``."""
    n = len(Ku)
    x = np.empty(n + 1)
    x[0] = x0
    u = Ku * 0.0
    v = Kv * 0.0
    for t in range(n):
        u[t] = Ku[t] * x[t]
        v[t] = Kv[t] * x[t]
        x[t + 1] = A * x[t] + Bu * u[t] + Bv * v[t]
    return x, u, v


# ---------------------------------------------------------------------------
# Saddle-point deviation test
# ---------------------------------------------------------------------------

@dataclass
class DeviationReport:
    """Outcome of :func:`saddle_point_deviation_test`.

    Gains are positive when the deviating player improves: ``J`` increases
    for ``u`` and decreases for ``v``.
    """

    V: float
    max_gain_u_deviator: float
    max_gain_v_deviator: float
    n_tested_u: int = 0
    n_tested_v: int = 0
    n_rejected: int = 0
    gains_u: np.ndarray = field(default_factory=lambda: np.zeros(0))
    gains_v: np.ndarray = field(default_factory=lambda: np.zeros(0))


Strategy = Union[np.ndarray, Callable]


def _sample_deviations(game, player, candidate, n_dev, n_steps, n_segments, rng):
    """Piecewise-constant admissible deviations for one player.

    The first half are drawn uniformly inside the control box; the second
    half perturb the candidate by piecewise-constant offsets of random
    size, so the test probes both far and near the candidate.
    """
    lo, hi = game.control_bounds[player]
    m = lo.shape[0]
    seg = np.minimum((np.arange(n_steps) * n_segments) // max(n_steps, 1), n_segments - 1)
    out = np.empty((n_dev, n_steps, m))
    lo_f = np.where(np.isfinite(lo), lo, -1.0)
    hi_f = np.where(np.isfinite(hi), hi, 1.0)
    periodic = isinstance(game, TurretDefenseGame) and player == "v"
    n_far = n_dev // 2
    for i in range(n_dev):
        if i < n_far or candidate is None:
            vals = rng.uniform(lo_f, hi_f, size=(n_segments, m))
            out[i] = vals[seg]
        else:
            scale = rng.uniform(0.01, 1.0) * (hi_f - lo_f) / 2.0
            offs = rng.normal(size=(n_segments, m)) * scale
            dev = candidate + offs[seg]
            if periodic:
                out[i] = np.mod(dev, 2.0 * np.pi)
            else:
                out[i] = np.clip(dev, lo, hi)
    return out


def _closed_loop(game, x0, u_src, v_src, dt, n_steps):
    """Simulate a batch where each player is a sequence batch or a policy."""
    B = max(np.asarray(s).shape[0] if not callable(s) else 1 for s in (u_src, v_src))
    x = np.repeat(np.asarray(x0, dtype=float)[None], B, axis=0)
    states = np.empty((B, n_steps + 1, x.shape[1]))
    states[:, 0] = x
    running = np.zeros(B)

    def ctrl(src, t, k, xx):
        if callable(src):
            return np.asarray(src(t, xx), dtype=float).reshape(B, -1)
        s = np.asarray(src, dtype=float)
        return np.broadcast_to(s[:, k], (B, s.shape[-1]))

    for k in range(n_steps):
        uk = ctrl(u_src, k * dt, k, x)
        vk = ctrl(v_src, k * dt, k, x)
        x, c = _rk4_step(game, x, uk, vk, dt)
        states[:, k + 1] = x
        running = running + c
    return game.terminal_cost(states[:, -1]) + running, states


def saddle_point_deviation_test(game: GameSpec, u_candidate: Strategy, v_candidate: Strategy,
                                x0, n_deviations: int = 200, rng_seed: int = 0, *,
                                dt: float = 0.01, n_segments: int = 10,
                                rollout: Optional[Callable] = None,
                                admissible: Optional[Callable] = None,
                                bound_tol: float = 1e-6) -> DeviationReport:
    """Sampled check of the saddle-point inequalities at ``x0``.

    Parameters
    ----------
    game : GameSpec
    u_candidate, v_candidate : ndarray or callable
        Open-loop sequences of shape ``(n, m)`` or feedback policies
        ``policy(t, x_batch) -> controls``.
    x0 : array_like
    n_deviations : int
        Deviations drawn per player.
    rng_seed : int
    dt : float
        Step of the open-loop sequences.
    n_segments : int
        Number of constant pieces in each deviation.
    rollout : callable, optional
        ``rollout(x0, U, V) -> (costs, states)`` for open-loop batches
        ``U`` of shape ``(B, n, m_u)`` and ``V`` of shape ``(B, n, m_v)``.
        Defaults to the RK4 truth.  Only open-loop candidates may be used
        with a custom rollout.
    admissible : callable, optional
        ``admissible(states) -> bool mask`` over a batch of state paths.
        Deviations producing inadmissible paths are discarded.  Defaults to
        the game's state box.
    bound_tol : float
        Slack allowed when checking the candidates against the control
        bounds, so that solver output within tolerance is accepted.

    Returns
    -------
    DeviationReport
    """
    rng = np.random.default_rng(rng_seed)
    is_fb = [callable(u_candidate), callable(v_candidate)]
    if rollout is not None and any(is_fb):
        raise ValueError("custom rollouts need open-loop candidates")
    if not is_fb[0]:
        u_candidate = _as_2d(u_candidate)
        game.check_admissible("u", u_candidate, bound_tol)
    if not is_fb[1]:
        v_candidate = _as_2d(v_candidate)
        game.check_admissible("v", v_candidate, bound_tol)
    n_steps = (u_candidate.shape[0] if not is_fb[0] else
               v_candidate.shape[0] if not is_fb[1] else int(round(game.horizon / dt)))
    if admissible is None:
        def admissible(states):
            return np.all(game.in_domain(states, tol=1e-6), axis=-1)

    def run(U, V):
        if rollout is not None:
            return rollout(np.asarray(x0, dtype=float), U, V)
        if callable(U) or callable(V):
            return _closed_loop(game, x0, U, V, dt, n_steps)
        B = max(U.shape[0], V.shape[0])
        U = np.broadcast_to(U, (B,) + U.shape[1:])
        V = np.broadcast_to(V, (B,) + V.shape[1:])
        X0 = np.repeat(np.asarray(x0, dtype=float)[None], B, axis=0)
        states, running, terminal = integrate_batch(game, X0, U, V, dt)
        return terminal + running, states

    U0 = u_candidate if is_fb[0] else u_candidate[None]
    V0 = v_candidate if is_fb[1] else v_candidate[None]
    J0, _ = run(U0, V0)
    V_val = float(np.asarray(J0).reshape(-1)[0])
    if n_deviations <= 0:
        return DeviationReport(V_val, 0.0, 0.0)

    cand_u = None if is_fb[0] else u_candidate
    cand_v = None if is_fb[1] else v_candidate
    Ud = _sample_deviations(game, "u", cand_u, n_deviations, n_steps, n_segments, rng)
    Vd = _sample_deviations(game, "v", cand_v, n_deviations, n_steps, n_segments, rng)
    Ju, Su = run(Ud, V0)
    Jv, Sv = run(U0, Vd)
    ok_u = np.asarray(admissible(Su), dtype=bool)
    ok_v = np.asarray(admissible(Sv), dtype=bool)
    gu = np.asarray(Ju)[ok_u] - V_val
    gv = V_val - np.asarray(Jv)[ok_v]
    rejected = int((~ok_u).sum() + (~ok_v).sum())
    return DeviationReport(
        V=V_val,
        max_gain_u_deviator=float(gu.max()) if gu.size else float("-inf"),
        max_gain_v_deviator=float(gv.max()) if gv.size else float("-inf"),
        n_tested_u=int(gu.size), n_tested_v=int(gv.size), n_rejected=rejected,
        gains_u=gu, gains_v=gv,
    )


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def cost_report(game: GameSpec, traj: Trajectory, tol: float = 1e-3) -> dict:
    """JSON-ready cost summary ``{J, g_term, h_integral, classification}``."""
    g = float(np.asarray(game.terminal_cost(traj.states[-1:])).reshape(-1)[0])
    J = evaluate_cost(game, traj)
    out = {"J": J, "g_term": g, "h_integral": J - g}
    if isinstance(game, TurretDefenseGame):
        out["classification"] = classify_trajectory(traj, tol).value
    return out


def _header(game: GameSpec):
    if isinstance(game, TurretDefenseGame):
        return ["t", "r", "alpha", "u", "v", "v_perp", "h"]
    xs = [f"x{i}" for i in range(game.state_dim)]
    us = [f"u{i}" for i in range(game.control_dims[0])]
    vs = [f"v{i}" for i in range(game.control_dims[1])]
    return ["t"] + xs + us + vs + ["h"]


def write_trajectory_csv(traj: Trajectory, path, game: GameSpec) -> None:
    """Write ``traj`` as CSV with one row per time stamp.

    For the turret game the agent columns are the velocity components
    ``v = v_A cos psi`` and ``v_perp = v_A sin psi``.  Control cells are
    blank on the final row.
    """
    n = traj.controls_u.shape[0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_header(game))
        for k in range(n + 1):
            x = traj.states[k]
            if k < n:
                u, v = traj.controls_u[k], traj.controls_v[k]
                h = float(np.asarray(game.running_cost(x[None], u[None], v[None])).reshape(-1)[0])
                if isinstance(game, TurretDefenseGame):
                    ctrl = [u[0], game.v_A * math.cos(v[0]), game.v_A * math.sin(v[0])]
                else:
                    ctrl = list(u) + list(v)
                row = [traj.times[k]] + list(x) + ctrl + [h]
                w.writerow([repr(float(c)) for c in row])
            else:
                ncols = len(_header(game)) - 1 - game.state_dim - 1
                w.writerow([repr(float(traj.times[k]))] + [repr(float(c)) for c in x]
                           + [""] * ncols + [""])


def read_trajectory_csv(path, game: GameSpec) -> Trajectory:
    """Inverse of :func:`write_trajectory_csv` (cost fields are recomputed)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header != _header(game):
        raise ValueError("unexpected trajectory header")
    d = game.state_dim
    times = np.array([float(r[0]) for r in body])
    states = np.array([[float(c) for c in r[1:1 + d]] for r in body])
    ctrl = np.array([[float(c) for c in r[1 + d:-1]] for r in body[:-1]])
    if isinstance(game, TurretDefenseGame):
        u = ctrl[:, :1]
        v = np.mod(np.arctan2(ctrl[:, 2], ctrl[:, 1]), 2 * np.pi)[:, None]
    else:
        mu = game.control_dims[0]
        u, v = ctrl[:, :mu], ctrl[:, mu:]
    traj = Trajectory(times, states, u, v)
    traj.realized_cost = evaluate_cost(game, traj)
    traj.domain_exit = not bool(np.all(game.in_domain(states)))
    return traj


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))
