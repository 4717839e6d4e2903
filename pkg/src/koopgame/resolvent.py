"""Generator approximation and contour-quadrature evaluation of game costs.

With a closed-loop vector field ``f`` the Koopman generator acts as
``L g = f . grad g``.  On a finite basis with value matrix ``G`` and
derivative matrices ``dG_k`` on an evaluation grid it is approximated by
the least-squares solution of ``G L = sum_k diag(f_k) dG_k``.

The semigroup is recovered from resolvents along the vertical line
``z_k = delta + i h k``:

    e^{L t} ~ (2 delta - L)^m  sum_k  h/(2 pi) e^{z_k t} (delta - i h k)^{-m} (z_k - L)^{-1}.

The game cost ``g(x_T) + int_0^T h dt`` is evaluated in the same pass by
replacing ``g`` with ``g + (1 - e^{-z T}) / z * h`` at each node.

Internally the generator is expressed in the orthonormal coordinates of
the range of ``G`` (``L_hat = U^T D V S^{-1}`` for ``G = U S V^T``), a
similarity transform of the basis-coordinate matrix that keeps the node
solves well conditioned.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .dictionary import BasisEvaluation
from .errors import ContourTooCloseError, NonFiniteError, SingularNodeError
from .game import GameSpec, LinearQuadraticGame, TurretDefenseGame

__all__ = [
    "ResolventPlan",
    "make_plan",
    "FeedbackPolicy",
    "ClosedLoopSpec",
    "TurretClosedLoop",
    "LQClosedLoop",
    "FieldClosedLoop",
    "closed_loop_for",
    "GeneratorApprox",
    "assemble_generator",
    "resolvent_apply",
    "CostFunctionalValue",
    "cost_functional",
    "cost_gradient",
    "ResolventCost",
]


# ---------------------------------------------------------------------------
# Quadrature plan
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ResolventPlan:
    """Nodes and weights of the contour quadrature for horizon ``T``.

    Only ``k = 0..N`` are stored: for real ``L`` the ``-k`` nodes are
    complex conjugates, so their contribution is folded in by doubling the
    ``k >= 1`` weights and taking the real part.
    """

    delta: float
    m: int
    h: float
    N: int
    T: float
    oracle_error: float = float("nan")

    @property
    def k(self) -> np.ndarray:
        return np.arange(self.N + 1)

    @property
    def nodes(self) -> np.ndarray:
        return self.delta + 1j * self.h * self.k

    def weights(self, t: Optional[float] = None) -> np.ndarray:
        """Folded weights for time ``t`` (defaults to ``T``)."""
        t = self.T if t is None else float(t)
        z = self.nodes
        w = self.h / (2 * np.pi) * np.exp(z * t) / (self.delta - 1j * self.h * self.k) ** self.m
        w[1:] *= 2.0
        return w

    def running_factor(self) -> np.ndarray:
        """``(1 - e^{-z T}) / z`` at each node."""
        z = self.nodes
        return (1.0 - np.exp(-z * self.T)) / z

    def to_dict(self) -> dict:
        return {"delta": self.delta, "m": self.m, "h": self.h, "N": self.N, "T": self.T,
                "oracle_error": self.oracle_error}

    @classmethod
    def from_dict(cls, d: dict) -> "ResolventPlan":
        return cls(float(d["delta"]), int(d["m"]), float(d["h"]), int(d["N"]), float(d["T"]),
                   float(d.get("oracle_error", float("nan"))))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))


def default_spacing(delta: float, m: int, T: float, log_tol: float = math.log(1e12)) -> float:
    """Node spacing balancing the discretization error against ``exp(-log_tol)``."""
    return 2 * np.pi * delta / (2 * delta * T + log_tol + 3 * (m - 1))


def _oracle_error(plan: ResolventPlan) -> float:
    """Error of the scalar decay oracle ``x' = -x``: ``e^{-T}`` from ``L = -1``."""
    val = resolvent_apply(plan, np.array([[-1.0]]), np.array([1.0]), plan.T)[0]
    return float(abs(val - math.exp(-plan.T)))


def make_plan(T: float = 1.0, m: int = 4, delta: Optional[float] = None, h: Optional[float] = None,
              N: Optional[int] = None, target: float = 1e-6, N_start: int = 25,
              N_max: int = 1600) -> ResolventPlan:
    """Build and validate a quadrature plan.

    ``delta`` defaults to ``2 / T`` and ``h`` to :func:`default_spacing`.
    When ``N`` is not given it is doubled from ``N_start`` until the
    scalar oracle error is at most ``target``.

    Raises
    ------
    ValueError
        If the oracle target cannot be met with ``N <= N_max``.
    """
    if T <= 0:
        raise ValueError("horizon must be positive")
    delta = 2.0 / T if delta is None else float(delta)
    h = default_spacing(delta, m, T) if h is None else float(h)
    if N is not None:
        plan = ResolventPlan(delta, int(m), h, int(N), float(T))
        return ResolventPlan(delta, int(m), h, int(N), float(T), _oracle_error(plan))
    n = N_start
    while n <= N_max:
        plan = ResolventPlan(delta, int(m), h, n, float(T))
        err = _oracle_error(plan)
        if err <= target:
            return ResolventPlan(delta, int(m), h, n, float(T), err)
        n *= 2
    raise ValueError(f"quadrature oracle error {err:.2e} above {target:.1e} at N = {N_max}")


def _check_margin(plan: ResolventPlan, L: np.ndarray) -> float:
    if L.size == 0:
        return plan.delta
    margin = plan.delta - float(np.max(np.linalg.eigvals(L).real))
    if not margin > 0:
        raise ContourTooCloseError(f"contour abscissa {plan.delta} is not right of the spectrum")
    return margin


def _node_solves(plan: ResolventPlan, L: np.ndarray, rhs: np.ndarray):
    """Solve ``(z_k - L) x_k = rhs_k`` for all nodes; ``rhs`` is (nodes, n)."""
    n = L.shape[0]
    A = plan.nodes[:, None, None] * np.eye(n)[None] - L[None]
    try:
        X = np.linalg.solve(A, rhs[:, :, None])[:, :, 0]
    except np.linalg.LinAlgError:
        raise SingularNodeError("resolvent solve failed at a quadrature node") from None
    if not np.all(np.isfinite(X)):
        raise SingularNodeError("non-finite resolvent at a quadrature node")
    return A, X


def _powers(M: np.ndarray, m: int):
    out = [np.eye(M.shape[0])]
    for _ in range(m):
        out.append(out[-1] @ M)
    return out


def resolvent_apply(plan: ResolventPlan, L, g_coeffs, t: float, *, return_residue: bool = False):
    """Coefficients of ``e^{L t} g`` via the contour quadrature.

    Parameters
    ----------
    plan : ResolventPlan
    L : ndarray, shape (n, n)
    g_coeffs : ndarray, shape (n,)
    t : float
        In ``(0, T]``.
    return_residue : bool
        Also return the imaginary residue of the unfolded two-sided sum.

    Raises
    ------
    ContourTooCloseError, SingularNodeError
    """
    L = np.asarray(L, dtype=float)
    g = np.asarray(g_coeffs, dtype=float)
    if not 0 < t <= plan.T * (1 + 1e-12):
        raise ValueError("t must lie in (0, T]")
    _check_margin(plan, L)
    w = plan.weights(t)
    _, X = _node_solves(plan, L, np.repeat(g[None].astype(complex), plan.N + 1, axis=0))
    S = w @ X
    Am = 2 * plan.delta * np.eye(L.shape[0]) - L
    out = np.linalg.matrix_power(Am, plan.m) @ S.real
    if return_residue:
        # two-sided sum: k and -k produce conjugate terms
        half = w.copy()
        half[1:] /= 2.0
        two = half @ X + np.conj(half[1:] @ X[1:])
        resid = float(np.max(np.abs((np.linalg.matrix_power(Am, plan.m) @ two).imag)))
        return out, resid
    return out


# ---------------------------------------------------------------------------
# Policies and closed-loop fields
# ---------------------------------------------------------------------------

@dataclass
class FeedbackPolicy:
    """Basis-coefficient feedback laws, one coefficient vector per channel.

    For the turret game the channels are ``u`` (turret rate), ``v`` and
    ``v_perp`` (agent velocity along and across the line of sight).

    Examples
    --------
    >>> from koopgame.dictionary import MonomialBasis
    >>> pol = FeedbackPolicy(MonomialBasis(degree=1), {"u": np.array([0.0, 2.0])})
    >>> float(pol.evaluate(np.array([[0.5]]))["u"][0])
    1.0
    """

    basis: object
    coefs: Dict[str, np.ndarray]

    def copy(self) -> "FeedbackPolicy":
        return FeedbackPolicy(self.basis, {k: np.array(v, dtype=float) for k, v in self.coefs.items()})

    def evaluate(self, X) -> Dict[str, np.ndarray]:
        Phi = self.basis.evaluate(np.atleast_2d(np.asarray(X, dtype=float)))[0]
        return {k: Phi @ c for k, c in self.coefs.items()}

    def flat(self, channels: Sequence[str]) -> np.ndarray:
        return np.concatenate([self.coefs[c] for c in channels]) if channels else np.zeros(0)

    def with_flat(self, channels: Sequence[str], x) -> "FeedbackPolicy":
        out = self.copy()
        off = 0
        for c in channels:
            k = out.coefs[c].size
            out.coefs[c] = np.array(x[off:off + k], dtype=float)
            off += k
        return out

    def to_dict(self) -> dict:
        return {"basis": self.basis.to_dict(), "coefs": {k: v.tolist() for k, v in self.coefs.items()}}


class ClosedLoopSpec:
    """Closed-loop ingredients of a game for the generator pipeline.

    Subclasses define ``channels`` (policy channel names), ``owner``
    (channel -> player) and the vectorized callables below.  ``Cv`` maps
    channel name to policy values at the points ``X``.
    """

    channels: tuple = ()
    owner: dict = {}

    def field(self, X, Cv):
        """Return ``f (M, d)`` and ``df`` with ``df[c] (M, d)`` per channel."""
        raise NotImplementedError

    def running(self, X, Cv):
        """Return ``h (M,)`` and ``dh`` with ``dh[c] (M,)`` per channel."""
        return np.zeros(X.shape[0]), {c: np.zeros(X.shape[0]) for c in self.channels}

    def terminal(self, X):
        raise NotImplementedError

    def policy_dependent_running(self) -> bool:
        return False


class TurretClosedLoop(ClosedLoopSpec):
    """``r' = r^2 v``, ``alpha' = r v_perp - u`` with velocity components."""

    channels = ("u", "v", "v_perp")
    owner = {"u": "u", "v": "v", "v_perp": "v"}

    def __init__(self, game: Optional[TurretDefenseGame] = None):
        self.game = game or TurretDefenseGame()

    def field(self, X, Cv):
        r = X[:, 0]
        f = np.stack([r * r * Cv["v"], r * Cv["v_perp"] - Cv["u"]], axis=1)
        z = np.zeros_like(r)
        df = {"u": np.stack([z, -np.ones_like(r)], axis=1),
              "v": np.stack([r * r, z], axis=1),
              "v_perp": np.stack([z, r], axis=1)}
        return f, df

    def running(self, X, Cv):
        h = self.game.running_weight * X[:, 0] * np.cos(X[:, 1])
        return h, {c: np.zeros_like(h) for c in self.channels}

    def terminal(self, X):
        return X[:, 0] * np.cos(X[:, 1])


class LQClosedLoop(ClosedLoopSpec):
    """Scalar LQ game with control-dependent running cost."""

    channels = ("u", "v")
    owner = {"u": "u", "v": "v"}

    def __init__(self, game: LinearQuadraticGame):
        self.game = game

    def field(self, X, Cv):
        g = self.game
        f = (g.a * X[:, 0] + g.b * Cv["u"] + g.c * Cv["v"])[:, None]
        return f, {"u": np.full((X.shape[0], 1), g.b), "v": np.full((X.shape[0], 1), g.c)}

    def running(self, X, Cv):
        g = self.game
        h = g.q * X[:, 0] ** 2 + g.r_v * Cv["v"] ** 2 - g.r_u * Cv["u"] ** 2
        return h, {"u": -2 * g.r_u * Cv["u"], "v": 2 * g.r_v * Cv["v"]}

    def terminal(self, X):
        return self.game.q_T * X[:, 0] ** 2

    def policy_dependent_running(self) -> bool:
        return True


class FieldClosedLoop(ClosedLoopSpec):
    """Control-free field with given terminal and running costs."""

    channels = ()
    owner = {}

    def __init__(self, f: Callable, g: Callable, h: Optional[Callable] = None):
        self._f, self._g, self._h = f, g, h

    def field(self, X, Cv):
        return np.atleast_2d(self._f(X)).reshape(X.shape), {}

    def running(self, X, Cv):
        h = np.zeros(X.shape[0]) if self._h is None else np.asarray(self._h(X), dtype=float)
        return h, {}

    def terminal(self, X):
        return np.asarray(self._g(X), dtype=float)


def closed_loop_for(game) -> ClosedLoopSpec:
    if isinstance(game, ClosedLoopSpec):
        return game
    if isinstance(game, TurretDefenseGame):
        return TurretClosedLoop(game)
    if isinstance(game, LinearQuadraticGame):
        return LQClosedLoop(game)
    raise TypeError(f"no closed-loop form for {type(game).__name__}")


# ---------------------------------------------------------------------------
# Generator
# ---------------------------------------------------------------------------

@dataclass
class GeneratorApprox:
    """Finite generator of a closed loop on a basis.

    Attributes
    ----------
    L : ndarray, shape (nb, nb)
        Basis-coordinate matrix, ``pinv(G) D``.
    L_hat : ndarray, shape (nb, nb)
        The same operator in orthonormal value coordinates.
    f_values : ndarray, shape (M, d)
        Closed-loop field at the evaluation points.
    D : ndarray, shape (M, nb)
    residual : float
        Frobenius residual ``||G L - D||`` of the collocation system.
    """

    L: np.ndarray
    L_hat: np.ndarray
    f_values: np.ndarray
    D: np.ndarray
    residual: float
    policy_values: Dict[str, np.ndarray] = field(default_factory=dict)


def _policy_values(be: BasisEvaluation, spec: ClosedLoopSpec, policy: Optional[FeedbackPolicy], X=None):
    if not spec.channels:
        return {}, {}
    X = be.points if X is None else X
    Phi = policy.basis.evaluate(X)[0]
    return {c: Phi @ policy.coefs[c] for c in spec.channels}, Phi


def assemble_generator(basis_eval: BasisEvaluation, game, policy: Optional[FeedbackPolicy] = None) -> GeneratorApprox:
    """Collocation fit of the closed-loop generator.

    Examples
    --------
    >>> from koopgame.dictionary import MonomialBasis, build_rbf_evaluation
    >>> be = build_rbf_evaluation(MonomialBasis(degree=2))
    >>> spec = FieldClosedLoop(lambda X: np.zeros_like(X), lambda X: X[:, 0])
    >>> float(np.abs(assemble_generator(be, spec).L).max())
    0.0
    """
    spec = closed_loop_for(game)
    Cv, _ = _policy_values(basis_eval, spec, policy)
    if any(not np.all(np.isfinite(v)) for v in Cv.values()):
        raise NonFiniteError("policy values are not finite")
    f, _ = spec.field(basis_eval.points, Cv)
    D = np.einsum("jk,kji->ji", f, basis_eval.dG)
    L = basis_eval.pinv_G @ D
    W = basis_eval.Vt.T / basis_eval.s
    L_hat = basis_eval.U.T @ D @ W
    res = float(np.linalg.norm(basis_eval.G @ L - D))
    return GeneratorApprox(L, L_hat, f, D, res, Cv)


# ---------------------------------------------------------------------------
# Cost functional and gradients
# ---------------------------------------------------------------------------

@dataclass
class CostFunctionalValue:
    """Per-point costs, their mean and optional coefficient gradients.

    ``J_total`` is the unweighted mean of ``J_pointwise`` over the
    evaluation grid; ``gradients`` maps channel to ``dJ_total / dcoef``.
    """

    J_pointwise: np.ndarray
    J_total: float
    gradients: Optional[Dict[str, np.ndarray]] = None


class ResolventCost:
    """Cost functional and gradient of a game on a fixed basis and plan.

    Parameters
    ----------
    basis_eval : BasisEvaluation
        Value basis and evaluation grid.
    game : GameSpec or ClosedLoopSpec
    plan : ResolventPlan
    """

    def __init__(self, basis_eval: BasisEvaluation, game, plan: ResolventPlan):
        self.be = basis_eval
        self.spec = closed_loop_for(game)
        self.plan = plan
        self.X = basis_eval.points
        self.Q = basis_eval.U
        self.W = basis_eval.Vt.T / basis_eval.s
        self.a = self.Q.mean(axis=0)
        self.g_hat = self.Q.T @ self.spec.terminal(self.X)
        self.n_calls = 0
        self._w = plan.weights()
        self._rho = plan.running_factor()
        self._phi_cache = {}

    def _phi(self, policy):
        key = id(policy.basis)
        if key not in self._phi_cache:
            self._phi_cache[key] = policy.basis.evaluate(self.X)[0]
        return self._phi_cache[key]

    def evaluate(self, policy: Optional[FeedbackPolicy], grad: bool = False,
                 points=None) -> CostFunctionalValue:
        self.n_calls += 1
        spec, plan = self.spec, self.plan
        if spec.channels:
            Phi = self._phi(policy)
            Cv = {c: Phi @ policy.coefs[c] for c in spec.channels}
        else:
            Phi, Cv = None, {}
        f, df = spec.field(self.X, Cv)
        hv, dh = spec.running(self.X, Cv)
        D = np.einsum("jk,kji->ji", f, self.be.dG)
        L = self.Q.T @ D @ self.W
        n = L.shape[0]
        _check_margin(plan, L)
        h_hat = self.Q.T @ hv
        rhs = self.g_hat[None, :] + self._rho[:, None] * h_hat[None, :]
        A, Xs = _node_solves(plan, L, rhs.astype(complex))
        S = (self._w @ Xs).real
        Am = 2 * plan.delta * np.eye(n) - L
        Pw = _powers(Am, plan.m)
        xhat = Pw[plan.m] @ S
        if points is None:
            Jp = self.Q @ xhat
        else:
            Jp = self.be.basis.evaluate(points)[0] @ (self.W @ xhat)
        Jt = float(self.a @ xhat)
        if not math.isfinite(Jt):
            raise NonFiniteError("cost functional is not finite")
        if not grad:
            return CostFunctionalValue(Jp, Jt)
        al = Pw[plan.m].T @ self.a
        Gam = np.zeros((n, n))
        for p in range(plan.m):
            Gam -= np.outer(Pw[p].T @ self.a, Pw[plan.m - 1 - p] @ S)
        Y = np.linalg.solve(np.transpose(A, (0, 2, 1)), np.repeat(al[None, :, None].astype(complex),
                                                                  plan.N + 1, axis=0))[:, :, 0]
        Gam += np.einsum("k,ki,kj->ij", self._w, Y, Xs).real
        PG = self.Q @ Gam @ self.W.T
        Hk = np.einsum("ji,kji->jk", PG, self.be.dG)
        dJ_dh = self.Q @ (np.einsum("k,k,ki->i", self._w, self._rho, Y).real)
        grads = {}
        for c in spec.channels:
            pointwise = np.sum(Hk * df[c], axis=1) + dJ_dh * dh[c]
            grads[c] = Phi.T @ pointwise
        return CostFunctionalValue(Jp, Jt, grads)


def cost_functional(plan: ResolventPlan, basis_eval: BasisEvaluation, game,
                    policy: Optional[FeedbackPolicy] = None, eval_points=None) -> CostFunctionalValue:
    """Terminal plus running cost from every evaluation point in one contour pass."""
    return ResolventCost(basis_eval, game, plan).evaluate(policy, False, eval_points)


def cost_gradient(plan: ResolventPlan, basis_eval: BasisEvaluation, game,
                  policy: FeedbackPolicy) -> Dict[str, np.ndarray]:
    """Gradients of ``J_total`` with respect to every policy coefficient."""
    return ResolventCost(basis_eval, game, plan).evaluate(policy, True).gradients
