"""Extended dynamic mode decomposition with control.

A :class:`KoopmanControlModel` advances lifted states linearly,

    Psi(x_{t+1}) = K Psi(x_t) + K_u u_t + K_v v_t,

where for the turret game ``v_t`` holds the lifted agent controls
``(nu, nu_perp) = (r^2 v_A cos psi, r v_A sin psi)``.  The fit is a single
least-squares solve against the augmented data matrix ``[Psi(x); v; u]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dictionary import RffDictionary, lift
from .errors import ModelMismatchError, NonFiniteError, RankDeficientError
from .game import GameSpec, Trajectory, TurretDefenseGame, integrate_batch

__all__ = [
    "GridSpec",
    "TrainingSet",
    "KoopmanControlModel",
    "turret_grid",
    "generate_training_data",
    "fit_edmdc",
    "model_error_report",
    "random_admissible_controls",
]

LIFTINGS = ("lifted", "unlifted", "identity")


@dataclass(frozen=True)
class GridSpec:
    """Axes of the Cartesian sampling grid.

    ``state_axes`` has one array per state coordinate; ``u_axes`` and
    ``v_axes`` one array per control component.  For the turret game the
    single ``v`` axis holds headings.
    """

    state_axes: tuple
    u_axes: tuple
    v_axes: tuple

    def counts(self):
        return [len(a) for a in self.state_axes + self.u_axes + self.v_axes]

    def size(self) -> int:
        return int(np.prod(self.counts()))

    def to_dict(self) -> dict:
        return {k: [np.asarray(a).tolist() for a in getattr(self, k)]
                for k in ("state_axes", "u_axes", "v_axes")}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(*(tuple(np.asarray(a, dtype=float) for a in d[k])
                     for k in ("state_axes", "u_axes", "v_axes")))


def turret_grid(n_r: int = 21, n_alpha: int = 21, n_u: int = 9, n_heading: int = 16) -> GridSpec:
    """Equally spaced turret grid; headings exclude the duplicate ``2 pi``."""
    return GridSpec(
        (np.linspace(0.0, 1.0, n_r), np.linspace(0.0, np.pi, n_alpha)),
        (np.linspace(-1.0, 1.0, n_u),),
        (np.linspace(0.0, 2.0 * np.pi, n_heading, endpoint=False),),
    )


@dataclass
class TrainingSet:
    """Snapshot triples ``(x_i, (u_i, v_i), y_i)`` one step apart."""

    X: np.ndarray
    U: np.ndarray
    V: np.ndarray
    Y: np.ndarray
    dt: float
    grid: Optional[GridSpec] = None

    def __len__(self):
        return self.X.shape[0]


def generate_training_data(game: GameSpec, dictionary: Optional[RffDictionary],
                           grid_spec: GridSpec, dt: float = 0.01) -> TrainingSet:
    """Cartesian-product samples, each advanced by one RK4 step.

    Examples
    --------
    >>> from koopgame.game import TurretDefenseGame
    >>> ts = generate_training_data(TurretDefenseGame(), None, turret_grid(11, 11, 5, 8))
    >>> len(ts)
    4840
    """
    axes = list(grid_spec.state_axes) + list(grid_spec.u_axes) + list(grid_spec.v_axes)
    if any(len(a) == 0 for a in axes):
        raise ValueError("every grid axis needs at least one point")
    mesh = np.meshgrid(*axes, indexing="ij")
    flat = np.stack([m.ravel() for m in mesh], axis=-1)
    d = len(grid_spec.state_axes)
    mu = len(grid_spec.u_axes)
    X, U, V = flat[:, :d], flat[:, d:d + mu], flat[:, d + mu:]
    states, _, _ = integrate_batch(game, X, U[:, None, :], V[:, None, :], dt)
    return TrainingSet(X, U, V, states[:, 1], float(dt), grid_spec)


def _lift_controls(lifting, v_A, r, U, V):
    """Stack the control block ``[v_lifted, u]`` used in the regression."""
    if lifting == "identity":
        return np.concatenate([V, U], axis=-1)
    psi = V[..., 0]
    if lifting == "lifted":
        vv = np.stack([r * r * v_A * np.cos(psi), r * v_A * np.sin(psi)], axis=-1)
    else:
        vv = np.stack([v_A * np.cos(psi), v_A * np.sin(psi)], axis=-1)
    return np.concatenate([vv, U], axis=-1)


@dataclass
class KoopmanControlModel:
    """Fitted linear lifted model with quadratic cost matrices.

    Attributes
    ----------
    dictionary : RffDictionary
    K : ndarray, shape (N, N)
    K_u : ndarray, shape (N, m_u)
    K_v : ndarray, shape (N, m_v)
        For the turret game the columns act on ``(nu, nu_perp)`` (lifted)
        or ``(v_A cos psi, v_A sin psi)`` (unlifted baseline).
    dt : float
    control_lifting : str
        ``"lifted"``, ``"unlifted"`` or ``"identity"``.
    v_A : float
    Q_g, Q_h : ndarray, shape (N + 1, N + 1)
        Cost forms over ``zeta = [Psi; 1]``; empty when no cost is defined.
    metadata : dict
    """

    dictionary: RffDictionary
    K: np.ndarray
    K_u: np.ndarray
    K_v: np.ndarray
    dt: float
    control_lifting: str = "lifted"
    v_A: float = 1.0
    Q_g: Optional[np.ndarray] = None
    Q_h: Optional[np.ndarray] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        # C order, so a fitted model and its reloaded copy give bitwise
        # identical products (BLAS summation order depends on layout).
        for name in ("K", "K_u", "K_v", "Q_g", "Q_h"):
            a = getattr(self, name)
            if a is not None:
                setattr(self, name, np.ascontiguousarray(a, dtype=float))

    @property
    def n_lifted(self) -> int:
        return self.K.shape[0]

    @property
    def B(self) -> np.ndarray:
        """Input matrix acting on ``[u; v]``."""
        return np.hstack([self.K_u, self.K_v])

    def lift(self, x) -> np.ndarray:
        return lift(self.dictionary, x)

    def project(self, psi) -> np.ndarray:
        """State recovered from the identity block of the lifted vector."""
        idx = [self.dictionary.index_of(f"x{i}") for i in range(self.dictionary.state_dim)]
        return np.asarray(psi)[..., idx]

    def lifted_agent_controls(self, r, heading) -> np.ndarray:
        """Agent control columns for a heading at inverse range ``r``."""
        full = _lift_controls(self.control_lifting, self.v_A, np.asarray(r, dtype=float),
                              np.zeros(np.shape(heading) + (1,)),
                              np.asarray(heading, dtype=float)[..., None])
        return full[..., :-1]

    def step(self, psi, u, v_lifted) -> np.ndarray:
        return psi @ self.K.T + np.atleast_1d(u) @ self.K_u.T + np.atleast_1d(v_lifted) @ self.K_v.T

    def quadratic_cost(self, psis) -> float:
        """``sum_{t<n} zeta_t^T Q_h zeta_t + zeta_n^T Q_g zeta_n``."""
        if self.Q_g is None:
            raise ModelMismatchError("model has no cost matrices")
        Z = np.concatenate([psis, np.ones((psis.shape[0], 1))], axis=1)
        run = np.einsum("ti,ij,tj->", Z[:-1], self.Q_h, Z[:-1])
        return float(run + Z[-1] @ self.Q_g @ Z[-1])

    def rollout(self, x0, u_seq, v_seq) -> "ModelRollout":
        """Iterate the lifted map from ``x0``.

        For the turret game ``v_seq`` holds headings, converted to lifted
        controls with the model's own predicted ``r`` at each step.
        """
        u_seq = np.asarray(u_seq, dtype=float).reshape(len(u_seq), -1)
        v_seq = np.asarray(v_seq, dtype=float).reshape(len(v_seq), -1)
        n = u_seq.shape[0]
        psis = np.empty((n + 1, self.n_lifted))
        psis[0] = self.lift(np.asarray(x0, dtype=float))
        r_idx = 0
        for t in range(n):
            if self.control_lifting == "identity":
                vl = v_seq[t]
            else:
                vl = self.lifted_agent_controls(psis[t, r_idx], v_seq[t, 0])
            psis[t + 1] = self.K @ psis[t] + self.K_u @ u_seq[t] + self.K_v @ vl
        if not np.all(np.isfinite(psis)):
            raise NonFiniteError("lifted rollout diverged")
        states = self.project(psis)
        cost = self.quadratic_cost(psis) if self.Q_g is not None else float("nan")
        traj = Trajectory(self.dt * np.arange(n + 1), states, u_seq, v_seq, cost)
        return ModelRollout(traj, psis, cost)

    def rollout_batch(self, x0, U, V) -> tuple:
        """Vectorized rollout of ``B`` sequences from one ``x0``.

        Returns ``(costs (B,), states (B, n + 1, d))``.
        """
        U = np.asarray(U, dtype=float)
        V = np.asarray(V, dtype=float)
        B = max(U.shape[0], V.shape[0])
        U = np.broadcast_to(U, (B,) + U.shape[1:])
        V = np.broadcast_to(V, (B,) + V.shape[1:])
        n = U.shape[1]
        psi = np.repeat(self.lift(np.asarray(x0, dtype=float))[None], B, axis=0)
        psis = np.empty((B, n + 1, self.n_lifted))
        psis[:, 0] = psi
        for t in range(n):
            if self.control_lifting == "identity":
                vl = V[:, t]
            else:
                vl = self.lifted_agent_controls(psi[:, 0], V[:, t, 0])
            psi = psi @ self.K.T + U[:, t] @ self.K_u.T + vl @ self.K_v.T
            psis[:, t + 1] = psi
        Z = np.concatenate([psis, np.ones((B, n + 1, 1))], axis=-1)
        costs = (np.einsum("bti,ij,btj->b", Z[:, :-1], self.Q_h, Z[:, :-1])
                 + np.einsum("bi,ij,bj->b", Z[:, -1], self.Q_g, Z[:, -1]))
        return costs, self.project(psis)

    # serialization ---------------------------------------------------------
    def to_dict(self) -> dict:
        out = {
            "dictionary": self.dictionary.to_dict(),
            "K": self.K.tolist(), "K_u": self.K_u.tolist(), "K_v": self.K_v.tolist(),
            "dt": self.dt, "control_lifting": self.control_lifting, "v_A": self.v_A,
            "metadata": self.metadata,
        }
        if self.Q_g is not None:
            nz = np.argwhere(self.Q_g != 0)
            out["Q_g"] = {"size": self.Q_g.shape[0],
                          "entries": [[int(i), int(j), float(self.Q_g[i, j])] for i, j in nz]}
            out["running_scale"] = float(self.Q_h[tuple(nz[0])] / self.Q_g[tuple(nz[0])]) if len(nz) else 0.0
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "KoopmanControlModel":
        Q_g = Q_h = None
        if "Q_g" in d:
            Q_g = np.zeros((d["Q_g"]["size"],) * 2)
            for i, j, val in d["Q_g"]["entries"]:
                Q_g[i, j] = val
            Q_h = d["running_scale"] * Q_g
        return cls(RffDictionary.from_dict(d["dictionary"]), np.asarray(d["K"], dtype=float),
                   np.asarray(d["K_u"], dtype=float), np.asarray(d["K_v"], dtype=float),
                   float(d["dt"]), d["control_lifting"], float(d["v_A"]), Q_g, Q_h,
                   d.get("metadata", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path) -> "KoopmanControlModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class ModelRollout:
    trajectory: Trajectory
    lifted: np.ndarray
    cost: float


def turret_cost_matrices(dictionary: RffDictionary, dt: float, running_weight: float = 0.1):
    """``Q_g`` with a single unit entry pairing ``r`` and ``cos alpha``.

    Raises
    ------
    ModelMismatchError
        If the dictionary lacks the ``r`` or ``cos alpha`` observables.
    """
    try:
        i_r = dictionary.index_of("x0")
        i_c = dictionary.index_of("cos(x1)")
    except KeyError as exc:
        raise ModelMismatchError(f"dictionary lacks observable {exc}") from None
    Q_g = np.zeros((dictionary.size + 1,) * 2)
    Q_g[min(i_r, i_c), max(i_r, i_c)] = 1.0
    return Q_g, running_weight * dt * Q_g


def fit_edmdc(data: TrainingSet, dictionary: RffDictionary, *, control_lifting: str = "lifted",
              v_A: float = 1.0, holdout: float = 0.2, seed: int = 0, rcond: float = 1e-10,
              running_weight: Optional[float] = 0.1) -> KoopmanControlModel:
    """Least-squares fit of ``[K K_v K_u]`` from snapshot triples.

    Parameters
    ----------
    data : TrainingSet
    dictionary : RffDictionary
    control_lifting : {"lifted", "unlifted", "identity"}
        ``"identity"`` regresses on the raw ``[v; u]`` controls.
    v_A : float
    holdout : float
        Fraction of samples withheld for the one-step holdout error.
    seed : int
        Seed of the holdout split.
    rcond : float
        Relative singular-value cutoff of the least-squares solve.
    running_weight : float or None
        Builds the turret cost matrices when not None.

    Raises
    ------
    RankDeficientError
        If the augmented data matrix has rank below ``N + m``.
    """
    if control_lifting not in LIFTINGS:
        raise ValueError(f"control_lifting must be one of {LIFTINGS}")
    M = len(data)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(M)
    n_hold = int(math.floor(holdout * M))
    test, train = perm[:n_hold], perm[n_hold:]

    def blocks(idx):
        X = data.X[idx]
        Px = lift(dictionary, X)
        W = _lift_controls(control_lifting, v_A, X[:, 0], data.U[idx], data.V[idx])
        return np.concatenate([Px, W], axis=1), lift(dictionary, data.Y[idx])

    Om, PY = blocks(train)
    N = dictionary.size
    if Om.shape[0] < Om.shape[1]:
        raise RankDeficientError(f"{Om.shape[0]} samples for {Om.shape[1]} unknowns")
    sol, _, rank, sv = np.linalg.lstsq(Om, PY, rcond=rcond)
    if rank < Om.shape[1]:
        raise RankDeficientError(f"augmented data matrix has rank {rank} < {Om.shape[1]}")
    Kt = sol.T
    m_v = Om.shape[1] - N - data.U.shape[1]
    K, K_v, K_u = Kt[:, :N], Kt[:, N:N + m_v], Kt[:, N + m_v:]
    train_res = float(np.linalg.norm(PY - Om @ sol))
    meta = {
        "n_samples": int(M), "n_train": int(train.size), "n_holdout": int(test.size),
        "train_residual_fro": train_res,
        "grid": data.grid.to_dict() if data.grid is not None else None,
        "seed": int(seed), "condition": float(sv[0] / sv[-1]),
    }
    if test.size:
        Ot, PYt = blocks(test)
        R = PYt - Ot @ sol
        meta["holdout_rmse"] = float(np.sqrt(np.mean(R ** 2)))
        if dictionary.has_identity():
            idx = [dictionary.index_of(f"x{k}") for k in range(dictionary.state_dim)]
            meta["holdout_state_rmse"] = np.sqrt(np.mean(R[:, idx] ** 2, axis=0)).tolist()
    Q_g = Q_h = None
    if running_weight is not None:
        Q_g, Q_h = turret_cost_matrices(dictionary, data.dt, running_weight)
    return KoopmanControlModel(dictionary, K, K_u, K_v, data.dt, control_lifting, v_A,
                               Q_g, Q_h, meta)


def training_residual(model: KoopmanControlModel, data: TrainingSet, Kt=None) -> float:
    """Frobenius residual ``||Psi_Y - [K K_v K_u] Omega||`` on ``data``."""
    X = data.X
    Om = np.concatenate([lift(model.dictionary, X),
                         _lift_controls(model.control_lifting, model.v_A, X[:, 0], data.U, data.V)], axis=1)
    if Kt is None:
        Kt = np.hstack([model.K, model.K_v, model.K_u])
    return float(np.linalg.norm(lift(model.dictionary, data.Y) - Om @ Kt.T))


# ---------------------------------------------------------------------------
# Accuracy reports
# ---------------------------------------------------------------------------

def _finite_box(lo, hi):
    lo = np.where(np.isfinite(lo), lo, -1.0)
    hi = np.where(np.isfinite(hi), hi, 1.0)
    return lo, hi


def random_admissible_controls(game: GameSpec, n_steps: int, rng, n_segments: int = 10):
    """Piecewise-constant random controls inside the game's control box."""
    seg = np.minimum((np.arange(n_steps) * n_segments) // n_steps, n_segments - 1)
    out = []
    for p in ("u", "v"):
        lo, hi = _finite_box(*game.control_bounds[p])
        out.append(rng.uniform(lo, hi, size=(n_segments, lo.size))[seg])
    return out


def model_error_report(model: KoopmanControlModel, game: GameSpec, n_test: int = 100,
                       seed: int = 0, horizon: Optional[float] = None, n_cells: int = 4,
                       max_tries: int = 100000) -> dict:
    """Compare model rollouts with the RK4 truth on random admissible inputs.

    Rollouts whose true path leaves the state box are redrawn, so every
    reported rollout is admissible.

    Returns
    -------
    dict
        ``one_step_rmse`` and ``rollout_rmse`` (per state coordinate),
        ``per_region_breakdown`` (rollout RMSE per start cell of an
        ``n_cells x n_cells`` grid over the first two coordinates) and
        ``n_test``.  Empty lists when ``n_test == 0``.
    """
    if n_test <= 0:
        return {"n_test": 0, "one_step_rmse": [], "rollout_rmse": [], "per_region_breakdown": []}
    rng = np.random.default_rng(seed)
    T = game.horizon if horizon is None else horizon
    n = int(round(T / model.dt))
    lo, hi = _finite_box(*game.domain)
    d = game.state_dim
    errs, starts, one = [], [], []
    tries = 0
    while len(errs) < n_test:
        tries += 1
        if tries > max_tries:
            raise RuntimeError("could not draw enough admissible rollouts")
        x0 = rng.uniform(lo, hi)
        U, V = random_admissible_controls(game, n, rng)
        traj_states, _, _ = integrate_batch(game, x0[None], U[None], V[None], model.dt)
        truth = traj_states[0]
        if not np.all(game.in_domain(truth, tol=1e-9)):
            continue
        pred = model.rollout(x0, U, V).trajectory.states
        errs.append(pred - truth)
        starts.append(x0)
        # one-step error along the true path
        psis = model.lift(truth[:-1])
        if model.control_lifting == "identity":
            vl = V
        else:
            vl = model.lifted_agent_controls(truth[:-1, 0], V[:, 0])
        nxt = psis @ model.K.T + U @ model.K_u.T + vl @ model.K_v.T
        one.append(model.project(nxt) - truth[1:])
    E = np.asarray(errs)
    S = np.asarray(starts)
    O = np.concatenate(one)
    report = {
        "n_test": int(n_test),
        "one_step_rmse": np.sqrt(np.mean(O ** 2, axis=0)).tolist(),
        "rollout_rmse": np.sqrt(np.mean(E ** 2, axis=(0, 1))).tolist(),
        "rollout_max_abs": np.abs(E).max(axis=(0, 1)).tolist(),
    }
    cells = []
    if d >= 2:
        edges = [np.linspace(lo[k], hi[k], n_cells + 1) for k in range(2)]
        ix = [np.clip(np.searchsorted(edges[k], S[:, k], side="right") - 1, 0, n_cells - 1)
              for k in range(2)]
        for i in range(n_cells):
            for j in range(n_cells):
                mask = (ix[0] == i) & (ix[1] == j)
                if mask.any():
                    cells.append({"cell": [i, j],
                                  "lower": [float(edges[0][i]), float(edges[1][j])],
                                  "upper": [float(edges[0][i + 1]), float(edges[1][j + 1])],
                                  "count": int(mask.sum()),
                                  "rmse": np.sqrt(np.mean(E[mask] ** 2, axis=(0, 1))).tolist()})
    report["per_region_breakdown"] = cells
    return report
