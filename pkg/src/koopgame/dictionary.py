"""Observable dictionaries and collocation bases.

Two families live here:

* :class:`RffDictionary`, explicit observables followed by random Fourier
  features ``cos(phi_i . x + b_i)``, used to lift states for EDMDc.
* :class:`RbfBasis` and :class:`MonomialBasis`, finite function bases with
  value and derivative matrices on a grid of evaluation points, used to
  approximate the Koopman generator.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ._kernels import KERNELS
from .errors import NonFiniteError, RankDeficientError

__all__ = [
    "RffDictionary",
    "build_rff",
    "lift",
    "RbfBasis",
    "MonomialBasis",
    "BasisEvaluation",
    "build_rbf_evaluation",
    "turret_rbf_basis",
]

_OBS_RE = re.compile(r"^(x|cos\(x|sin\(x)(\d+)\)?$")


def _parse_observable(name: str):
    m = _OBS_RE.match(name)
    if m is None:
        raise ValueError(f"unknown explicit observable {name!r}")
    kind = {"x": "id", "cos(x": "cos", "sin(x": "sin"}[m.group(1)]
    return kind, int(m.group(2))


@dataclass(frozen=True)
class RffDictionary:
    """Explicit observables followed by random Fourier features.

    Attributes
    ----------
    frequencies : ndarray, shape (N_rff, d)
    offsets : ndarray, shape (N_rff,)
    seed : int
    variance : float
    explicit_observables : tuple of str
        Names such as ``"x0"`` (identity component) or ``"cos(x1)"``.
    """

    frequencies: np.ndarray
    offsets: np.ndarray
    seed: int
    variance: float
    explicit_observables: tuple

    @property
    def state_dim(self) -> int:
        return int(self.frequencies.shape[1])

    @property
    def n_rff(self) -> int:
        return int(self.frequencies.shape[0])

    @property
    def size(self) -> int:
        return len(self.explicit_observables) + self.n_rff

    def index_of(self, name: str) -> int:
        """Position of an explicit observable in the lifted vector."""
        try:
            return self.explicit_observables.index(name)
        except ValueError:
            raise KeyError(name) from None

    def has_identity(self) -> bool:
        return all(f"x{i}" in self.explicit_observables for i in range(self.state_dim))

    def to_dict(self) -> dict:
        return {
            "seed": int(self.seed),
            "variance": float(self.variance),
            "N_rff": self.n_rff,
            "state_dim": self.state_dim,
            "offsets": self.offsets.tolist(),
            "frequencies": self.frequencies.tolist(),
            "explicit_observables": list(self.explicit_observables),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RffDictionary":
        dim = int(d.get("state_dim", 2))
        freq = np.asarray(d["frequencies"], dtype=float).reshape(-1, dim)
        return cls(freq, np.asarray(d["offsets"], dtype=float).reshape(-1), int(d["seed"]),
                   float(d["variance"]), tuple(d["explicit_observables"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "RffDictionary":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_rff(seed: int = 0, N_rff: int = 100, variance: float = 100.0, state_dim: int = 2,
              explicit_observables: Optional[Sequence[str]] = None) -> RffDictionary:
    """Sample a random Fourier feature dictionary.

    Parameters
    ----------
    seed : int
    N_rff : int
        Number of random features (0 gives the explicit block only).
    variance : float
        Variance of the diagonal Gaussian for the frequencies.
    state_dim : int
    explicit_observables : sequence of str, optional
        Defaults to the identity components followed by the cosine of the
        last coordinate, i.e. ``("x0", "x1", "cos(x1)")`` for a 2-D state.

    Examples
    --------
    >>> d = build_rff(seed=3, N_rff=0)
    >>> d.explicit_observables
    ('x0', 'x1', 'cos(x1)')
    """
    if N_rff < 0:
        raise ValueError("N_rff must be non-negative")
    if explicit_observables is None:
        explicit_observables = [f"x{i}" for i in range(state_dim)] + [f"cos(x{state_dim - 1})"]
    for name in explicit_observables:
        kind, idx = _parse_observable(name)
        if idx >= state_dim:
            raise ValueError(f"observable {name!r} exceeds state dimension")
    rng = np.random.default_rng(seed)
    freq = rng.normal(0.0, math.sqrt(variance), size=(N_rff, state_dim))
    offs = rng.uniform(0.0, 2.0 * np.pi, size=N_rff)
    return RffDictionary(freq, offs, int(seed), float(variance), tuple(explicit_observables))


def lift(dictionary: RffDictionary, x) -> np.ndarray:
    """Evaluate the dictionary, ``x`` of shape ``(..., d)``."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("cannot lift a non-finite state")
    cols = []
    for name in dictionary.explicit_observables:
        kind, i = _parse_observable(name)
        xi = x[..., i]
        cols.append(xi if kind == "id" else np.cos(xi) if kind == "cos" else np.sin(xi))
    out = np.stack(cols, axis=-1) if cols else np.zeros(x.shape[:-1] + (0,))
    if dictionary.n_rff:
        rff = np.cos(x @ dictionary.frequencies.T + dictionary.offsets)
        out = np.concatenate([out, rff], axis=-1)
    return out


# ---------------------------------------------------------------------------
# Collocation bases
# ---------------------------------------------------------------------------

def _grid(lower, upper, counts):
    axes = [np.linspace(lo, hi, int(n)) for lo, hi, n in zip(lower, upper, counts)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1), axes


@dataclass(frozen=True)
class RbfBasis:
    """Gaussian RBFs on a rectangular centroid grid.

    The kernel of centroid ``c`` is
    ``exp(-eps2 * sum_k ((x_k - c_k) / s_k) ** 2)`` with ``s`` the centroid
    spacing, so the value at an adjacent centroid is ``neighbour_value``.

    Attributes
    ----------
    lower, upper : tuple of float
        The state domain.
    n_centroids : tuple of int
        Centroids per coordinate.
    n_eval : tuple of int
        Evaluation points per coordinate.
    inflate : float
        Centroids span the domain enlarged by this fraction at each end.
    neighbour_value : float
    """

    lower: tuple = (0.0, 0.0)
    upper: tuple = (1.0, math.pi)
    n_centroids: tuple = (5, 5)
    n_eval: tuple = (25, 25)
    inflate: float = 0.1
    neighbour_value: float = 0.85

    def __post_init__(self):
        if not 0.0 < self.neighbour_value < 1.0:
            raise ValueError("neighbour_value must lie in (0, 1)")
        if len({len(self.lower), len(self.upper), len(self.n_centroids), len(self.n_eval)}) != 1:
            raise ValueError("inconsistent basis dimensions")

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def eps2(self) -> float:
        return -math.log(self.neighbour_value)

    @property
    def epsilon(self) -> float:
        return math.sqrt(self.eps2)

    def centroid_axes(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        w = hi - lo
        return [np.linspace(l - self.inflate * s, h + self.inflate * s, int(n)) if n > 1
                else np.array([(l + h) / 2.0])
                for l, h, s, n in zip(lo, hi, w, self.n_centroids)]

    @property
    def centroids(self) -> np.ndarray:
        axes = self.centroid_axes()
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @property
    def scale(self) -> np.ndarray:
        out = []
        for ax, l, h in zip(self.centroid_axes(), self.lower, self.upper):
            out.append(ax[1] - ax[0] if ax.size > 1 else (h - l) or 1.0)
        return np.asarray(out, dtype=float)

    @property
    def n_basis(self) -> int:
        return int(np.prod(self.n_centroids))

    def eval_points(self) -> np.ndarray:
        return _grid(self.lower, self.upper, self.n_eval)[0]

    def evaluate(self, X):
        """Return ``(G, dG)`` at points ``X`` of shape ``(M, d)``."""
        X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=float)))
        return KERNELS.rbf_matrices(X, np.ascontiguousarray(self.centroids), self.scale, self.eps2)

    def to_dict(self) -> dict:
        return {
            "kind": "rbf",
            "centroid_grid": {"lower": [l - self.inflate * (h - l) for l, h in zip(self.lower, self.upper)],
                              "upper": [h + self.inflate * (h - l) for l, h in zip(self.lower, self.upper)],
                              "counts": list(self.n_centroids)},
            "eval_grid": {"lower": list(self.lower), "upper": list(self.upper),
                          "counts": list(self.n_eval)},
            "epsilon": self.epsilon,
            "neighbour_value": self.neighbour_value,
            "inflate": self.inflate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RbfBasis":
        ev = d["eval_grid"]
        return cls(tuple(ev["lower"]), tuple(ev["upper"]), tuple(d["centroid_grid"]["counts"]),
                   tuple(ev["counts"]), float(d.get("inflate", 0.1)),
                   float(d.get("neighbour_value", math.exp(-float(d["epsilon"]) ** 2))))


def turret_rbf_basis(n_centroids: int = 5, n_eval: int = 25, neighbour_value: float = 0.85) -> RbfBasis:
    """RBF basis on the turret domain ``[0, 1] x [0, pi]``."""
    return RbfBasis((0.0, 0.0), (1.0, math.pi), (n_centroids, n_centroids), (n_eval, n_eval),
                    0.1, neighbour_value)


@dataclass(frozen=True)
class MonomialBasis:
    """Tensor monomials ``prod_k x_k ** p_k`` with total degree ``<= degree``.

    The span is invariant under linear vector fields, which makes it an
    exact test bed for the contour quadrature.
    """

    lower: tuple = (0.0,)
    upper: tuple = (1.0,)
    degree: int = 4
    n_eval: tuple = (25,)

    @property
    def dim(self) -> int:
        return len(self.lower)

    def powers(self) -> np.ndarray:
        grids = np.meshgrid(*[np.arange(self.degree + 1)] * self.dim, indexing="ij")
        P = np.stack([g.ravel() for g in grids], axis=-1)
        P = P[P.sum(1) <= self.degree]
        return P[np.lexsort(P.T[::-1])]

    @property
    def n_basis(self) -> int:
        return int(self.powers().shape[0])

    def eval_points(self) -> np.ndarray:
        return _grid(self.lower, self.upper, self.n_eval)[0]

    def evaluate(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        P = self.powers()
        G = np.prod(X[:, None, :] ** P[None], axis=-1)
        dG = np.empty((self.dim,) + G.shape)
        for k in range(self.dim):
            Pk = P.copy()
            coef = Pk[:, k].astype(float)
            Pk[:, k] = np.maximum(Pk[:, k] - 1, 0)
            dG[k] = coef[None] * np.prod(X[:, None, :] ** Pk[None], axis=-1)
        return G, dG

    def to_dict(self) -> dict:
        return {"kind": "monomial", "lower": list(self.lower), "upper": list(self.upper),
                "degree": self.degree, "n_eval": list(self.n_eval)}


@dataclass
class BasisEvaluation:
    """Value and derivative matrices of a basis on its evaluation grid.

    Attributes
    ----------
    basis : RbfBasis or MonomialBasis
    points : ndarray, shape (M, d)
    G : ndarray, shape (M, nb)
    dG : ndarray, shape (d, M, nb)
    pinv_G : ndarray, shape (nb, M)
    cutoff : float
        Absolute singular-value cutoff used for ``pinv_G``.
    U, s, Vt : ndarray
        Thin SVD of ``G``.
    """

    basis: object
    points: np.ndarray
    G: np.ndarray
    dG: np.ndarray
    pinv_G: np.ndarray
    cutoff: float
    U: np.ndarray = field(repr=False, default=None)
    s: np.ndarray = field(repr=False, default=None)
    Vt: np.ndarray = field(repr=False, default=None)

    @property
    def n_basis(self) -> int:
        return self.G.shape[1]

    def fit(self, values) -> np.ndarray:
        """Least-squares coefficients for samples on the evaluation grid."""
        return self.pinv_G @ np.asarray(values, dtype=float)

    def at(self, X):
        """Basis matrices ``(G, dG)`` at arbitrary points."""
        return self.basis.evaluate(X)


def build_rbf_evaluation(basis, points=None, rcond: float = 1e-10) -> BasisEvaluation:
    """Evaluate ``basis`` on its grid (or on ``points``) and factor it.

    Raises
    ------
    RankDeficientError
        If the numerical rank falls below the number of basis functions.
    """
    X = basis.eval_points() if points is None else np.atleast_2d(np.asarray(points, dtype=float))
    G, dG = basis.evaluate(X)
    if not (np.all(np.isfinite(G)) and np.all(np.isfinite(dG))):
        raise NonFiniteError("basis matrices are not finite")
    U, s, Vt = np.linalg.svd(G, full_matrices=False)
    cutoff = rcond * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > cutoff))
    if rank < G.shape[1]:
        raise RankDeficientError(f"basis matrix has rank {rank} < {G.shape[1]}")
    pinv = (Vt.T / s) @ U.T
    return BasisEvaluation(basis, X, G, dG, pinv, float(cutoff), U, s, Vt)
