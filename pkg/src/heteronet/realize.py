"""Simplex-method vector field realizing a digraph, and its analytic structure.

Node ``j`` sits on the ``j``-th coordinate axis.  The field is

    f_j(x) = x_j * F_j(x),   F_j(x) = 1 + sum_i M[i, j] * x_i**2,
    M[i, j] = (eps + eta) * A[i, j] - eta * (1 - delta_ij) - 1,

so every coordinate hyperplane is invariant and ``f`` commutes with all sign
flips of the coordinates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations
from typing import Callable, Optional, Sequence

import numpy as np

from .digraph import Digraph, GateReport, Vertex, induced_subgraph, realization_gate

__all__ = [
    "RealizationParams",
    "RealizedSystem",
    "EquilibriumInfo",
    "IneligibleGraphError",
    "realize",
    "vector_field",
    "jacobian",
    "node_eigenvalues",
    "out_subspaces",
    "radius_rate_bounds",
    "absorbing_annulus",
    "phi_angle_rate",
    "potential_V",
    "grad_V",
    "hessian_V",
    "separating_equilibria",
    "equivariance_check",
    "newton_refine",
    "known_equilibria",
]

RESIDUAL_TOL = 1e-12


class IneligibleGraphError(ValueError):
    pass


@dataclass(frozen=True)
class RealizationParams:
    epsilon: float = 0.02
    eta: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if not self.eta > 0.0:
            raise ValueError(f"eta must be positive, got {self.eta}")


@dataclass(frozen=True, eq=False)
class RealizedSystem:
    graph: Digraph
    params: RealizationParams = field(default_factory=RealizationParams)
    forced: bool = False

    @property
    def n(self) -> int:
        return self.graph.n

    @cached_property
    def gate(self) -> GateReport:
        return realization_gate(self.graph)

    @property
    def verified(self) -> bool:
        """False when guarantees do not apply (graph realized under override)."""
        return self.gate.eligible

    @cached_property
    def coupling(self) -> np.ndarray:
        eps, eta = self.params.epsilon, self.params.eta
        a = self.graph.adj.astype(float)
        off = 1.0 - np.eye(self.n)
        m = (eps + eta) * a - eta * off - 1.0
        m.setflags(write=False)
        return m

    def __call__(self, x):
        return vector_field(self, x)


def realize(graph: Digraph, params: Optional[RealizationParams] = None, force: bool = False) -> RealizedSystem:
    params = params or RealizationParams()
    gate = realization_gate(graph)
    if not gate.eligible and not force:
        problems = []
        if not gate.transitive:
            problems.append("not transitive")
        if gate.two_cycles:
            problems.append(f"2-cycles {gate.two_cycles}")
        if gate.delta_cliques:
            problems.append(f"delta-cliques {gate.delta_cliques}")
        raise IneligibleGraphError("graph fails the realization gate: " + "; ".join(problems))
    return RealizedSystem(graph, params, forced=not gate.eligible)


def _as_state(sys: RealizedSystem, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != sys.n:
        raise ValueError(f"state has dimension {x.shape[-1]}, system has {sys.n}")
    return x


def vector_field(sys: RealizedSystem, x) -> np.ndarray:
    """Evaluate f at a state or a batch of states (last axis = coordinates)."""
    x = _as_state(sys, x)
    return x * (1.0 + (x * x) @ sys.coupling)


def jacobian(sys: RealizedSystem, x) -> np.ndarray:
    x = _as_state(sys, x)
    if x.ndim != 1:
        raise ValueError("jacobian expects a single state")
    big_f = 1.0 + (x * x) @ sys.coupling
    # d f_j / d x_k = delta_jk F_j + 2 x_j x_k M[k, j]
    return np.diag(big_f) + 2.0 * np.outer(x, x) * sys.coupling.T


@dataclass
class EquilibriumInfo:
    id: str
    location: np.ndarray
    kind: str  # "axis-node" | "separating-node" | "origin"
    support: tuple[int, ...]
    eigenvalues: list[float]
    stability: Optional[str] = None  # separating nodes: type within Omega_j
    parent: Optional[str] = None
    residual: float = 0.0
    unstable_dirs: list[int] = field(default_factory=list)
    method: str = "analytic"

    def to_dict(self, sys: Optional[RealizedSystem] = None) -> dict:
        lab = (lambda i: sys.graph.labels[i]) if sys is not None else (lambda i: i)
        return {
            "id": self.id,
            "kind": self.kind,
            "location": [float(v) for v in self.location],
            "support": [lab(i) for i in self.support],
            "eigenvalues": [float(v) for v in self.eigenvalues],
            "stability": self.stability,
            "parent": self.parent,
            "residual": float(self.residual),
            "unstable_directions": [lab(i) for i in self.unstable_dirs],
            "method": self.method,
        }


def node_eigenvalues(sys: RealizedSystem, j: Vertex) -> EquilibriumInfo:
    """Spectrum at the axis node: -2 radially, eps along O_j, -eta elsewhere."""
    jj = sys.graph.index(j)
    eps, eta = sys.params.epsilon, sys.params.eta
    eig = []
    for k in range(sys.n):
        if k == jj:
            eig.append(-2.0)
        elif sys.graph.adj[jj, k]:
            eig.append(eps)
        else:
            eig.append(-eta)
    loc = np.zeros(sys.n)
    loc[jj] = 1.0
    return EquilibriumInfo(
        id=sys.graph.labels[jj],
        location=loc,
        kind="axis-node",
        support=(jj,),
        eigenvalues=eig,
        stability="saddle" if max(eig) > 0 else "sink",
        residual=float(np.abs(vector_field(sys, loc)).max()),
        unstable_dirs=sys.graph.out_neighbors(jj),
    )


def out_subspaces(sys: RealizedSystem, j: Vertex) -> tuple[list[int], list[int]]:
    """Coordinate index sets of Omega_j (outgoing directions) and Q_j = Omega_j + <xi_j>."""
    jj = sys.graph.index(j)
    omega = sys.graph.out_neighbors(jj)
    return omega, sorted(omega + [jj])


def absorbing_annulus(sys: RealizedSystem) -> tuple[float, float]:
    return 1.0 / (1.0 + sys.params.eta), 1.0 / (1.0 - sys.params.epsilon)


def radius_rate_bounds(sys: RealizedSystem, x) -> tuple[float, float, float]:
    """d|x|^2/dt along the flow with its quadratic sandwich bounds."""
    x = _as_state(sys, x)
    r = float(x @ x)
    rate = 2.0 * float(x @ vector_field(sys, x))
    eps, eta = sys.params.epsilon, sys.params.eta
    return rate, 2.0 * r * (1.0 - r - eta * r), 2.0 * r * (1.0 - r + eps * r)


def _support_check(x: np.ndarray, allowed: Sequence[int], what: str):
    mask = np.ones(x.shape[-1], dtype=bool)
    mask[list(allowed)] = False
    if np.any(np.abs(x[..., mask]) > RESIDUAL_TOL):
        raise ValueError(f"state has mass outside {what}")


def phi_angle_rate(sys: RealizedSystem, j: Vertex, x) -> tuple[float, float]:
    """Angle Phi_j with tan Phi_j = x_j^2 / sum_{O_j} x_i^2 and its closed-form rate."""
    jj = sys.graph.index(j)
    x = _as_state(sys, x)
    omega, q = out_subspaces(sys, jj)
    _support_check(x, q, "Q_j")
    if not np.any(x):
        raise ValueError("Phi_j is undefined at the origin")
    eps, eta = sys.params.epsilon, sys.params.eta
    xj2 = x[jj] ** 2
    xi2 = x[omega] ** 2
    s = float(xi2.sum())
    phi = math.pi / 2 if s == 0.0 else math.atan2(xj2, s)
    rate = -2.0 * xj2 * float(np.sum(xi2 * (eta * xi2 + eps * xj2))) / (s * s + xj2 * xj2)
    return phi, rate


def _omega_coords(sys: RealizedSystem, j: Vertex, x) -> tuple[list[int], np.ndarray]:
    jj = sys.graph.index(j)
    x = _as_state(sys, x)
    omega, _ = out_subspaces(sys, jj)
    _support_check(x, omega, "Omega_j")
    return omega, x[omega]


def potential_V(sys: RealizedSystem, j: Vertex, x) -> float:
    omega, y = _omega_coords(sys, j, x)
    y2 = y * y
    r = float(y2.sum())
    cross = r * r - float(np.sum(y2 * y2))  # sum_k y_k^2 sum_{l != k} y_l^2
    return -0.5 * r + 0.25 * r * r + 0.25 * sys.params.eta * cross


def grad_V(sys: RealizedSystem, j: Vertex, x) -> np.ndarray:
    """Gradient of V_j as a full-length vector (zero off Omega_j)."""
    omega, y = _omega_coords(sys, j, x)
    y2 = y * y
    r = float(y2.sum())
    g = np.zeros(sys.n)
    g[omega] = y * (r - 1.0) + sys.params.eta * y * (r - y2)
    return g


def hessian_V(sys: RealizedSystem, j: Vertex, x) -> np.ndarray:
    """Hessian of V_j over the Omega_j coordinates (ordered as out_subspaces)."""
    omega, y = _omega_coords(sys, j, x)
    eta = sys.params.eta
    y2 = y * y
    r = float(y2.sum())
    h = 2.0 * (1.0 + eta) * np.outer(y, y)
    np.fill_diagonal(h, -1.0 + r + 2.0 * y2 + eta * (r - y2))
    return h


def newton_refine(sys: RealizedSystem, x0, support: Sequence[int], tol: float = RESIDUAL_TOL, max_iter: int = 50) -> np.ndarray:
    """Newton iteration for an equilibrium with the given coordinate support.

    Only the supported coordinates move; the rest are pinned at zero, which is
    exact because coordinate subspaces are invariant.
    """
    support = list(support)
    x = np.zeros(sys.n)
    x[support] = np.asarray(x0, dtype=float)[support]
    for _ in range(max_iter):
        f = vector_field(sys, x)
        if np.abs(f).max() < tol * 1e-2:
            break
        jac = jacobian(sys, x)[np.ix_(support, support)]
        try:
            step = np.linalg.solve(jac, f[support])
        except np.linalg.LinAlgError:
            break
        x[support] -= step
        if np.abs(step).max() < 1e-16:
            break
    return x


def _classify_hessian(h: np.ndarray) -> str:
    w = np.linalg.eigvalsh(h)
    if np.all(w > 0):
        return "minimum"
    if np.all(w < 0):
        return "repeller"
    return "saddle"


def _separating_info(sys: RealizedSystem, jj: int, loc: np.ndarray, method: str) -> EquilibriumInfo:
    support = tuple(int(i) for i in np.flatnonzero(loc))
    labels = sys.graph.labels
    jac_eigs = np.sort(np.linalg.eigvals(jacobian(sys, loc)).real)
    big_f = 1.0 + (loc * loc) @ sys.coupling
    unstable = [k for k in range(sys.n) if k not in support and big_f[k] > 0]
    return EquilibriumInfo(
        id=f"{labels[jj]}:{{{','.join(labels[i] for i in support)}}}",
        location=loc,
        kind="separating-node",
        support=support,
        eigenvalues=[float(v) for v in jac_eigs],
        stability=_classify_hessian(hessian_V(sys, jj, loc)) if method == "closed-form" else _classify_jac(sys, jj, loc),
        parent=labels[jj],
        residual=float(np.abs(vector_field(sys, loc)).max()),
        unstable_dirs=unstable,
        method=method,
    )


def _classify_jac(sys: RealizedSystem, jj: int, loc: np.ndarray) -> str:
    omega, _ = out_subspaces(sys, jj)
    w = np.linalg.eigvals(jacobian(sys, loc)[np.ix_(omega, omega)]).real
    if np.all(w < 0):
        return "minimum"
    if np.all(w > 0):
        return "repeller"
    return "saddle"


def _numeric_equilibria_in_omega(sys: RealizedSystem, jj: int, starts: int = 200, seed: int = 0) -> list[np.ndarray]:
    """Multistart Newton for equilibria of f inside Omega_j with support size >= 2."""
    omega, _ = out_subspaces(sys, jj)
    rng = np.random.default_rng(seed)
    found: list[np.ndarray] = []
    for size in range(2, len(omega) + 1):
        for sub in combinations(omega, size):
            for _ in range(max(4, starts // max(1, len(omega)))):
                x0 = np.zeros(sys.n)
                x0[list(sub)] = rng.uniform(0.2, 1.0, size)
                x = np.abs(newton_refine(sys, x0, sub))
                if np.abs(vector_field(sys, x)).max() > RESIDUAL_TOL:
                    continue
                if np.count_nonzero(x > 1e-8) != size or not np.all(np.isfinite(x)):
                    continue
                if not any(np.abs(x - y).max() < 1e-8 for y in found):
                    found.append(x)
    return found


def separating_equilibria(sys: RealizedSystem, j: Vertex) -> list[EquilibriumInfo]:
    """Additional equilibria inside Omega_j (positive-orthant representatives).

    When the graph induced on O_j is edgeless the restricted dynamics are
    symmetric and each subset T of O_j with |T| >= 2 carries the equilibrium
    x_i^2 = 1 / (|T| + eta (|T| - 1)).  Otherwise a multistart Newton search
    is used and the entries are flagged ``numeric``.
    """
    jj = sys.graph.index(j)
    omega, _ = out_subspaces(sys, jj)
    if len(omega) < 2:
        return []
    eta = sys.params.eta
    if induced_subgraph(sys.graph, omega).adj.any():
        return [_separating_info(sys, jj, x, "numeric") for x in _numeric_equilibria_in_omega(sys, jj)]
    out = []
    for size in range(2, len(omega) + 1):
        c = math.sqrt(1.0 / (size + eta * (size - 1)))
        for sub in combinations(omega, size):
            x0 = np.zeros(sys.n)
            x0[list(sub)] = c
            x = newton_refine(sys, x0, sub)
            out.append(_separating_info(sys, jj, x, "closed-form"))
    return out


def known_equilibria(sys: RealizedSystem) -> list[EquilibriumInfo]:
    """Axis nodes, separating nodes of every Omega_j, and the origin.

    Cached on the system; every entry is a positive-orthant representative.
    """
    cache = sys.__dict__.get("_known_equilibria")
    if cache is not None:
        return cache
    eqs = [node_eigenvalues(sys, j) for j in range(sys.n)]
    seen: list[np.ndarray] = []
    for j in range(sys.n):
        for info in separating_equilibria(sys, j):
            if any(np.abs(info.location - s).max() < 1e-9 for s in seen):
                continue
            seen.append(info.location)
            eqs.append(info)
    eqs.append(
        EquilibriumInfo(
            id="origin",
            location=np.zeros(sys.n),
            kind="origin",
            support=(),
            eigenvalues=[1.0] * sys.n,
            stability="repeller",
            unstable_dirs=list(range(sys.n)),
        )
    )
    object.__setattr__(sys, "_known_equilibria", eqs)
    return eqs


def equivariance_check(sys: RealizedSystem, x, signs, field: Optional[Callable] = None) -> bool:
    """Exact test of f(s * x) == s * f(x) for a sign vector s."""
    x = _as_state(sys, x)
    s = np.asarray(signs, dtype=float)
    if s.shape != x.shape[-1:] or not np.all(np.abs(s) == 1.0):
        raise ValueError("signs must be a vector of +-1 matching the state dimension")
    f = field if field is not None else (lambda y: vector_field(sys, y))
    return bool(np.array_equal(f(s * x), s * f(x)))
