"""Unstable-manifold sampling, the Markov switching process, and node classification.

The measure on each unstable manifold is the uniform measure on the local
unstable sphere of radius ``delta`` around the node, pushed forward by the
flow.  Connection sets that are lower dimensional than the unstable manifold
receive zero mass under this measure; that is how equability shows up in
the estimates.
"""
from __future__ import annotations

import hashlib
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .digraph import Digraph, Vertex, splitting_vertices, strongly_connected_components
from .integrate import IntegratorConfig, Trajectory, integrate_ode, integrate_ode_batch, rk4_step
from .realize import (
    RealizedSystem,
    jacobian,
    known_equilibria,
    newton_refine,
    out_subspaces,
    separating_equilibria,
    vector_field,
)

__all__ = [
    "ESCAPE",
    "UNRESOLVED",
    "Thresholds",
    "Itinerary",
    "TransitionEstimate",
    "NodeClassification",
    "SwitchingChain",
    "ChainAssemblyError",
    "derive_seed",
    "markov_config",
    "sample_unstable_sphere",
    "omega_node",
    "extract_itinerary",
    "estimate_transitions",
    "build_switching_chain",
    "simulate_chain",
    "equable_core",
    "classify_node",
    "separatrix_refine",
    "SeparatrixResult",
]

ESCAPE = "escape"
UNRESOLVED = "unresolved"


def derive_seed(master: int, *keys) -> int:
    """Stable 63-bit seed from a master seed and task keys."""
    text = ":".join([str(int(master))] + [str(k) for k in keys])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big") >> 1


def markov_config() -> IntegratorConfig:
    """Integrator defaults for basin decisions: RK4 at h=0.1, well inside its stability range."""
    return IntegratorConfig(step=0.1, max_time=5000.0)


@dataclass(frozen=True)
class Thresholds:
    p_min: float = 0.01
    eps_escape: float = 0.005
    r_excl: float = 0.1
    max_unresolved: float = 0.01

    def to_dict(self) -> dict:
        return {
            "p_min": self.p_min,
            "eps_escape": self.eps_escape,
            "r_excl": self.r_excl,
            "max_unresolved": self.max_unresolved,
        }


def sample_unstable_sphere(sys: RealizedSystem, j: Vertex, delta: float = 1e-3, m: int = 1, seed: int = 0) -> np.ndarray:
    """``m`` points xi_j + delta * u with u uniform on the unit sphere of the O_j coordinates.

    A one-dimensional unstable space has a 0-sphere; its two points alternate.
    """
    jj = sys.graph.index(j)
    omega, _ = out_subspaces(sys, jj)
    if not omega:
        raise ValueError(f"node {sys.graph.labels[jj]} has no unstable directions")
    pts = np.zeros((m, sys.n))
    pts[:, jj] = 1.0
    if len(omega) == 1:
        pts[:, omega[0]] = delta * np.where(np.arange(m) % 2 == 0, 1.0, -1.0)
        return pts
    g = np.random.default_rng(seed).standard_normal((m, len(omega)))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    pts[:, omega] = delta * g
    return pts


def _node_ids(sys: RealizedSystem) -> set[str]:
    return set(sys.graph.labels)


def _separating_ids(sys: RealizedSystem) -> set[str]:
    return {eq.id for eq in known_equilibria(sys) if eq.kind == "separating-node"}


def _resolve(sys: RealizedSystem, terminal: str, node: Optional[str]) -> str:
    if terminal == "left-domain":
        return ESCAPE
    if terminal != "converged":
        return UNRESOLVED
    if node in _node_ids(sys) or node in _separating_ids(sys):
        return node
    return ESCAPE


def omega_node(sys: RealizedSystem, x0, cfg: Optional[IntegratorConfig] = None) -> str:
    """Label of the equilibrium the ODE trajectory from ``x0`` settles on.

    Returns a node label, a separating-node id, ``escape`` (blow-up or an
    equilibrium outside the known set) or ``unresolved`` (no convergence
    within ``max_time``).
    """
    traj = integrate_ode(sys, x0, cfg or markov_config(), record_every=10**9)
    return _resolve(sys, traj.terminal, traj.node)


@dataclass
class Itinerary:
    entries: list[tuple[str, float]]
    terminal: str

    @property
    def nodes(self) -> list[str]:
        return [e[0] for e in self.entries]


def extract_itinerary(sys: RealizedSystem, traj: Trajectory, radius: float = 0.05, terminal: Optional[str] = None) -> Itinerary:
    """Successive node visits (entries into the radius ball around +-xi_k)."""
    ax = np.abs(traj.states)
    r = np.einsum("ij,ij->i", ax, ax)
    d = np.sqrt(np.maximum(r[:, None] - 2.0 * ax + 1.0, 0.0))
    near = d < radius
    entries: list[tuple[str, float]] = []
    for t, row in zip(traj.times, near):
        hit = np.flatnonzero(row)
        if hit.size:
            lab = sys.graph.labels[int(hit[0])]
            if not entries or entries[-1][0] != lab:
                entries.append((lab, float(t)))
    if terminal is None:
        if traj.terminal == "left-domain":
            terminal = ESCAPE
        elif traj.terminal == "converged" and traj.node:
            terminal = traj.node
        else:
            terminal = UNRESOLVED
    return Itinerary(entries, terminal)


@dataclass
class TransitionEstimate:
    source: str
    counts: dict[str, int]
    escape_count: int
    unresolved_count: int
    total: int
    clearance: dict[str, float] = field(default_factory=dict)
    boundary_count: int = 0  # samples that settled on a separating node (part of unresolved)
    delta: float = 1e-3
    seed: int = 0

    def fraction(self, target: str) -> float:
        return self.counts.get(target, 0) / self.total if self.total else 0.0

    @property
    def probabilities(self) -> dict[str, float]:
        """Shares over targets and escape, normalised by resolved samples."""
        resolved = self.total - self.unresolved_count
        if resolved <= 0:
            return {}
        p = {k: c / resolved for k, c in sorted(self.counts.items())}
        p[ESCAPE] = self.escape_count / resolved
        return p

    @property
    def stderr(self) -> dict[str, float]:
        resolved = self.total - self.unresolved_count
        return {k: math.sqrt(v * (1 - v) / resolved) if resolved else float("nan") for k, v in self.probabilities.items()}

    @property
    def lost_fraction(self) -> float:
        return (self.escape_count + self.unresolved_count) / self.total if self.total else 1.0

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "total": self.total,
            "counts": dict(sorted(self.counts.items())),
            "escape_count": self.escape_count,
            "unresolved_count": self.unresolved_count,
            "boundary_count": self.boundary_count,
            "probabilities": self.probabilities,
            "stderr": self.stderr,
            "clearance": {k: float(v) for k, v in sorted(self.clearance.items())},
            "delta": self.delta,
            "seed": self.seed,
        }


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("HETERONET_THREADS", "1")))
    except ValueError:
        return 1


def estimate_transitions(
    sys: RealizedSystem,
    j: Vertex,
    m: int = 1000,
    cfg: Optional[IntegratorConfig] = None,
    seed: int = 0,
    delta: float = 1e-3,
    batch: int = 2500,
) -> TransitionEstimate:
    """Monte-Carlo pushforward of the unstable-sphere measure at xi_j.

    Samples are split into fixed index batches, so the counts do not depend
    on the number of worker threads (``HETERONET_THREADS``).
    """
    cfg = cfg or markov_config()
    jj = sys.graph.index(j)
    src = sys.graph.labels[jj]
    pts = sample_unstable_sphere(sys, jj, delta, m, derive_seed(seed, "sphere", src))
    omega, _ = out_subspaces(sys, jj)

    if len(omega) == 1:
        # the 0-sphere has two points; integrate each once
        uniq, inverse = np.unique(pts, axis=0, return_inverse=True)
        res = integrate_ode_batch(sys, uniq, cfg)
        inverse = np.asarray(inverse).reshape(-1)
        terminal = [res.terminal[i] for i in inverse]
        node = [res.node[i] for i in inverse]
        mind = res.min_node_dist[inverse]
    else:
        chunks = [pts[i : i + batch] for i in range(0, m, batch)]
        with ThreadPoolExecutor(max_workers=_threads()) as pool:
            results = list(pool.map(lambda c: integrate_ode_batch(sys, c, cfg), chunks))
        terminal = [t for r in results for t in r.terminal]
        node = [v for r in results for v in r.node]
        mind = np.concatenate([r.min_node_dist for r in results])

    counts: dict[str, int] = {}
    escape = unresolved = boundary = 0
    clearance: dict[str, float] = {}
    labels = sys.graph.labels
    nodes = _node_ids(sys)
    for i, (t, v) in enumerate(zip(terminal, node)):
        out = _resolve(sys, t, v)
        if out == ESCAPE:
            escape += 1
        elif out in nodes:
            counts[out] = counts.get(out, 0) + 1
            kk = labels.index(out)
            others = [q for q in range(sys.n) if q not in (jj, kk)]
            c = float(mind[i, others].min()) if others else math.inf
            clearance[out] = min(clearance.get(out, math.inf), c)
        else:
            # unresolved, or parked on a separating node (a basin boundary)
            unresolved += 1
            boundary += out != UNRESOLVED
    return TransitionEstimate(src, counts, escape, unresolved, m, clearance, boundary, delta, seed)


class ChainAssemblyError(RuntimeError):
    pass


@dataclass
class SwitchingChain:
    states: list[str]
    matrix: np.ndarray

    def row(self, state: str) -> dict[str, float]:
        i = self.states.index(state)
        return {s: float(p) for s, p in zip(self.states, self.matrix[i]) if p > 0}


def build_switching_chain(sys: RealizedSystem, estimates: dict[str, TransitionEstimate], max_unresolved: float = 0.01) -> SwitchingChain:
    """Row-stochastic matrix over the nodes plus an absorbing escape state."""
    labels = list(sys.graph.labels)
    bad = [s for s in labels if s not in estimates]
    if bad:
        raise ChainAssemblyError(f"missing estimates for nodes {bad}")
    for s in labels:
        est = estimates[s]
        if est.unresolved_count / est.total > max_unresolved:
            raise ChainAssemblyError(
                f"node {s}: unresolved fraction {est.unresolved_count / est.total:.4f} exceeds {max_unresolved}"
            )
    states = labels + [ESCAPE]
    mat = np.zeros((len(states), len(states)))
    for i, s in enumerate(labels):
        probs = estimates[s].probabilities
        for k, p in probs.items():
            mat[i, states.index(k)] = p
        mat[i] /= mat[i].sum()
    mat[-1, -1] = 1.0
    return SwitchingChain(states, mat)


def simulate_chain(chain: SwitchingChain, start: str, steps: int, seed: int = 0) -> list[str]:
    """A realization of length ``steps`` starting at ``start``."""
    rng = np.random.default_rng(seed)
    i = chain.states.index(start)
    out = [chain.states[i]]
    cum = np.cumsum(chain.matrix, axis=1)
    for _ in range(steps - 1):
        i = int(min(np.searchsorted(cum[i], rng.random(), side="right"), len(chain.states) - 1))
        out.append(chain.states[i])
    return out


def equable_core(sys: RealizedSystem, estimates: dict[str, TransitionEstimate], p_min: float = 0.01) -> Digraph:
    """Graph of the transitions seen with share >= p_min, cut down to its recurrent class.

    The recurrent class is the largest closed strongly connected component;
    a component from which escape carries share >= p_min is not closed.
    """
    labels = sys.graph.labels
    adj = np.zeros((sys.n, sys.n), dtype=bool)
    leaks = np.zeros(sys.n, dtype=bool)
    for i, s in enumerate(labels):
        est = estimates[s]
        for k, c in est.counts.items():
            if c / est.total >= p_min:
                adj[i, labels.index(k)] = True
        if est.escape_count / est.total >= p_min:
            leaks[i] = True
    kept = Digraph(adj, labels)
    closed = []
    for comp in strongly_connected_components(kept):
        members = set(comp)
        exits = any(adj[i, k] for i in comp for k in range(sys.n) if k not in members)
        if exits or leaks[comp].any():
            continue
        if len(comp) == 1 and not adj[comp[0]].any():
            continue
        closed.append(comp)
    if not closed:
        raise ValueError("no recurrent class: all mass escapes")
    best = max(closed, key=lambda c: (len(c), [-i for i in c]))
    return Digraph(adj[np.ix_(best, best)], tuple(labels[i] for i in best))


@dataclass
class NodeClassification:
    node: str
    unstable_dim: int
    almost_complete: bool
    escape_fraction: float
    equable: bool
    fractions: dict[str, float]
    exclusive: bool
    clearance: float
    splitting_order: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "node": self.node,
            "unstable_dim": self.unstable_dim,
            "almost_complete": self.almost_complete,
            "escape_fraction": self.escape_fraction,
            "equable": self.equable,
            "fractions": dict(sorted(self.fractions.items())),
            "exclusive": self.exclusive,
            "clearance": self.clearance,
            "splitting_order": self.splitting_order,
        }


def classify_node(sys: RealizedSystem, j: Vertex, estimate: TransitionEstimate, thresholds: Thresholds = Thresholds()) -> NodeClassification:
    """Sampled verdicts for almost completeness, equability and exclusivity.

    Equability is read as: every connection the graph prescribes out of the
    node, and every target actually reached, carries share >= p_min.  A
    prescribed connection with zero share is lower dimensional than the rest.
    """
    jj = sys.graph.index(j)
    lab = sys.graph.labels[jj]
    omega, _ = out_subspaces(sys, jj)
    targets = {sys.graph.labels[k] for k in omega} | set(estimate.counts)
    fractions = {k: estimate.fraction(k) for k in sorted(targets)}
    lost = estimate.lost_fraction
    reached = [k for k, c in estimate.counts.items() if c > 0]
    clearance = min((estimate.clearance.get(k, math.inf) for k in reached), default=math.inf)
    return NodeClassification(
        node=lab,
        unstable_dim=len(omega),
        almost_complete=lost <= thresholds.eps_escape,
        escape_fraction=lost,
        equable=all(f >= thresholds.p_min for f in fractions.values()),
        fractions=fractions,
        exclusive=bool(reached) and clearance > thresholds.r_excl,
        clearance=clearance,
        splitting_order=splitting_vertices(sys.graph).get(lab),
    )


@dataclass
class SeparatrixResult:
    direction: np.ndarray  # unit vector in the O_j coordinates (full length)
    angle_width: float
    limit_point: np.ndarray
    closest_approach: float
    matched: str
    match_distance: float


def _slerp(a: np.ndarray, b: np.ndarray, s: np.ndarray) -> np.ndarray:
    omega = math.acos(max(-1.0, min(1.0, float(a @ b))))
    if omega < 1e-15:
        return np.repeat(a[None, :], len(s), axis=0)
    s = np.asarray(s)[:, None]
    return (np.sin((1 - s) * omega) * a + np.sin(s * omega) * b) / math.sin(omega)


def _basins(sys: RealizedSystem, jj: int, dirs: np.ndarray, delta: float, targets: tuple[int, int], cfg: IntegratorConfig) -> np.ndarray:
    """+1 / -1 / 0 for rows reaching target a / target b / neither.

    A row is decided once it enters the node_radius ball of either target:
    both are sinks inside Q_j, and the ball lies well inside their basins.
    """
    x = np.zeros((len(dirs), sys.n))
    x[:, jj] = 1.0
    x += delta * dirs
    a, b = targets
    out = np.zeros(len(dirs), dtype=int)
    active = np.arange(len(dirs))
    r2 = cfg.node_radius**2
    for _ in range(cfg.n_steps):
        if active.size == 0:
            break
        x = rk4_step(sys, x, cfg.step)
        ax = np.abs(x)
        r = np.einsum("ij,ij->i", ax, ax)
        da = r - 2 * ax[:, a] + 1
        db = r - 2 * ax[:, b] + 1
        hit_a, hit_b = da < r2, db < r2
        done = hit_a | hit_b
        if done.any():
            out[active[hit_a]] = 1
            out[active[hit_b & ~hit_a]] = -1
            active, x = active[~done], x[~done]
    return out


def separatrix_refine(
    sys: RealizedSystem,
    j: Vertex,
    target_a: Vertex,
    target_b: Vertex,
    cfg: Optional[IntegratorConfig] = None,
    delta: float = 1e-3,
    angle_tol: float = 1e-10,
    dir_a=None,
    dir_b=None,
    probes: int = 64,
) -> SeparatrixResult:
    """Bisect the unstable sphere of xi_j for the boundary between two basins.

    Each round probes ``probes`` points on the great-circle arc between the
    current endpoints.  The trajectory from the final boundary direction
    lingers at the separating node; its closest approach seeds a Newton
    solve, and the result is matched against ``separating_equilibria``.
    """
    cfg = cfg or markov_config()
    jj = sys.graph.index(j)
    a, b = sys.graph.index(target_a), sys.graph.index(target_b)
    omega, _ = out_subspaces(sys, jj)
    if a not in omega or b not in omega:
        raise ValueError("both targets must be out-neighbours of the source")

    def unit(v, default):
        u = np.zeros(sys.n)
        if v is None:
            u[default] = 1.0
        else:
            u[:] = np.asarray(v, dtype=float)
        u[jj] = 0.0
        return u / np.linalg.norm(u)

    if dir_a is None and dir_b is None:
        # start near the two target axes inside the plane they span
        ua = unit(None, a) * math.cos(math.pi / 8) + unit(None, b) * math.sin(math.pi / 8)
        ub = unit(None, b) * math.cos(math.pi / 8) + unit(None, a) * math.sin(math.pi / 8)
    else:
        ua, ub = unit(dir_a, a), unit(dir_b, b)
    ends = _basins(sys, jj, np.stack([ua, ub]), delta, (a, b), cfg)
    if ends[0] != 1 or ends[1] != -1:
        raise ValueError("bisection endpoints do not reach the two targets")

    width = math.acos(max(-1.0, min(1.0, float(ua @ ub))))
    while width > angle_tol:
        s = np.linspace(0.0, 1.0, probes + 2)[1:-1]
        dirs = _slerp(ua, ub, s)
        lab = _basins(sys, jj, dirs, delta, (a, b), cfg)
        if np.any(lab == 0):
            raise ValueError("a probe reached neither target")
        # last probe still in basin a, first probe in basin b
        ia = np.flatnonzero(lab == 1)
        ib = np.flatnonzero(lab == -1)
        lo = ia.max() if ia.size else -1
        hi = ib.min() if ib.size else probes
        if hi != lo + 1:
            raise ValueError("basins interleave along the arc")
        new_a = ua if lo < 0 else dirs[lo]
        new_b = ub if hi >= probes else dirs[hi]
        ua, ub = new_a, new_b
        width = math.acos(max(-1.0, min(1.0, float(ua @ ub))))
    mid = ua + ub
    mid /= np.linalg.norm(mid)

    x0 = np.zeros(sys.n)
    x0[jj] = 1.0
    x0 += delta * mid
    best_x, best_f = x0, np.inf
    x = x0
    for _ in range(cfg.n_steps):
        x = rk4_step(sys, x, cfg.step)
        fn = float(np.linalg.norm(vector_field(sys, x)))
        if fn < best_f and abs(x[jj]) < 0.5:
            best_x, best_f = x.copy(), fn
        ax = np.abs(x)
        if min(np.linalg.norm(ax - np.eye(sys.n)[a]), np.linalg.norm(ax - np.eye(sys.n)[b])) < cfg.node_radius:
            break
    support = [k for k in omega if abs(best_x[k]) > 1e-3]
    limit = np.abs(newton_refine(sys, np.abs(best_x), support))
    cands = separating_equilibria(sys, jj)
    if not cands:
        raise ValueError("no separating node known for this source")
    dists = [float(np.linalg.norm(limit - c.location)) for c in cands]
    k = int(np.argmin(dists))
    if dists[k] > 1e-6:
        raise ValueError(f"limit point matches no separating node (closest at {dists[k]:.3g})")
    return SeparatrixResult(
        direction=mid,
        angle_width=width,
        limit_point=limit,
        closest_approach=float(np.linalg.norm(np.abs(best_x) - cands[k].location)),
        matched=cands[k].id,
        match_distance=dists[k],
    )
