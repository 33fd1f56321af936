"""Fixed-step ODE (RK4) and SDE (stochastic Heun) integration.

Both integrators work on batches internally: a state array has shape
``(m, n)`` and rows evolve independently.  Single-trajectory entry points
wrap the batch kernels.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

from .realize import RealizedSystem, absorbing_annulus, known_equilibria, vector_field

__all__ = [
    "IntegratorConfig",
    "NoiseConfig",
    "Trajectory",
    "BatchResult",
    "NonFiniteStateError",
    "rk4_step",
    "heun_step",
    "integrate_ode",
    "integrate_ode_batch",
    "integrate_sde",
    "sde_chunks",
    "section_crossings",
    "parse_predicate",
    "match_equilibrium",
]


class NonFiniteStateError(FloatingPointError):
    def __init__(self, step: int, row: int = 0):
        super().__init__(f"non-finite state at step {step} (trajectory {row})")
        self.step = step
        self.row = row


@dataclass(frozen=True)
class IntegratorConfig:
    step: float = 0.01
    max_time: float = 5000.0
    convergence_tol: float = 1e-9
    node_radius: float = 0.05

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("step must be positive")
        if not self.max_time >= self.step:
            raise ValueError("max_time must be at least one step")
        if not self.node_radius > self.convergence_tol > 0:
            raise ValueError("need node_radius > convergence_tol > 0")

    @property
    def n_steps(self) -> int:
        return int(round(self.max_time / self.step))


@dataclass(frozen=True)
class NoiseConfig:
    alpha: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ValueError("noise amplitude must be non-negative")


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    terminal: str  # "converged" | "max-time" | "left-domain"
    node: Optional[str] = None
    step: float = 0.0

    def __len__(self):
        return len(self.times)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def rk4_step(sys: RealizedSystem, x: np.ndarray, h: float, k1: Optional[np.ndarray] = None) -> np.ndarray:
    if k1 is None:
        k1 = vector_field(sys, x)
    k2 = vector_field(sys, x + (0.5 * h) * k1)
    k3 = vector_field(sys, x + (0.5 * h) * k2)
    k4 = vector_field(sys, x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def heun_step(sys: RealizedSystem, x: np.ndarray, h: float, noise: Union[np.ndarray, float] = 0.0) -> np.ndarray:
    """One stochastic Heun step; ``noise`` is alpha * dW shared by predictor and corrector."""
    f0 = vector_field(sys, x)
    pred = x + h * f0 + noise
    return x + (0.5 * h) * (f0 + vector_field(sys, pred)) + noise


def match_equilibrium(sys: RealizedSystem, x: np.ndarray, radius: float):
    """Nearest known equilibrium (up to coordinate signs) within ``radius``, else None."""
    ax = np.abs(x)
    best, best_d = None, radius
    for eq in known_equilibria(sys):
        d = float(np.linalg.norm(ax - eq.location))
        if d < best_d:
            best, best_d = eq, d
    return best


def _escape_radius2(sys: RealizedSystem) -> float:
    return (10.0 * absorbing_annulus(sys)[1]) ** 2


def integrate_ode(sys: RealizedSystem, x0, cfg: IntegratorConfig = IntegratorConfig(), record_every: int = 1) -> Trajectory:
    """RK4 from ``x0`` until convergence to a known equilibrium, max_time, or blow-up."""
    x = np.array(x0, dtype=float)
    if x.shape != (sys.n,) or not np.all(np.isfinite(x)):
        raise ValueError("x0 must be a finite state vector of the system dimension")
    h = cfg.step
    esc2 = _escape_radius2(sys)
    times, states = [0.0], [x.copy()]
    terminal, node = "max-time", None
    k_end = cfg.n_steps
    for k in range(cfg.n_steps):
        f = vector_field(sys, x)
        if np.linalg.norm(f) < cfg.convergence_tol:
            eq = match_equilibrium(sys, x, cfg.node_radius)
            terminal, node = "converged", (eq.id if eq is not None else "unknown")
            k_end = k
            break
        x = rk4_step(sys, x, h, f)
        if not np.all(np.isfinite(x)):
            raise NonFiniteStateError(k + 1)
        if (k + 1) % record_every == 0:
            times.append((k + 1) * h)
            states.append(x.copy())
        if x @ x > esc2:
            terminal = "left-domain"
            k_end = k + 1
            break
    if k_end % record_every and k_end > 0:
        times.append(k_end * h)
        states.append(x.copy())
    return Trajectory(np.array(times), np.array(states), terminal, node, h)


@dataclass
class BatchResult:
    final: np.ndarray
    terminal: list[str]
    node: list[Optional[str]]
    time: np.ndarray
    min_node_dist: np.ndarray  # (m, n) running min distance to each axis node, sign-merged


def integrate_ode_batch(sys: RealizedSystem, x0, cfg: IntegratorConfig = IntegratorConfig(), track_every: int = 1) -> BatchResult:
    """RK4 on many initial conditions at once; finished rows are dropped from the working set.

    Besides the endpoint, records for each row the smallest distance the
    trajectory came to every axis node +-xi_k (sampled every ``track_every``
    steps).
    """
    x0 = np.array(x0, dtype=float)
    m, n = x0.shape
    h = cfg.step
    esc2 = _escape_radius2(sys)
    final = x0.copy()
    terminal = ["max-time"] * m
    node: list[Optional[str]] = [None] * m
    tend = np.full(m, cfg.n_steps * h)
    mind = np.full((m, n), np.inf)

    idx = np.arange(m)
    x = x0.copy()
    tol2 = cfg.convergence_tol ** 2

    def track(rows, xs):
        r = np.einsum("ij,ij->i", xs, xs)
        d2 = r[:, None] - 2.0 * np.abs(xs) + 1.0
        mind[rows] = np.minimum(mind[rows], np.sqrt(np.maximum(d2, 0.0)))

    track(idx, x)
    for k in range(cfg.n_steps):
        if idx.size == 0:
            break
        f = vector_field(sys, x)
        done = np.einsum("ij,ij->i", f, f) < tol2
        if done.any():
            for r in np.flatnonzero(done):
                row = idx[r]
                eq = match_equilibrium(sys, x[r], cfg.node_radius)
                terminal[row] = "converged"
                node[row] = eq.id if eq is not None else "unknown"
                final[row] = x[r]
                tend[row] = k * h
            keep = ~done
            idx, x, f = idx[keep], x[keep], f[keep]
            if idx.size == 0:
                break
        x = rk4_step(sys, x, h, f)
        bad = ~np.all(np.isfinite(x), axis=1)
        if bad.any():
            raise NonFiniteStateError(k + 1, int(idx[np.flatnonzero(bad)[0]]))
        if (k + 1) % track_every == 0:
            track(idx, x)
        out = np.einsum("ij,ij->i", x, x) > esc2
        if out.any():
            for r in np.flatnonzero(out):
                row = idx[r]
                terminal[row] = "left-domain"
                final[row] = x[r]
                tend[row] = (k + 1) * h
            idx, x = idx[~out], x[~out]
    final[idx] = x
    return BatchResult(final, terminal, node, tend, mind)


def sde_chunks(
    sys: RealizedSystem,
    x0,
    step: float,
    n_steps: int,
    alphas: Sequence[float],
    seeds: Sequence[int],
    chunk: int = 4096,
) -> Iterator[tuple[int, np.ndarray]]:
    """Stream a batch of stochastic Heun trajectories.

    Row ``i`` uses amplitude ``alphas[i]`` and its own generator seeded with
    ``seeds[i]`` (PCG64, ziggurat normals).  Yields ``(k0, block)`` where
    ``block[s]`` is the batch state after step ``k0 + s + 1``.  Rows whose
    norm exceeds the escape radius are frozen at NaN.
    """
    x = np.array(x0, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    m, n = x.shape
    alphas = np.asarray(alphas, dtype=float).reshape(m, 1)
    rngs = [np.random.default_rng(int(s)) for s in seeds]
    if len(rngs) != m:
        raise ValueError("one seed per trajectory required")
    sq = math.sqrt(step)
    esc2 = _escape_radius2(sys)
    cm = sys.coupling
    half = 0.5 * step
    alive = np.ones(m, dtype=bool)
    k0 = 0
    while k0 < n_steps:
        c = min(chunk, n_steps - k0)
        noise = alphas * (np.stack([g.standard_normal((c, n)) for g in rngs], axis=1) * sq)
        block = np.empty((c, m, n))
        # same arithmetic as heun_step, inlined: this loop dominates long runs
        with np.errstate(over="ignore", invalid="ignore"):
            for s in range(c):
                nz = noise[s]
                f0 = x * (1.0 + (x * x) @ cm)
                pred = x + step * f0 + nz
                x = x + half * (f0 + pred * (1.0 + (pred * pred) @ cm)) + nz
                block[s] = x
        # escape bookkeeping once per chunk: the escaping state itself is
        # emitted, the row is NaN from the next step on
        norms = np.einsum("smi,smi->sm", block, block)
        for row in np.flatnonzero(alive):
            over = np.flatnonzero(~(norms[:, row] <= esc2))
            if over.size == 0:
                continue
            first = over[0]
            if not np.all(np.isfinite(block[first, row])):
                raise NonFiniteStateError(k0 + first + 1, int(row))
            block[first + 1 :, row] = np.nan
            alive[row] = False
        x = block[-1].copy()
        yield k0, block
        k0 += c


def integrate_sde(
    sys: RealizedSystem,
    x0,
    cfg: IntegratorConfig = IntegratorConfig(step=0.2),
    noise: NoiseConfig = NoiseConfig(),
    record_every: int = 1,
) -> Trajectory:
    """dx = f(x) dt + alpha dW by the stochastic Heun scheme, fixed step, seeded."""
    x = np.array(x0, dtype=float)
    if x.shape != (sys.n,) or not np.all(np.isfinite(x)):
        raise ValueError("x0 must be a finite state vector of the system dimension")
    h = cfg.step
    times, states = [0.0], [x.copy()]
    terminal = "max-time"
    esc2 = _escape_radius2(sys)
    for k0, block in sde_chunks(sys, x, h, cfg.n_steps, [noise.alpha], [noise.seed]):
        rows = block[:, 0, :]
        norms = np.einsum("ij,ij->i", rows, rows)
        out = np.flatnonzero(~(norms <= esc2))
        stop = out[0] + 1 if out.size else len(rows)
        for s in range(stop):
            k = k0 + s + 1
            if k % record_every == 0 or (out.size and s == stop - 1):
                times.append(k * h)
                states.append(rows[s].copy())
        if out.size:
            terminal = "left-domain"
            break
    if terminal == "max-time" and cfg.n_steps % record_every:
        times.append(cfg.n_steps * h)
        states.append(rows[-1].copy())
    return Trajectory(np.array(times), np.array(states), terminal, None, h)


_PRED_RE = re.compile(r"^\s*x(\d+)\s*(\^\s*2|\*\*\s*2)?\s*(<=|>=|<|>)\s*([-+0-9.eE]+)\s*$")


def parse_predicate(text: str) -> Callable[[np.ndarray], np.ndarray]:
    """Compile conditions like ``x1^2<0.1`` (1-based coordinates; ``and`` joins terms)."""
    terms = []
    for part in re.split(r"\s*(?:&&|&|\band\b)\s*", text.strip()):
        m = _PRED_RE.match(part)
        if not m:
            raise ValueError(f"cannot parse predicate {part!r}")
        k = int(m.group(1)) - 1
        if k < 0:
            raise ValueError("coordinates are numbered from 1")
        terms.append((k, bool(m.group(2)), m.group(3), float(m.group(4))))
    ops = {"<": np.less, "<=": np.less_equal, ">": np.greater, ">=": np.greater_equal}

    def pred(states: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(states)
        ok = np.ones(len(states), dtype=bool)
        for k, squared, op, val in terms:
            v = states[:, k] ** 2 if squared else states[:, k]
            ok &= ops[op](v, val)
        return ok

    return pred


def section_crossings(traj: Trajectory, predicate) -> tuple[np.ndarray, np.ndarray]:
    """Times and states where ``predicate`` switches from false to true.

    The first sample counts as an entry when the predicate already holds there.
    """
    if isinstance(predicate, str):
        predicate = parse_predicate(predicate)
    inside = np.asarray(predicate(traj.states), dtype=bool)
    prev = np.concatenate([[False], inside[:-1]])
    hits = np.flatnonzero(inside & ~prev)
    return traj.times[hits], traj.states[hits]
