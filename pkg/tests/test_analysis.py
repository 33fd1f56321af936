import math

import numpy as np
import pytest

from heteronet.analysis import (
    ESCAPE,
    UNRESOLVED,
    ChainAssemblyError,
    Thresholds,
    TransitionEstimate,
    build_switching_chain,
    classify_node,
    derive_seed,
    equable_core,
    estimate_transitions,
    extract_itinerary,
    markov_config,
    omega_node,
    sample_unstable_sphere,
    separatrix_refine,
    simulate_chain,
)
from heteronet.digraph import parse_digraph
from heteronet.integrate import IntegratorConfig, Trajectory, integrate_ode

from conftest import ks_with


def est(source, counts, total=None, escape=0, unresolved=0, clearance=None):
    total = total if total is not None else sum(counts.values()) + escape + unresolved
    return TransitionEstimate(source, counts, escape, unresolved, total, clearance or {k: 1.0 for k in counts})


def ks_estimates():
    return {
        "1": est("1", {"2": 100}),
        "2": est("2", {"3": 50, "4": 50}),
        "3": est("3", {"1": 100}),
        "4": est("4", {"1": 100}),
    }


def test_derive_seed_is_stable_and_key_sensitive():
    assert derive_seed(0, "node", "2") == derive_seed(0, "node", "2")
    assert derive_seed(0, "node", "2") != derive_seed(1, "node", "2")
    assert derive_seed(0, "node", "2") != derive_seed(0, "node", "3")
    assert 0 <= derive_seed(5, "x") < 2**63


def test_unstable_sphere_samples(ks):
    pts = sample_unstable_sphere(ks, "2", 1e-3, 500, seed=4)
    assert np.all(pts[:, 1] == 1.0) and np.all(pts[:, 0] == 0.0)
    assert np.allclose(np.linalg.norm(pts[:, 2:], axis=1), 1e-3, rtol=1e-12)
    # uniform on the circle: both quadrant signs appear with similar frequency
    assert 0.4 < np.mean(pts[:, 2] > 0) < 0.6
    assert np.array_equal(pts, sample_unstable_sphere(ks, "2", 1e-3, 500, seed=4))


def test_zero_sphere_alternates(ks):
    pts = sample_unstable_sphere(ks, "1", 1e-3, 4)
    assert list(pts[:, 1]) == [1e-3, -1e-3, 1e-3, -1e-3]


def test_omega_node_follows_the_graph(ks):
    assert omega_node(ks, [1.0, 1e-3, 0, 0]) == "2"
    assert omega_node(ks, [0.0, 1.0, 0.1, 0.0]) == "3"
    assert omega_node(ks, [0.0, 1.0, 0.0, 1e-3]) == "4"


def test_omega_node_on_separating_node_and_timeout(ks):
    c = math.sqrt(1 / 2.05)
    assert omega_node(ks, [0, 0, c, c]) == "2:{3,4}"
    assert omega_node(ks, [1.0, 1e-6, 0, 0], IntegratorConfig(step=0.1, max_time=10)) == UNRESOLVED


def test_omega_node_escape_on_blow_up(ks):
    assert omega_node(ks, [3.0, 0, 0, 0], IntegratorConfig(step=0.5, max_time=10)) == ESCAPE


def test_itinerary_lists_successive_visits(ks):
    traj = integrate_ode(ks, [1.0, 1e-3, 0, 0], IntegratorConfig(step=0.05, max_time=3000))
    it = extract_itinerary(ks, traj)
    assert it.nodes == ["1", "2"]
    assert it.terminal == "2"


def test_itinerary_from_synthetic_path(ks):
    states = np.array([[1, 0, 0, 0], [0.7, 0.7, 0, 0], [0, -1, 0, 0], [0, 0.99, 0.01, 0], [0, 0, 0, 1.0]], float)
    it = extract_itinerary(ks, Trajectory(np.arange(5.0), states, "max-time"))
    assert it.entries == [("1", 0.0), ("2", 2.0), ("4", 4.0)]
    assert it.terminal == UNRESOLVED


def test_one_dimensional_node_transition(ks):
    e = estimate_transitions(ks, "1", m=10, seed=1)
    assert e.counts == {"2": 10}
    assert e.probabilities["2"] == 1.0
    assert e.lost_fraction == 0.0


def test_split_node_estimate_small_sample(ks):
    e = estimate_transitions(ks, "2", m=200, seed=3)
    assert e.escape_count == 0 and e.unresolved_count == 0
    assert set(e.counts) == {"3", "4"}
    assert abs(e.fraction("3") - 0.5) < 0.15
    assert e.stderr["3"] == pytest.approx(math.sqrt(e.fraction("3") * e.fraction("4") / 200))
    # clearance: the trajectories stay away from xi_1 while going to xi_3 or xi_4
    assert min(e.clearance.values()) > 0.5


def test_estimates_reproducible_and_thread_independent(ks, monkeypatch):
    a = estimate_transitions(ks, "2", m=60, seed=9, batch=16)
    monkeypatch.setenv("HETERONET_THREADS", "1")
    b = estimate_transitions(ks, "2", m=60, seed=9, batch=16)
    assert a.to_dict() == b.to_dict()


def test_chain_rows_are_stochastic(ks):
    chain = build_switching_chain(ks, ks_estimates())
    assert chain.states == ["1", "2", "3", "4", ESCAPE]
    assert np.allclose(chain.matrix.sum(axis=1), 1.0)
    assert chain.row("2") == {"3": 0.5, "4": 0.5}
    assert chain.row(ESCAPE) == {ESCAPE: 1.0}


def test_chain_normalises_over_resolved_samples(ks):
    e = ks_estimates()
    e["2"] = est("2", {"3": 30, "4": 60}, escape=10)
    chain = build_switching_chain(ks, e)
    assert chain.row("2") == pytest.approx({"3": 0.3, "4": 0.6, ESCAPE: 0.1})


def test_chain_refuses_unresolved_mass(ks):
    e = ks_estimates()
    e["3"] = est("3", {"1": 95}, unresolved=5)
    with pytest.raises(ChainAssemblyError, match="unresolved"):
        build_switching_chain(ks, e)
    del e["3"]
    with pytest.raises(ChainAssemblyError, match="missing"):
        build_switching_chain(ks, e)


def test_chain_simulation(ks):
    chain = build_switching_chain(ks, ks_estimates())
    path = simulate_chain(chain, "1", 400, seed=2)
    assert path == simulate_chain(chain, "1", 400, seed=2)
    for a, b in zip(path, path[1:]):
        assert chain.row(a).get(b, 0) > 0
    after2 = [b for a, b in zip(path, path[1:]) if a == "2"]
    assert 0.35 < after2.count("3") / len(after2) < 0.65


def test_equable_core_of_kirk_silber(ks, ks_graph):
    core = equable_core(ks, ks_estimates())
    assert core == ks_graph


def test_equable_core_drops_unvisited_edge(b3b3c4):
    e = {
        "1": est("1", {"2": 100}),
        "2": est("2", {"4": 100}),
        "3": est("3", {"1": 100}),
        "4": est("4", {"1": 100}),
    }
    core = equable_core(b3b3c4, e)
    assert core.labels == ("1", "2", "4")
    assert set(core.edge_labels()) == {("1", "2"), ("2", "4"), ("4", "1")}


def test_equable_core_needs_recurrence(ks):
    e = {k: est(k, {}, escape=10) for k in "1234"}
    with pytest.raises(ValueError):
        equable_core(ks, e)


def test_classification_verdicts(ks, b3b3c4):
    c = classify_node(ks, "2", est("2", {"3": 50, "4": 50}, clearance={"3": 0.9, "4": 0.9}))
    assert c.equable and c.exclusive and c.almost_complete
    assert c.unstable_dim == 2 and c.splitting_order == 2

    lopsided = classify_node(b3b3c4, "2", est("2", {"4": 100}, clearance={"4": 0.01}))
    assert not lopsided.equable  # the prescribed 2 -> 3 carries no mass
    assert not lopsided.exclusive
    assert lopsided.fractions == {"3": 0.0, "4": 1.0}
    assert lopsided.splitting_order is None

    leaky = classify_node(ks, "1", est("1", {"2": 90}, escape=10), Thresholds(eps_escape=0.05))
    assert not leaky.almost_complete
    assert leaky.escape_fraction == pytest.approx(0.1)


@pytest.mark.parametrize("eta", [0.05, 0.5])
def test_separatrix_finds_zeta(eta):
    sys = ks_with(eta)
    res = separatrix_refine(sys, "2", "3", "4")
    assert res.matched == "2:{3,4}"
    assert abs(res.limit_point[2] ** 2 - 1 / (2 + eta)) < 1e-6
    assert res.angle_width <= 1e-10
    # symmetric graph: the boundary is the diagonal of Omega_2
    assert abs(abs(res.direction[2]) - abs(res.direction[3])) < 1e-8


def test_separatrix_needs_out_neighbours(ks):
    with pytest.raises(ValueError):
        separatrix_refine(ks, "2", "1", "4")


def test_markov_defaults():
    cfg = markov_config()
    assert cfg.step == 0.1 and cfg.max_time == 5000.0
