import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from heteronet.digraph import parse_digraph
from heteronet.realize import (
    IneligibleGraphError,
    RealizationParams,
    absorbing_annulus,
    equivariance_check,
    grad_V,
    hessian_V,
    jacobian,
    known_equilibria,
    newton_refine,
    node_eigenvalues,
    out_subspaces,
    phi_angle_rate,
    potential_V,
    radius_rate_bounds,
    realize,
    separating_equilibria,
    vector_field,
)

from conftest import B3B3C4_TEXT, KS_TEXT, ks_with, random_points_in_subspace


def ks_by_hand(x, eps=0.02, eta=0.05):
    x1, x2, x3, x4 = x
    r = x @ x
    return np.array(
        [
            x1 * (1 - r + eps * (x3**2 + x4**2) - eta * x2**2),
            x2 * (1 - r + eps * x1**2 - eta * (x3**2 + x4**2)),
            x3 * (1 - r + eps * x2**2 - eta * (x1**2 + x4**2)),
            x4 * (1 - r + eps * x2**2 - eta * (x1**2 + x3**2)),
        ]
    )


def fd_jacobian(sys, x, h=1e-6):
    n = len(x)
    out = np.empty((n, n))
    for k in range(n):
        e = np.zeros(n)
        e[k] = h
        out[:, k] = (vector_field(sys, x + e) - vector_field(sys, x - e)) / (2 * h)
    return out


def test_params_validated():
    for bad in [dict(epsilon=0.0), dict(epsilon=1.0), dict(epsilon=-0.1), dict(eta=0.0)]:
        with pytest.raises(ValueError):
            RealizationParams(**bad)


def test_gate_blocks_realization_unless_forced():
    g = parse_digraph(B3B3C4_TEXT)
    with pytest.raises(IneligibleGraphError, match="delta-cliques"):
        realize(g)
    sys = realize(g, force=True)
    assert sys.forced and not sys.verified
    assert realize(parse_digraph(KS_TEXT)).verified


def test_coupling_matrix_entries(ks):
    m = ks.coupling  # m[i, j] multiplies x_i^2 inside F_j
    assert m[0, 1] == pytest.approx(0.02 - 1)  # 1 -> 2 is an edge
    assert m[1, 0] == pytest.approx(-0.05 - 1)
    assert np.all(np.diag(m) == -1.0)


@pytest.mark.parametrize("eps,eta", [(0.02, 0.05), (0.3, 0.7), (0.9, 0.01)])
def test_field_matches_hand_written_equations(eps, eta, rng):
    sys = ks_with(eta, eps)
    xs = rng.uniform(-1.5, 1.5, size=(500, 4))
    want = np.array([ks_by_hand(x, eps, eta) for x in xs])
    assert np.abs(vector_field(sys, xs) - want).max() < 1e-14


def test_batch_and_single_evaluation_agree(ks, rng):
    xs = rng.standard_normal((20, 4))
    batch = vector_field(ks, xs)
    for x, f in zip(xs, batch):
        assert np.abs(vector_field(ks, x) - f).max() < 1e-14


def test_wrong_dimension_rejected(ks):
    with pytest.raises(ValueError):
        vector_field(ks, np.zeros(3))


def test_jacobian_against_finite_differences(ks, rng):
    for x in rng.uniform(-1.2, 1.2, size=(50, 4)):
        assert np.abs(jacobian(ks, x) - fd_jacobian(ks, x)).max() < 1e-6


def test_node_spectrum(ks):
    info = node_eigenvalues(ks, "2")
    assert sorted(info.eigenvalues) == sorted([-2.0, 0.02, 0.02, -0.05])
    assert info.stability == "saddle"
    assert info.unstable_dirs == [2, 3]
    num = np.sort(np.linalg.eigvals(jacobian(ks, info.location)).real)
    assert np.abs(num - np.sort(info.eigenvalues)).max() < 1e-8


def test_out_subspaces(ks):
    omega, q = out_subspaces(ks, "2")
    assert omega == [2, 3] and q == [1, 2, 3]


@settings(max_examples=100, deadline=None)
@given(
    arrays(np.float64, 4, elements=st.floats(-2, 2)),
    st.lists(st.sampled_from([-1.0, 1.0]), min_size=4, max_size=4),
)
def test_equivariant_under_sign_flips(x, signs):
    sys = ks_with()
    assert equivariance_check(sys, x, signs)


def test_equivariance_check_detects_broken_field(ks):
    x = np.array([0.3, -0.2, 0.5, 0.1])
    bad = lambda y: vector_field(ks, y) + 1e-3
    assert not equivariance_check(ks, x, [-1, 1, 1, 1], field=bad)
    with pytest.raises(ValueError):
        equivariance_check(ks, x, [1, 0, 1, 1])


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 4, elements=st.floats(-2, 2)), st.integers(0, 3))
def test_coordinate_hyperplanes_invariant(x, k):
    x = x.copy()
    x[k] = 0.0
    assert vector_field(ks_with(), x)[k] == 0.0


def test_annulus_values_and_rate_bounds(ks, rng):
    r0, r1 = absorbing_annulus(ks)
    assert r0 == pytest.approx(1 / 1.05) and r1 == pytest.approx(1 / 0.98)
    for x in rng.uniform(-1.2, 1.2, size=(300, 4)):
        rate, lo, hi = radius_rate_bounds(ks, x)
        assert lo - 1e-12 <= rate <= hi + 1e-12


def test_gradient_structure_on_omega(ks, rng):
    pts = random_points_in_subspace(rng, 4, [2, 3], 200)
    for x in pts:
        assert np.abs(vector_field(ks, x) + grad_V(ks, "2", x)).max() < 1e-12


def test_gradient_and_hessian_against_finite_differences(ks, rng):
    h = 1e-6
    for x in random_points_in_subspace(rng, 4, [2, 3], 30):
        g = grad_V(ks, "2", x)
        for k in (2, 3):
            e = np.zeros(4)
            e[k] = h
            fd = (potential_V(ks, "2", x + e) - potential_V(ks, "2", x - e)) / (2 * h)
            assert abs(fd - g[k]) < 1e-6
        hess = hessian_V(ks, "2", x)
        for a, k in enumerate((2, 3)):
            e = np.zeros(4)
            e[k] = h
            col = (grad_V(ks, "2", x + e) - grad_V(ks, "2", x - e))[[2, 3]] / (2 * h)
            assert np.abs(col - hess[:, a]).max() < 1e-6


def test_potential_requires_omega_support(ks):
    with pytest.raises(ValueError, match="outside"):
        potential_V(ks, "2", [0.1, 0.0, 0.5, 0.5])


def test_phi_rate_matches_chain_rule(ks, rng):
    for x in random_points_in_subspace(rng, 4, [1, 2, 3], 200, radius=(0.3, 1.1)):
        phi, rate = phi_angle_rate(ks, "2", x)
        f = vector_field(ks, x)
        s = x[2] ** 2 + x[3] ** 2
        u = x[1] ** 2 / s
        du = (2 * x[1] * f[1] * s - x[1] ** 2 * (2 * x[2] * f[2] + 2 * x[3] * f[3])) / s**2
        assert rate == pytest.approx(du / (1 + u * u), rel=1e-9, abs=1e-14)
        assert rate <= 0.0


def test_phi_rejects_points_off_q(ks):
    with pytest.raises(ValueError):
        phi_angle_rate(ks, "2", [0.2, 0.5, 0.5, 0.1])
    with pytest.raises(ValueError):
        phi_angle_rate(ks, "2", np.zeros(4))


@pytest.mark.parametrize("eta", [0.05, 0.5, 2.0])
def test_separating_node_closed_form(eta):
    sys = ks_with(eta)
    (zeta,) = separating_equilibria(sys, "2")
    assert zeta.id == "2:{3,4}" and zeta.method == "closed-form"
    assert zeta.location[2] ** 2 == pytest.approx(1 / (2 + eta), abs=1e-12)
    assert zeta.location[3] ** 2 == pytest.approx(1 / (2 + eta), abs=1e-12)
    assert zeta.residual <= 1e-12
    assert zeta.stability == "saddle"
    assert zeta.unstable_dirs == [0]


@pytest.mark.parametrize("eps,eta", [(0.02, 0.05), (0.1, 0.5)])
def test_zeta_spectrum(eps, eta):
    (zeta,) = separating_equilibria(ks_with(eta, eps), "2")
    want = sorted([-2.0, -eta / (2 + eta), (eta + 2 * eps) / (2 + eta), 2 * eta / (2 + eta)])
    assert np.abs(np.array(zeta.eigenvalues) - want).max() < 1e-10


def test_separating_nodes_for_three_way_split(rng):
    sys = realize(parse_digraph("1->2\n1->3\n1->4\n2->5\n3->5\n4->5\n5->1\n"))
    seps = separating_equilibria(sys, "1")
    assert len(seps) == 4  # three pairs and the triple
    eta = sys.params.eta
    for s in seps:
        k = len(s.support)
        assert np.allclose(s.location[list(s.support)] ** 2, 1 / (k + eta * (k - 1)), atol=1e-12)
        assert s.residual <= 1e-12


def test_numeric_fallback_when_out_neighbours_connected(b3b3c4):
    seps = separating_equilibria(b3b3c4, "2")
    assert all(s.method == "numeric" for s in seps)
    for s in seps:
        assert s.residual <= 1e-12


def test_newton_refine_returns_to_node(ks):
    x = newton_refine(ks, [0.0, 0.9, 0.0, 0.0], [1])
    assert np.abs(x - [0, 1, 0, 0]).max() < 1e-14


def test_known_equilibria_table(ks):
    eqs = known_equilibria(ks)
    ids = [e.id for e in eqs]
    assert ids == ["1", "2", "3", "4", "2:{3,4}", "origin"]
    for e in eqs:
        assert np.abs(vector_field(ks, e.location)).max() <= 1e-12
    assert known_equilibria(ks) is eqs
