import numpy as np
import pytest

from perilayer import fem
from perilayer.fem import Field, Locator
from perilayer.geometry import DomainSpec, PeriodicityCell, SourceSpec
from perilayer.mesh import BandSpec, Mesh, mesh_band, mesh_layer_pair, mesh_limit_split

DOMAIN = DomainSpec()


def unit_square(n=8):
    xs = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    a, b, c, d = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel(), idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
    tri = np.vstack([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    e = np.vstack([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
    key, cnt = np.unique(np.sort(e, axis=1), axis=0, return_counts=True)
    bnd = key[cnt == 1]
    return Mesh(pts, tri, bnd, ["dirichlet"] * len(bnd), 1.0 / n)


def test_zero_source_zero_rhs():
    s = fem.assemble(unit_square(), None)
    assert not np.any(s.rhs)


def test_element_stiffness_closed_form():
    m = Mesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]]),
             np.array([[0, 1], [1, 2], [2, 0]]), ["dirichlet"] * 3, 1.0)
    K = fem.stiffness(m).toarray()
    assert np.allclose(K, 0.5 * np.array([[2, -1, -1], [-1, 1, 0], [-1, 0, 1]]), atol=1e-15)


def test_row_sums_and_symmetry():
    K = fem.stiffness(mesh_limit_split(DOMAIN, 0.2))
    assert np.abs(K @ np.ones(K.shape[0])).max() < 1e-12
    assert abs(K - K.T).max() < 1e-14


def test_linear_reproduction():
    m = unit_square()
    s = fem.apply_dirichlet(fem.assemble(m), "dirichlet", lambda x, y: x)
    u = fem.solve(s)
    assert np.abs(u.values - m.vertices[:, 0]).max() < 1e-10


def test_constant_data():
    m = unit_square()
    u = fem.solve(fem.apply_dirichlet(fem.assemble(m), "dirichlet", lambda x, y: 1.0 + 0 * x))
    assert np.abs(u.values - 1.0).max() < 1e-12


def test_zero_dirichlet_keeps_rhs():
    m = unit_square()
    s = fem.assemble(m, lambda x, y: 1.0 + 0 * x)
    s2 = fem.apply_dirichlet(s, "dirichlet")
    assert np.array_equal(s.rhs, s2.rhs)
    assert np.all(s2.fixed_values == 0.0)


def test_unknown_tag():
    with pytest.raises(KeyError):
        fem.apply_dirichlet(fem.assemble(unit_square()), "hole")


def test_degenerate_triangle():
    m = Mesh(np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]), np.array([[0, 1, 2]]),
             np.zeros((0, 2), int), [], 1.0)
    with pytest.raises(fem.AssemblyError):
        fem.assemble(m)


def test_periodic_constraint():
    m = mesh_band(BandSpec(PeriodicityCell(), 3.0, 0.125))
    s = fem.assemble(m, lambda x, y: np.sin(2 * np.pi * x) * np.exp(-y * y))
    s = fem.apply_dirichlet(s, ("band_top", "band_bottom"))
    s = fem.apply_periodic(s, m.periodic_pairs)
    assert len(s.slaves) == len(m.periodic_pairs)
    u = fem.solve(s)
    assert np.array_equal(u.values[m.periodic_pairs[:, 0]], u.values[m.periodic_pairs[:, 1]])
    assert abs(s.matrix - s.matrix.T).max() < 1e-14


def test_zero_jump_equals_unsplit():
    perf, lim, nm = mesh_layer_pair(DOMAIN, PeriodicityCell(), 0.25, 0.1)
    a = fem.solve(fem.apply_dirichlet(fem.assemble(perf, DOMAIN.source, 5), "dirichlet"))
    s = fem.apply_dirichlet(fem.assemble(lim, DOMAIN.source, 5), "dirichlet")
    b = fem.solve(fem.apply_interface_jump(s, lim.interface_pairs))
    assert np.abs(b.values[nm] - a.values).max() < 1e-10


def test_manufactured_normal_jump():
    m = mesh_limit_split(DOMAIN, 0.1)
    side = np.where(m.vertices[:, 1] < 0, -1, 1)
    side[m.interface_pairs[:, 1]] = -1
    exact = np.where(side > 0, 1.0, 2.0) * m.vertices[:, 1]
    s = fem.assemble(m)
    s = fem.apply_dirichlet(s, "dirichlet", lambda x, y: np.where(y > 0, y, 2 * y))
    # [d_x2 u] = d_x2 u(0+) - d_x2 u(0-) = 1 - 2
    s = fem.apply_interface_jump(s, m.interface_pairs, None, lambda x, y: -1.0 + 0 * x)
    u = fem.solve(s)
    assert fem.subdomain_norms(m, u.values - exact)["l2"] < 1e-10


def test_strong_value_jump():
    m = mesh_limit_split(DOMAIN, 0.1)
    s = fem.apply_dirichlet(fem.assemble(m), "dirichlet")
    s = fem.apply_interface_jump(s, m.interface_pairs, lambda x, y: 1.0 + 0 * x)
    u = fem.solve(s)
    p = m.interface_pairs
    inner = np.abs(m.vertices[p[:, 0], 0]) < 1.0
    jump = u.values[p[inner, 0]] - u.values[p[inner, 1]]
    assert np.abs(jump - 1.0).max() < 1e-12


def test_nonfinite_jump_rejected():
    m = mesh_limit_split(DOMAIN, 0.2)
    s = fem.apply_dirichlet(fem.assemble(m), "dirichlet")
    with pytest.raises(ValueError), np.errstate(divide="ignore"):
        fem.apply_interface_jump(s, m.interface_pairs, lambda x, y: 1.0 / (1.0 - np.abs(x)))


def test_energy_identity_and_quadrature_order():
    m = mesh_limit_split(DOMAIN, 0.1)
    f = lambda x, y: 1.0 + x - 0.5 * y
    sols = []
    for order in (2, 5):
        s = fem.apply_dirichlet(fem.assemble(m, f, order), "dirichlet")
        s = fem.apply_interface_jump(s, m.interface_pairs)
        u = fem.solve(s)
        assert fem.energy_check(s, u) < 1e-8
        sols.append(u.values)
    assert np.abs(sols[0] - sols[1]).max() < 1e-10


def test_subdomain_norms():
    m = unit_square(16)
    z = fem.subdomain_norms(m, np.zeros(m.n_vertices))
    assert z["l2"] == 0.0 and z["h1"] == 0.0
    r = fem.subdomain_norms(m, m.vertices[:, 0])
    assert r["h1_semi"] == pytest.approx(1.0, abs=1e-12)
    assert r["l2"] == pytest.approx(1 / np.sqrt(3), abs=1e-12)
    u = np.sin(3 * m.vertices[:, 0]) * m.vertices[:, 1]
    left = fem.subdomain_norms(m, u, lambda x, y: x < 0.5)
    right = fem.subdomain_norms(m, u, lambda x, y: x >= 0.5)
    full = fem.subdomain_norms(m, u)
    assert left["h1"] ** 2 + right["h1"] ** 2 == pytest.approx(full["h1"] ** 2, rel=1e-12)
    with pytest.raises(ValueError):
        fem.subdomain_norms(m, u, lambda x, y: x > 2)


def test_traces_of_linear_fields():
    m = mesh_limit_split(DOMAIN, 0.1)
    xs = np.linspace(-0.9, 0.9, 7)
    for side in ("top", "bottom"):
        fy = Field(m, m.vertices[:, 1])
        assert np.abs(fem.trace_on_gamma(fy, side, xs)).max() < 1e-14
        assert np.abs(fem.trace_normal_derivative(fy, side, xs) - 1.0).max() < 1e-10
        fx = Field(m, m.vertices[:, 0])
        assert np.abs(fem.trace_on_gamma(fx, side, xs) - xs).max() < 1e-12
        assert np.abs(fem.trace_normal_derivative(fx, side, xs)).max() < 1e-10
    with pytest.raises(ValueError):
        fem.trace_on_gamma(Field(m, m.vertices[:, 0]), "top", [1.5])


def test_corner_gradient_recovery_converges():
    # harmonic r^{2/3} sin(2 theta / 3) about the plus corner, on both sides of Gamma
    def exact(x, y):
        r = np.hypot(x - 1.0, y)
        th = np.mod(np.arctan2(y, x - 1.0), 2 * np.pi)
        return r ** (2 / 3) * np.sin(2 * th / 3)

    def dx2(x):
        r = 1.0 - x
        # on theta = pi: d_x2 = -(1/r) d_theta
        return -(2 / 3) * r ** (-1 / 3) * np.cos(2 * np.pi / 3)

    xs = np.array([0.2, 0.4, 0.6, 0.8])
    errs = []
    for h in (0.1, 0.05):
        m = mesh_limit_split(DOMAIN, h)
        s = fem.apply_dirichlet(fem.assemble(m), "dirichlet", exact)
        s = fem.apply_interface_jump(s, m.interface_pairs)
        u = fem.solve(s)
        errs.append(np.abs(fem.trace_normal_derivative(u, "top", xs) - dx2(xs)).max())
    assert errs[1] < errs[0]


def test_locator():
    m = unit_square(4)
    loc = Locator(m)
    v = loc.interpolate(m.vertices[:, 0] + 2 * m.vertices[:, 1], np.array([[0.3, 0.7], [0.9, 0.1]]))
    assert np.allclose(v, [1.7, 1.1])
