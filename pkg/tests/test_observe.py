import numpy as np
import pytest

from plumeinv.dispersion import GridSpec, PhysicalParams, sample_wind_params, solve_pde, wind_field
from plumeinv.errors import DimensionMismatch, StaleCache
from plumeinv.flownet import init_params, net_forward
from plumeinv.observe import (
    LinearForward,
    ObservationSet,
    PdeForward,
    SurrogateForward,
    apply_jacobian,
    apply_jacobian_transpose,
    bilinear_weights,
    default_sensors,
    make_operator,
    make_test_observations,
    observe,
    predict_observables,
)
from plumeinv.reduction import fit_pca


def test_default_sensors_inside_domain():
    s = default_sensors()
    assert s.shape == (10, 2)
    assert np.all((s[:, 0] > 0) & (s[:, 0] < 200) & (s[:, 1] > 0) & (s[:, 1] < 20))


def test_rows_are_weights(small_grid):
    op = make_operator(small_grid)
    assert np.all(op.selection >= 0)
    np.testing.assert_allclose(op.selection.sum(axis=1), 1.0, rtol=1e-14)


def test_constant_state(small_grid):
    op = make_operator(small_grid)
    np.testing.assert_allclose(observe(np.full(small_grid.m, 2.5), op), 2.5, rtol=1e-14)


def test_node_and_cell_centre(small_grid, rng):
    u = rng.normal(size=small_grid.m)
    g = small_grid
    i, j = 7, 4
    node = make_operator(g, [(g.x[i], g.y[j])])
    assert observe(u, node)[0] == pytest.approx(u[j * g.nx + i], rel=1e-14)
    centre = make_operator(g, [(g.x[i] + g.dx / 2, g.y[j] + g.dy / 2)])
    corners = [u[(j + a) * g.nx + i + b] for a in (0, 1) for b in (0, 1)]
    assert observe(u, centre)[0] == pytest.approx(np.mean(corners), rel=1e-13)
    near = make_operator(g, [(g.x[i] + 0.1 * g.dx, g.y[j])], method="nearest")
    assert observe(u, near)[0] == u[j * g.nx + i]


def test_outside_domain(small_grid):
    with pytest.raises(ValueError):
        bilinear_weights(small_grid, 250.0, 5.0)


def test_observe_dimension(small_grid):
    with pytest.raises(DimensionMismatch):
        observe(np.zeros(small_grid.m + 1), make_operator(small_grid))


def test_stacking_roundtrip(rng):
    vals = rng.normal(size=(4, 6))
    obs = ObservationSet(vals)
    assert obs.stacked[4 * 2 + 1] == vals[1, 2]
    np.testing.assert_array_equal(ObservationSet.from_stacked(obs.stacked, 4).values, vals)


# ---------------------------------------------------------------------------
# surrogate forward map


@pytest.fixture
def surrogate(rng):
    g = GridSpec(nx=21, ny=6, N=12, T=60.0)
    r, rw = 4, 2
    Y = rng.normal(size=(g.m, 30))
    basis = fit_pca(Y, r)
    p = init_params(r, rw, width=8, depth=2, dt=g.dt, seed=5)
    p = p.with_flat(p.flat() + 0.3 * rng.normal(size=p.size))
    p.in_scale[:] = 3.0
    p.out_scale[:] = 0.2
    op = make_operator(g)
    wind = rng.normal(size=(g.N, rw))
    return SurrogateForward(p, basis, op, wind), g


def _zero_output(p):
    xi = p.flat()
    n_last = p.weights[-1].size + p.biases[-1].size
    xi[-n_last:] = 0.0
    return p.with_flat(xi)


def test_identity_surrogate_constant(surrogate, rng):
    fwd, g = surrogate
    p0 = _zero_output(fwd.params)
    u0 = rng.normal(size=g.m)
    obs = predict_observables(rng.normal(size=g.N), fwd.wind, p0, fwd.basis, fwd.op, u0)
    expected = observe(fwd.basis.mean + fwd.basis.basis @ (fwd.basis.basis.T @ (u0 - fwd.basis.mean)), fwd.op)
    np.testing.assert_allclose(obs.values, np.repeat(expected[:, None], g.N, axis=1), rtol=1e-12, atol=1e-12)


def test_matches_manual_recursion(surrogate, rng):
    fwd, g = surrogate
    z = rng.normal(size=g.N)
    c = fwd.basis.basis.T @ (np.zeros(g.m) - fwd.basis.mean)
    rows = []
    for n in range(g.N):
        c = net_forward(c, z[n], fwd.wind[n], fwd.params)
        rows.append(fwd.op.selection @ (fwd.basis.mean + fwd.basis.basis @ c))
    np.testing.assert_allclose(fwd.evaluate(z), np.concatenate(rows), rtol=1e-12, atol=1e-10)


def test_batched_evaluate(surrogate, rng):
    fwd, g = surrogate
    Z = rng.normal(size=(3, g.N))
    W = rng.normal(size=(3, g.N, fwd.params.r_w))
    F = fwd.evaluate(Z, W)
    for b in range(3):
        np.testing.assert_allclose(F[b], fwd.evaluate(Z[b], W[b]), rtol=1e-13, atol=1e-12)


def test_jacobian_finite_differences(surrogate, rng):
    fwd, g = surrogate
    z, v = rng.normal(size=g.N), rng.normal(size=g.N)
    cache = fwd.linearize(z)
    h = 1e-5
    fd = (fwd.evaluate(z + h * v) - fwd.evaluate(z - h * v)) / (2 * h)
    jv = apply_jacobian(cache, v)
    assert np.linalg.norm(jv - fd) <= 1e-6 * np.linalg.norm(fd)
    np.testing.assert_allclose(cache.F, fwd.evaluate(z), rtol=1e-13, atol=1e-12)


def test_adjoint_identity(surrogate, rng):
    fwd, g = surrogate
    cache = fwd.linearize(rng.normal(size=g.N))
    for _ in range(5):
        v, y = rng.normal(size=g.N), rng.normal(size=g.N * fwd.L)
        lhs = apply_jacobian(cache, v) @ y
        rhs = v @ apply_jacobian_transpose(cache, y)
        assert lhs == pytest.approx(rhs, rel=1e-12)


def test_jacobian_trivial_cases(surrogate, rng):
    fwd, g = surrogate
    cache = fwd.linearize(rng.normal(size=g.N))
    assert not np.any(apply_jacobian(cache, np.zeros(g.N)))
    assert not np.any(apply_jacobian_transpose(cache, np.zeros(g.N * fwd.L)))
    ident = SurrogateForward(_zero_output(fwd.params), fwd.basis, fwd.op, fwd.wind)
    assert not np.any(apply_jacobian(ident.linearize(np.ones(g.N)), rng.normal(size=g.N)))


def test_jacobian_linear_in_v(surrogate, rng):
    fwd, g = surrogate
    cache = fwd.linearize(rng.normal(size=g.N))
    a, b = rng.normal(size=g.N), rng.normal(size=g.N)
    np.testing.assert_allclose(
        apply_jacobian(cache, 2 * a - b), 2 * apply_jacobian(cache, a) - apply_jacobian(cache, b), rtol=1e-12, atol=1e-12
    )


def test_adjoint_causality(surrogate, rng):
    fwd, g = surrogate
    cache = fwd.linearize(rng.normal(size=g.N))
    n = 5  # observation at t_n depends on z_0 .. z_{n-1}
    y = np.zeros(g.N * fwd.L)
    y[(n - 1) * fwd.L + 2] = 1.0
    out = apply_jacobian_transpose(cache, y)
    assert np.all(out[n:] == 0.0) and np.any(out[:n] != 0.0)


def test_forward_causality(surrogate, rng):
    fwd, g = surrogate
    z = rng.normal(size=g.N)
    z2 = z.copy()
    z2[6:] += 10.0
    L = fwd.L
    np.testing.assert_array_equal(fwd.evaluate(z)[: 6 * L], fwd.evaluate(z2)[: 6 * L])


def test_stale_cache(surrogate, rng):
    fwd, g = surrogate
    z = rng.normal(size=g.N)
    cache = fwd.linearize(z)
    with pytest.raises(StaleCache):
        apply_jacobian(cache, np.ones(g.N), at=z + 1)
    cache.valid = False
    with pytest.raises(StaleCache):
        apply_jacobian_transpose(cache, np.ones(g.N * fwd.L))


def test_wind_shape_checked(surrogate):
    fwd, g = surrogate
    with pytest.raises(DimensionMismatch):
        SurrogateForward(fwd.params, fwd.basis, fwd.op, np.zeros((g.N, fwd.params.r_w + 1)))


def test_linear_forward_hook(rng):
    A = rng.normal(size=(6, 3))
    f = LinearForward(A, np.ones(6))
    z = rng.normal(size=3)
    np.testing.assert_allclose(f.evaluate(z), A @ z + 1)
    c = f.linearize(z)
    np.testing.assert_allclose(c.jvp(np.ones(3)), A @ np.ones(3))


def test_pde_forward_linear(small_grid, rng):
    g = GridSpec(nx=41, ny=11, N=10, T=60.0)
    fwd = PdeForward(wind_field(sample_wind_params(1, 1.0), g), make_operator(g), g, PhysicalParams())
    z1, z2 = rng.random(g.N) * 1e4, rng.random(g.N) * 1e4
    lhs = fwd.evaluate(0.3 * z1 + 1.7 * z2)
    rhs = 0.3 * fwd.evaluate(z1) + 1.7 * fwd.evaluate(z2)
    assert np.linalg.norm(lhs - rhs) <= 1e-10 * np.linalg.norm(rhs)


class TestNoise:
    def test_noise_free(self, small_grid, rng):
        u = rng.random((small_grid.N + 1, small_grid.m))
        op = make_operator(small_grid)
        obs = make_test_observations(u, op, 0.0, 1)
        np.testing.assert_array_equal(obs.values, observe(u[1:], op).T)

    def test_noise_moment(self, rng):
        g = GridSpec(nx=21, ny=6, N=1000, T=60.0)
        u = np.ones((g.N + 1, g.m))
        op = make_operator(g)
        obs = make_test_observations(u, op, 0.02, 3)
        assert obs.values.size == 10_000
        assert np.std(obs.values - 1.0) == pytest.approx(0.02, rel=0.03)

    def test_zero_state(self, small_grid):
        obs = make_test_observations(np.zeros((small_grid.N + 1, small_grid.m)), make_operator(small_grid), 0.5, 2)
        assert not np.any(obs.values)

    def test_deterministic(self, small_grid, rng):
        u = rng.random((small_grid.N + 1, small_grid.m))
        op = make_operator(small_grid)
        np.testing.assert_array_equal(make_test_observations(u, op, 0.02, 9).values, make_test_observations(u, op, 0.02, 9).values)
