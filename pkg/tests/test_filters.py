import numpy as np
import pytest
from scipy import stats

from cpfbbs import filters as fl
from cpfbbs.diagnostics import batch_means_se
from cpfbbs import potentials as pot
from cpfbbs.lingauss import NumericalError
from cpfbbs.models.linear import ar1_fk
from cpfbbs.resampling import DegenerateWeightsError, ReferenceWeightError

SCHEMES = ["multinomial", "killing", "systematic_mp"]


@pytest.fixture
def rng():
    return np.random.default_rng(11)


@pytest.fixture(scope="module")
def lg5():
    return ar1_fk(T=5, rho=0.8, obs_var=0.5, rng=np.random.default_rng(5))


def _free_model(T, rho=0.7):
    """AR(1) dynamics with G == 1."""
    lg = ar1_fk(T=T, rho=rho, rng=np.random.default_rng(0))
    m = lg.model
    return fl.FkModel(m.m1_mean, m.m1_chol, m.F, m.c, m.chol, pot.NONE, oracle=m.oracle)


def _raster_model(T, v):
    """AR(1) dynamics with a potential read off a 1x1 raster of value v (off-map weight 1)."""
    lg = ar1_fk(T=T, rng=np.random.default_rng(0))
    m = lg.model
    V = np.inf if v == 0 else -np.log(v)
    fpar = np.concatenate([np.ones(T), [1e6, -5e5, -5e5, 0.0, V]])
    ipar = np.array([T, 1, 1, 0, 0])
    return fl.FkModel(m.m1_mean, m.m1_chol, m.F, m.c, m.chol, pot.RASTER, fpar, ipar, oracle=m.oracle)


# -- particle filter ----------------------------------------------------------


@pytest.mark.parametrize("scheme", ["killing", "systematic", "systematic_mp"])
def test_pf_constant_weights_keep_identity(scheme, rng):
    m = _free_model(2)
    for _ in range(20):
        ps = fl.particle_filter(m, scheme, 4, rng)
        assert np.array_equal(ps.A[0], np.arange(4))


def test_pf_normaliser_unbiased(rng):
    lg = ar1_fk(T=10, rho=0.9, rng=np.random.default_rng(2))
    n = 10_000
    ratio = np.array([np.exp(fl.particle_filter(lg.model, "systematic_mp", 8, rng).log_normaliser
                             - lg.log_normaliser) for _ in range(n)])
    assert abs(ratio.mean() - 1.0) < 4 * ratio.std() / np.sqrt(n)


def test_pf_single_particle_killing_follows_prior(rng):
    lg = ar1_fk(T=6, rho=0.5, obs_var=0.2, y=np.full(6, 3.0))
    n = 20_000
    last = np.array([fl.particle_filter(lg.model, "killing", 1, rng).X[-1, 0, 0] for _ in range(n)])
    # stationary prior N(0, 1) regardless of the (informative) potentials
    assert abs(last.mean()) < 4 / np.sqrt(n)
    assert abs(last.var() - 1.0) < 4 * np.sqrt(2 / n)


def test_pf_degenerate_reports_time(rng):
    m = _raster_model(4, 0.0)
    with pytest.raises(DegenerateWeightsError, match="at time 0"):
        fl.particle_filter(m, "multinomial", 5, rng)


# -- ancestor tracing ---------------------------------------------------------


def test_ancestor_trace_identity():
    A = np.tile(np.arange(4), (3, 1))
    assert np.array_equal(fl.ancestor_trace(A, 2), [2, 2, 2])


def test_ancestor_trace_hand():
    assert np.array_equal(fl.ancestor_trace([[1, 1], [0, 1]], 1), [1, 1])


def test_ancestor_trace_empty():
    assert fl.ancestor_trace(np.zeros((0, 3), dtype=int), 1).shape == (0,)


def test_ancestor_trace_composes(rng):
    A = rng.integers(5, size=(7, 5))
    full = fl.ancestor_trace(A, 3)
    upper = fl.ancestor_trace(A[4:], 3)
    lower = fl.ancestor_trace(A[:4], upper[0])
    assert np.array_equal(np.concatenate([lower, upper]), full)


# -- conditional particle filter ----------------------------------------------


@pytest.mark.parametrize("scheme", SCHEMES)
def test_cpf_plants_reference(scheme, lg5, rng):
    m = lg5.model
    for _ in range(50):
        ref = fl.ReferencePath(rng.normal(size=(5, 1)), rng.integers(6, size=5))
        ps, bT = fl.cpf(m, scheme, ref, 6, rng)
        assert np.array_equal(ps.X[np.arange(5), ref.B], ref.x)
        assert np.all(ps.A[np.arange(4), ref.B[1:]] == ref.B[:-1])
        assert 0 <= bT < 6


def test_cpf_free_slot_follows_proposal(rng):
    m = _free_model(2, rho=0.6)
    n = 20_000
    free = np.empty(n)
    for r in range(n):
        ref = fl.ReferencePath(np.array([[5.0], [5.0]]), np.array([0, 1]))
        ps, _ = fl.cpf(m, "multinomial", ref, 2, rng)
        free[r] = ps.X[0, 1, 0]
    assert abs(free.mean()) < 4 / np.sqrt(n)
    assert abs(free.var() - 1) < 4 * np.sqrt(2 / n)


def test_cpf_reference_zero_weight(rng):
    m = _raster_model(3, 0.0)
    ref = fl.ReferencePath(np.zeros((3, 1)), np.zeros(3, dtype=int))
    with pytest.raises((ReferenceWeightError, DegenerateWeightsError)):
        fl.cpf(m, "killing", ref, 3, rng)


def test_cpf_validates_reference(lg5, rng):
    with pytest.raises(ValueError):
        fl.cpf(lg5.model, "killing", fl.ReferencePath(np.zeros((5, 1)), np.full(5, 9)), 3, rng)
    with pytest.raises(ValueError, match="unknown"):
        fl.cpf(lg5.model, "systematic", fl.ReferencePath(np.zeros((5, 1)), np.zeros(5, int)), 3, rng)


def test_cpf_at_moves_first_coordinate(rng):
    m = _free_model(3)
    res = fl.run_chain(m, "cpf_at", "multinomial", 2, 2000, rng)
    x0 = res.trace[:, 0, 0]
    assert np.mean(x0[1:] != x0[:-1]) > 0.1


@pytest.mark.parametrize("method", ["cpf_at", "cpf_bs"])
def test_slots_uniform_in_stationarity(method, lg5, rng):
    N = 4
    paths = lg5.exact_paths(20_000, rng)
    _, B = fl.sweep_replicates(lg5.model, method, "killing", N, paths, rng)
    for k in range(5):
        counts = np.bincount(B[:, k], minlength=N)
        assert stats.chisquare(counts).pvalue > 1e-4


def test_cpf_at_reversibility_proxy(lg5, rng):
    # stationary pairs (x, x~) should be exchangeable: Bowker symmetry test on quartile bins
    n = 20_000
    paths = lg5.exact_paths(n, rng)
    out, _ = fl.sweep_replicates(lg5.model, "cpf_at", "systematic_mp", 3, paths, rng)
    a, b = paths[:, 0, 0], out[:, 0, 0]
    edges = np.quantile(np.concatenate([a, b]), [0.25, 0.5, 0.75])
    ia, ib = np.searchsorted(edges, a), np.searchsorted(edges, b)
    tab = np.zeros((4, 4))
    np.add.at(tab, (ia, ib), 1)
    stat, dof = 0.0, 0
    for i in range(4):
        for j in range(i + 1, 4):
            if tab[i, j] + tab[j, i] > 0:
                stat += (tab[i, j] - tab[j, i]) ** 2 / (tab[i, j] + tab[j, i])
                dof += 1
    assert stats.chi2.sf(stat, dof) > 1e-3


# -- invariance from stationarity (reduced size; see the acceptance suite) -----


def _check_marginals(out, post, n_se=4.0):
    x = out[:, :, 0]
    n = x.shape[0]
    mu = post.smooth_mean[:, 0]
    var = post.smooth_cov[:, 0, 0]
    assert np.all(np.abs(x.mean(0) - mu) < n_se * x.std(0) / np.sqrt(n))
    sq = (x - mu) ** 2
    assert np.all(np.abs(sq.mean(0) - var) < n_se * sq.std(0) / np.sqrt(n))


@pytest.mark.parametrize("scheme", SCHEMES)
@pytest.mark.parametrize("method,blocking", [
    ("cpf_at", None), ("cpf_bs", None), ("cpf_bbs", [0, 2, 4]), ("cpf_bbs", [0, 4]), ("cpf_bbs", [0, 1, 4]),
])
def test_one_sweep_invariance(method, blocking, scheme, lg5, rng):
    paths = lg5.exact_paths(4000, rng)
    out, _ = fl.sweep_replicates(lg5.model, method, scheme, 3, paths, rng, blocking=blocking)
    _check_marginals(out, lg5.posterior)


def test_two_particles_two_steps_bridge_invariance(rng):
    lg = ar1_fk(T=2, rho=0.3, obs_var=0.3, rng=np.random.default_rng(3))
    paths = lg.exact_paths(20_000, rng)
    out, _ = fl.sweep_replicates(lg.model, "cpf_bs", "killing", 2, paths, rng)
    _check_marginals(out, lg.posterior)


# -- backward sampling and bridging -------------------------------------------


def test_bs_equals_dense_bbs_draw_for_draw(lg5):
    ref = fl.ReferencePath(np.linspace(-1, 1, 5)[:, None], [0, 1, 2, 0, 1])
    a = fl.cpf_bs(lg5.model, "killing", ref, 3, np.random.default_rng(9))
    b = fl.cpf_bbs(lg5.model, "killing", ref, np.arange(5), 3, np.random.default_rng(9))
    assert np.array_equal(a.x, b.x) and np.array_equal(a.B, b.B)


def test_dense_bbs_chain_matches_bs_chain(lg5):
    a = fl.run_chain(lg5.model, "cpf_bs", "systematic_mp", 4, 20_000, np.random.default_rng(1))
    b = fl.run_chain(lg5.model, "cpf_bbs", "systematic_mp", 4, 20_000, np.random.default_rng(2),
                     blocking=np.arange(5))
    mu = lg5.posterior.smooth_mean[:, 0]
    for k in range(5):
        # chains are autocorrelated, so use batch-means standard errors
        for tr in (a.trace[:, k, 0], b.trace[:, k, 0]):
            assert abs(tr.mean() - mu[k]) < 4 * batch_means_se(tr)
        se = np.hypot(batch_means_se(a.trace[:, k, 0]), batch_means_se(b.trace[:, k, 0]))
        assert abs(a.trace[:, k, 0].mean() - b.trace[:, k, 0].mean()) < 4 * se


def test_bridge_one_step_is_backward_sampling(lg5, rng):
    m = lg5.model
    ref = fl.ReferencePath(np.zeros((5, 1)), np.zeros(5, dtype=int))
    ps, _ = fl.cpf(m, "multinomial", ref, 4, rng)
    l, u = 2, 3
    x_u = np.array([0.4])
    logw = ps.logW[l] + m.log_potential(u, ps.X[l, :, :], np.tile(x_u, (4, 1))) \
        + np.array([m.log_transition(u, ps.X[l, i], x_u) for i in range(4)])
    p = np.exp(logw - logw.max())
    p /= p.sum()
    n = 40_000
    counts = np.zeros(4)
    for _ in range(n):
        _, B = fl.bridge_cpf(m, "multinomial", ps, l, u, [0], x_u, rng)
        counts[B[0]] += 1
    assert stats.chisquare(counts, p * n).pvalue > 1e-3


def test_bridge_single_particle_keeps_reference(lg5, rng):
    m = lg5.model
    ref = fl.ReferencePath(np.arange(5.0)[:, None], np.zeros(5, dtype=int))
    ps, _ = fl.cpf(m, "killing", ref, 1, rng)
    x, B = fl.bridge_cpf(m, "killing", ps, 0, 4, np.zeros(4, dtype=int), ref.x[4], rng, blocking=[0, 4])
    assert np.array_equal(x, ref.x[:4]) and np.all(B == 0)
    res = fl.run_chain(m, "cpf_bbs", "killing", 1, 50, rng, blocking=[0, 2, 4], init=ref)
    assert np.all(res.changes == 0)
    assert np.all(res.trace == ref.x[None, :, :])


def test_trivial_blocking_bridges_whole_horizon(lg5, rng):
    res = fl.run_chain(lg5.model, "cpf_bbs", "systematic_mp", 4, 500, rng, blocking=[0, 4])
    assert res.changes.shape == (1,) and 0 < res.changes[0] <= 500


def test_bbs_requires_blocking_and_oracle(lg5, rng):
    ref = fl.ReferencePath(np.zeros((5, 1)), np.zeros(5, dtype=int))
    with pytest.raises(ValueError):
        fl.run_chain(lg5.model, "cpf_bbs", "killing", 2, 5, rng)
    with pytest.raises(ValueError, match="invalid blocking"):
        fl.cpf_bbs(lg5.model, "killing", ref, [0, 3, 2, 4], 2, rng)
    m = lg5.model
    no_oracle = fl.FkModel(m.m1_mean, m.m1_chol, m.F, m.c, m.chol, m.potential, m.fpar, m.ipar)
    with pytest.raises(ValueError, match="oracle"):
        fl.cpf_bbs(no_oracle, "killing", ref, [0, 2, 4], 2, rng)
    # dense blocking needs no oracle
    fl.cpf_bs(no_oracle, "killing", ref, 2, rng)


def test_chain_deterministic_per_seed(lg5):
    a = fl.run_chain(lg5.model, "cpf_bbs", "killing", 4, 300, np.random.default_rng(4), blocking=[0, 2, 4])
    b = fl.run_chain(lg5.model, "cpf_bbs", "killing", 4, 300, np.random.default_rng(4), blocking=[0, 2, 4])
    assert np.array_equal(a.trace, b.trace) and np.array_equal(a.changes, b.changes)


def test_nan_potential_raises(lg5, rng):
    m = lg5.model
    bad = fl.FkModel(m.m1_mean, m.m1_chol, m.F, m.c, m.chol, m.potential,
                     np.concatenate([m.fpar[:5], np.full(5, -1.0), m.fpar[10:]]), m.ipar, oracle=m.oracle)
    with pytest.raises(NumericalError, match="non-finite"):
        fl.particle_filter(bad, "killing", 3, rng)


def test_model_validation():
    with pytest.raises(ValueError):
        fl.FkModel(np.zeros(1), np.eye(1), np.zeros((1, 1, 1)), np.zeros((1, 1)), np.zeros((1, 1, 1)))
