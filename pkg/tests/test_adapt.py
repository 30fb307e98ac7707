import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bayesilc.adapt import (LinkParams, ModelBelief, RegressionDatum, adapt_continuous, adapt_discrete,
                            adapt_link_params, broyden_update, discretize_belief, lbr_posterior, lbr_update,
                            read_belief_csv, sample_link_derivatives, symmetrize_psd, write_belief_csv)
from bayesilc.arm import TwoLinkArm, linearize_along
from bayesilc.ltv import CostWeights, Dimensions, LtvModel, StructuralError, Trajectory, TrialRecord


def _belief(p, out_dim, prior=1.0, noise=1.0, forget=1.0, n=1, mean=None):
    mu = np.zeros((n, p)) if mean is None else np.broadcast_to(mean, (n, p))
    return ModelBelief(mu, np.broadcast_to(prior * np.eye(p), (n, p, p)), out_dim, noise, forget)


def test_zero_information_datum_leaves_belief_unchanged():
    rng = np.random.default_rng(0)
    b = ModelBelief(rng.normal(size=(1, 6)), (lambda h: h @ h.T)(rng.normal(size=(6, 6)))[None], 2)
    post = lbr_update(b, RegressionDatum(np.zeros((2, 6)), rng.normal(size=2)), 0)
    assert np.allclose(post.means, b.means, atol=1e-14)
    assert np.allclose(post.covs, b.covs, atol=1e-12)


def test_scalar_bayes_update():
    post = lbr_update(_belief(1, 1), RegressionDatum([[1.0]], [2.0]), 0)
    assert post.means[0, 0] == pytest.approx(1.0)
    assert post.covs[0, 0, 0] == pytest.approx(0.5)


def test_information_form_matches_gain_form():
    rng = np.random.default_rng(1)
    p = 5
    h = rng.normal(size=(p, p))
    cov = h @ h.T + 0.1 * np.eye(p)
    mean = rng.normal(size=p)
    d = rng.normal(size=(3, p))
    y = rng.normal(size=3)
    lam, s2 = 0.7, 0.4
    new_mean, new_cov = lbr_posterior(mean, cov, d, y, s2, lam)
    info = d.T @ d / s2 + lam * np.linalg.inv(cov)
    ref_cov = np.linalg.inv(info)
    ref_mean = lam * ref_cov @ np.linalg.solve(cov, mean) + ref_cov @ d.T @ y / s2
    assert np.allclose(new_cov, ref_cov, atol=1e-10)
    assert np.allclose(new_mean, ref_mean, atol=1e-10)


def test_non_finite_datum_rejected():
    b = _belief(2, 1)
    with pytest.raises(ValueError):
        lbr_update(b, RegressionDatum([[1.0, np.nan]], [1.0]), 0)
    assert np.array_equal(b.means, np.zeros((1, 2)))


def test_design_width_checked():
    with pytest.raises(StructuralError):
        lbr_update(_belief(3, 1), RegressionDatum([[1.0, 2.0]], [1.0]), 0)


def test_broad_prior_converges_to_least_squares():
    rng = np.random.default_rng(2)
    p = 4
    truth = rng.normal(size=p)
    b = _belief(p, 1, prior=1e4)
    rows, ys = [], []
    for _ in range(30):
        d = rng.normal(size=(2, p))
        y = d @ truth + 0.01 * rng.normal(size=2)
        b = lbr_update(b, RegressionDatum(d, y), 0)
        rows.append(d)
        ys.append(y)
    ls = np.linalg.lstsq(np.vstack(rows), np.concatenate(ys), rcond=None)[0]
    assert np.allclose(b.means[0], ls, atol=1e-5)


@settings(max_examples=25, deadline=None)
@given(p=st.integers(1, 5), k=st.integers(1, 8), seed=st.integers(0, 2 ** 31))
def test_sequential_equals_batch(p, k, seed):
    rng = np.random.default_rng(seed)
    data = [RegressionDatum(rng.normal(size=(2, p)), rng.normal(size=2)) for _ in range(k)]
    seq = _belief(p, 1, prior=3.0, noise=0.5)
    for d in data:
        seq = lbr_update(seq, d, 0)
    batch = lbr_update(_belief(p, 1, prior=3.0, noise=0.5), RegressionDatum.stack(data), 0)
    assert np.allclose(seq.means, batch.means, atol=1e-8)
    assert np.allclose(seq.covs, batch.covs, atol=1e-8)


def test_ridge_limit_of_single_update():
    # one update from prior gamma*I is ridge regression with penalty sigma^2/gamma
    rng = np.random.default_rng(3)
    d = rng.normal(size=(6, 3))
    y = rng.normal(size=6)
    gamma, s2 = 2.0, 0.5
    post = lbr_update(_belief(3, 1, prior=gamma, noise=s2), RegressionDatum(d, y), 0)
    ridge = np.linalg.solve(d.T @ d + s2 / gamma * np.eye(3), d.T @ y)
    assert np.allclose(post.means[0], ridge)


def test_covariance_trace_non_increasing():
    rng = np.random.default_rng(4)
    b = _belief(6, 2, prior=1e4, n=3)
    prev = np.trace(b.covs, axis1=1, axis2=2)
    for _ in range(50):
        b = adapt_discrete(b, *_trial_pair(rng, 3, 2, 1))
        tr = np.trace(b.covs, axis1=1, axis2=2)
        assert np.all(tr <= prev * (1 + 1e-12) + 1e-12)
        prev = tr


def _trial_pair(rng, n, s, m):
    w = CostWeights.uniform(n, Dimensions(s, m))
    out = []
    for it in range(2):
        e = rng.normal(size=(n + 1, s))
        out.append(TrialRecord.from_errors(it, e, e, rng.normal(size=(n, m)), w))
    return out


def test_discrete_adaptation_recovers_model():
    rng = np.random.default_rng(5)
    n, s, m = 4, 2, 1
    true = LtvModel.from_arrays(rng.normal(size=(n, s, s)), rng.normal(size=(n, s, m)))
    w = CostWeights.uniform(n, true.dims)
    d = rng.normal(size=(n, s))
    b = ModelBelief.from_model(LtvModel.from_arrays(np.zeros((n, s, s)), np.zeros((n, s, m))), 1e4)

    def trial(it):
        u = rng.normal(size=(n, m))
        e0 = rng.normal(size=s)
        e = true.simulate(e0, u, d)
        return TrialRecord.from_errors(it, e, e, u, w)

    prev = trial(0)
    for it in range(1, 12):
        curr = trial(it)
        b = adapt_discrete(b, prev, curr)
        prev = curr
    assert np.allclose(b.means, true.stacked_params(), atol=1e-4)


def test_broyden_examples():
    f = np.array([[1.0, 2.0], [0.5, -1.0]])
    dx = np.array([0.3, -0.7])
    assert np.allclose(broyden_update(f, dx, f @ dx), f)
    out = broyden_update(np.zeros((2, 2)), [1.0, 0.0], [1.0, 0.0])
    assert np.allclose(out, np.outer([1, 0], [1, 0]))
    with pytest.raises(ValueError):
        broyden_update(f, [0.0, 1e-16], [1.0, 0.0])


@settings(max_examples=30, deadline=None)
@given(s=st.integers(1, 3), c=st.integers(1, 4), seed=st.integers(0, 2 ** 31))
def test_broyden_satisfies_secant_and_matches_lbr_limit(s, c, seed):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(s, c))
    dx = rng.normal(size=c)
    df = rng.normal(size=s)
    out = broyden_update(f, dx, df)
    assert np.allclose(out @ dx, df)
    b = ModelBelief(f.T.reshape(1, -1), np.eye(s * c)[None], s, noise_var=1e-10, forget=1e-10)
    lim = lbr_update(b, RegressionDatum.from_differences(dx, df), 0).mean_matrix(0)
    assert np.linalg.norm(lim - out) <= 1e-4 * max(1.0, np.linalg.norm(out))


def test_from_differences_layout():
    # y = M x with M = [[1, 2], [3, 4]] stored column-major as (1, 3, 2, 4)
    d = RegressionDatum.from_differences([5.0, 6.0], [17.0, 39.0])
    assert np.allclose(d.design @ np.array([1, 3, 2, 4.0]), d.target)


def test_continuous_zero_data_unchanged():
    b = _belief(12, 2, prior=1e4, mean=np.arange(12.0))
    post = adapt_continuous(b, np.zeros(2), np.zeros(4), np.zeros(2), 0)
    assert np.allclose(post.means, b.means)
    assert np.allclose(post.covs, b.covs)


def test_continuous_identification_error_decreases():
    rng = np.random.default_rng(6)
    truth = rng.normal(size=(2, 6))
    b = _belief(12, 2, prior=1e4)
    errs = [np.linalg.norm(b.mean_matrix(0) - truth)]
    for _ in range(10):
        x = rng.normal(size=6)
        b = adapt_continuous(b, truth @ x + 1e-3 * rng.normal(size=2), x[:4], x[4:], 0)
        errs.append(np.linalg.norm(b.mean_matrix(0) - truth))
    assert errs[-1] < 0.01 * errs[0]
    assert errs[-1] < errs[2]


def test_continuous_parameter_count():
    n, m = 2, 2
    assert n * (2 * n + m) == 12 < 2 * n * (2 * n + m)
    disc = discretize_belief(_belief(12, 2, n=3), 0.1)
    assert disc.n_params == 2 * n * (2 * n + m)


def test_discretize_zero_belief():
    dt = 0.05
    disc = discretize_belief(ModelBelief(np.zeros((2, 12)), np.zeros((2, 12, 12)), 2), dt)
    model = disc.to_model(dt)
    expected_a = np.eye(4)
    expected_a[:2, 2:] = dt * np.eye(2)
    assert np.allclose(model.a_mats, expected_a)
    assert np.allclose(model.b_mats, 0.0)
    assert np.allclose(disc.covs, 0.0)


def test_discretize_scalar_variance():
    dt, v = 0.01, 3.0
    cov = np.zeros((1, 12, 12))
    # A_c entry (row 1, col 2) sits at 2 * 2 + 1; it maps to discrete row 3, col 2
    cov[0, 5, 5] = v
    disc = discretize_belief(ModelBelief(np.zeros((1, 12)), cov, 2), dt)
    idx = 2 * 4 + 3
    assert disc.covs[0, idx, idx] == pytest.approx(dt ** 2 * v)
    assert np.count_nonzero(disc.covs[0]) == 1


def test_belief_csv_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    h = rng.normal(size=(3, 6, 6))
    b = ModelBelief(rng.normal(size=(3, 6)), h @ h.transpose(0, 2, 1), 2, 0.3, 0.9)
    write_belief_csv(b, tmp_path / "b.csv")
    back = read_belief_csv(tmp_path / "b.csv")
    assert np.array_equal(back.means, b.means)
    assert np.allclose(back.covs, b.covs, rtol=0, atol=0)
    assert (back.noise_var, back.forget, back.out_dim) == (0.3, 0.9, 2)


def test_symmetrize_psd_clips():
    cov = np.array([[1.0, 2.0], [2.0, 1.0]])
    out = symmetrize_psd(cov)
    assert np.min(np.linalg.eigvalsh(out)) >= -1e-12


def test_belief_validation():
    with pytest.raises(StructuralError):
        ModelBelief(np.zeros((1, 5)), np.zeros((1, 5, 5)), 2)
    with pytest.raises(ValueError):
        ModelBelief(np.zeros((1, 2)), np.array([[[1.0, 1.0], [0.0, 1.0]]]), 1)
    with pytest.raises(ValueError):
        ModelBelief(np.zeros((1, 2)), np.zeros((1, 2, 2)), 1, forget=1.5)


# ------------------------------------------------------------ link parameters

def _exact_trial(arm, rng, n_steps=60, dt=0.01):
    # quadratic joint paths: central differences of the linear velocity are exact
    t = np.arange(n_steps + 1)[:, None] * dt
    q0 = rng.uniform(-1, 1, 2)
    v0 = rng.uniform(-1, 1, 2)
    acc = rng.uniform(-3, 3, 2)
    q = q0 + v0 * t + 0.5 * acc * t ** 2
    qd = v0 + acc * t
    tau = arm.inverse_dynamics(q[:-1], qd[:-1], np.broadcast_to(acc, (n_steps, 2)))
    traj = Trajectory(np.hstack([q, qd]), tau)
    z = np.zeros((n_steps + 1, 4))
    return traj, TrialRecord(0, z, z, np.zeros((n_steps, 2)), 0.0)


def test_link_params_noise_free_recovery():
    rng = np.random.default_rng(8)
    true_arm = TwoLinkArm.default()
    prior_mean = true_arm.theta * rng.uniform(0.8, 1.2, 20)
    params = LinkParams(prior_mean, 1e10 * np.eye(20))
    phis = []
    for _ in range(5):
        traj, trial = _exact_trial(true_arm, rng)
        params = adapt_link_params(params, trial, true_arm, traj, 0.01)
        phis.append(true_arm.regressor(traj.refs[:-1, :2], traj.refs[:-1, 2:],
                                       np.gradient(traj.refs[:, 2:], 0.01, axis=0)[:-1]).reshape(-1, 20))
    # only the regressor's row space is identifiable; compare there
    phi = np.vstack(phis)
    _, sv, vt = np.linalg.svd(phi, full_matrices=False)
    basis = vt[sv > 1e-8 * sv[0]]
    assert basis.shape[0] == true_arm.base_rank
    err = basis @ (params.theta - true_arm.theta)
    assert np.max(np.abs(err)) < 1e-6
    traj, _ = _exact_trial(true_arm, rng)
    q, qd = traj.refs[:-1, :2], traj.refs[:-1, 2:]
    qdd = np.gradient(qd, 0.01, axis=0)
    pred = true_arm.with_theta(params.theta).inverse_dynamics(q, qd, qdd)
    assert np.max(np.abs(pred - traj.nominal_inputs)) < 1e-6


def test_link_params_zero_length_trial():
    arm = TwoLinkArm.default()
    params = LinkParams(arm.theta, np.eye(20))
    trial = TrialRecord(0, np.zeros((1, 4)), np.zeros((1, 4)), np.zeros((0, 2)), 0.0)
    traj = Trajectory(np.zeros((1, 4)), np.zeros((0, 2)))
    assert adapt_link_params(params, trial, arm, traj, 0.01) is params


def test_link_params_broad_prior_dominated_by_data():
    rng = np.random.default_rng(9)
    arm = TwoLinkArm.default()
    params = LinkParams(np.zeros(20), 1e10 * np.eye(20))
    traj, trial = _exact_trial(arm, rng)
    post = adapt_link_params(params, trial, arm, traj, 0.01)
    q, qd = traj.refs[:-1, :2], traj.refs[:-1, 2:]
    pred = arm.with_theta(post.theta).inverse_dynamics(q, qd, np.gradient(qd, 0.01, axis=0))
    assert np.max(np.abs(pred - traj.nominal_inputs)) < 1e-4
    assert np.trace(post.covariance) < np.trace(params.covariance)


def test_static_trial_warns_about_rank():
    arm = TwoLinkArm.default()
    n = 10
    refs = np.tile([0.3, -0.4, 0.0, 0.0], (n + 1, 1))
    traj = Trajectory(refs, np.tile(arm.gravity_torque(refs[0, :2]), (n, 1)))
    z = np.zeros((n + 1, 4))
    with pytest.warns(RuntimeWarning):
        adapt_link_params(LinkParams(arm.theta, np.eye(20)), TrialRecord(0, z, z, np.zeros((n, 2)), 0.0),
                          arm, traj, 0.01)


def test_link_params_validation():
    with pytest.raises(StructuralError):
        LinkParams(np.zeros(7), np.eye(7))
    bad = TwoLinkArm.default().theta.copy()
    bad[0] = -1.0
    with pytest.raises(ValueError):
        LinkParams(bad, np.eye(20)).validate()
    LinkParams(TwoLinkArm.default().theta, np.eye(20)).validate()


def _strike_like(arm, n=12, dt=0.05):
    t = np.arange(n + 1)[:, None] * dt
    q = np.array([-0.5, 1.0]) + np.array([0.8, -0.6]) * np.sin(t)
    qd = np.array([0.8, -0.6]) * np.cos(t)
    qdd = -np.array([0.8, -0.6]) * np.sin(t)
    return Trajectory(np.hstack([q, qd]), arm.inverse_dynamics(q[:-1], qd[:-1], qdd[:-1]))


def test_sampling_with_zero_covariance_is_linearization():
    arm = TwoLinkArm.default()
    traj = _strike_like(arm)
    out = sample_link_derivatives(LinkParams(arm.theta, np.zeros((20, 20))), arm, traj, 5, 0.05,
                                  np.random.default_rng(0))
    ref = linearize_along(arm, traj, 0.05)
    assert np.allclose(out.means, ref.stacked_params(), atol=1e-12)
    assert np.allclose(out.covs, 0.0, atol=1e-20)


def _perturbed(arm):
    sd = 0.05 * np.abs(arm.theta)
    return LinkParams(arm.theta, np.diag(sd ** 2))


def test_sample_covariance_close_to_reference():
    arm = TwoLinkArm.default()
    traj = _strike_like(arm)
    params = _perturbed(arm)
    ref = sample_link_derivatives(params, arm, traj, 10000, 0.05, np.random.default_rng(1))
    est = sample_link_derivatives(params, arm, traj, 100, 0.05, np.random.default_rng(2))
    rel = np.linalg.norm(est.covs - ref.covs) / np.linalg.norm(ref.covs)
    assert rel < 0.3


def test_sample_mean_error_scales_like_inverse_root_n():
    arm = TwoLinkArm.default()
    traj = _strike_like(arm)
    params = _perturbed(arm)
    ref = sample_link_derivatives(params, arm, traj, 10000, 0.05, np.random.default_rng(3)).means
    rng = np.random.default_rng(4)
    err = {}
    for n in (10, 1000):
        err[n] = np.sqrt(np.mean([np.sum((sample_link_derivatives(params, arm, traj, n, 0.05, rng).means - ref) ** 2)
                                  for _ in range(6)]))
    assert 4 < err[10] / err[1000] < 25


def test_sampling_needs_two_samples():
    arm = TwoLinkArm.default()
    with pytest.raises(ValueError):
        sample_link_derivatives(_perturbed(arm), arm, _strike_like(arm), 1, 0.05, np.random.default_rng(0))


def test_sampling_gives_up_when_mass_matrix_never_pd():
    arm = TwoLinkArm.default()
    theta = arm.theta.copy()
    theta[19] = -5.0  # Izz2 so negative the mass matrix cannot be PD
    with pytest.raises(RuntimeError):
        sample_link_derivatives(LinkParams(theta, np.zeros((20, 20))), arm, _strike_like(arm), 4, 0.05,
                                np.random.default_rng(0))


def test_noise_free_lbr_is_weighted_broyden():
    # lam = 1, sigma^2 -> 0 with prior Sigma = W kron I gives the W-weighted secant update
    rng = np.random.default_rng(10)
    s, c = 2, 3
    f = rng.normal(size=(s, c))
    h = rng.normal(size=(c, c))
    w = h @ h.T + 0.5 * np.eye(c)
    dx, df = rng.normal(size=c), rng.normal(size=s)
    b = ModelBelief(f.T.reshape(1, -1), np.kron(w, np.eye(s))[None], s, noise_var=1e-12, forget=1.0)
    lim = lbr_update(b, RegressionDatum.from_differences(dx, df), 0).mean_matrix(0)
    assert np.allclose(lim, broyden_update(f, dx, df, w), atol=1e-8)
