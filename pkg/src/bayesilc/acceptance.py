"""Built-in acceptance checks, one function per criterion.

Each check returns a :class:`CheckResult`; ``run_all`` is what ``bayesilc check``
and the acceptance test module call.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .adapt import ModelBelief, RegressionDatum, broyden_update, lbr_update
from .arm import StrikePolynomial
from .baselines import batch_ilc_update, lqr_design
from .cautious import (AffineDisturbance, cautious_backward_pass, expectation_terms,
                       full_backward_pass_with_disturbance, replay_update)
from .experiment import ExperimentManifest, emit_csv, monotone, noise_slack, run_experiment
from .ltv import CostWeights, LiftedModel, LtvModel, lifted_matrix


@dataclass
class CheckResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    data: dict = field(default_factory=dict, repr=False)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.number:2d} {self.name}: {self.detail} ({self.seconds:.1f}s)"


# ------------------------------------------------------------ paper settings

def random_ltv_manifest(alpha: float, **kw) -> ExperimentManifest:
    base = dict(family="random-ltv", n_steps=120, state_dim=2, input_dim=2, alpha=alpha, q_scale=1.0,
                r_scale=1e-6, iterations=20, reps=10, seed=0, noise_sd=1e-3)
    base.update(kw)
    return ExperimentManifest(**base)


def gp_manifest(**kw) -> ExperimentManifest:
    base = dict(family="gp-oracle", n_steps=20, state_dim=2, input_dim=2, gp_rollouts=20, forget=0.9,
                prior_var=1e4, noise_var=1.0, q_scale=1.0, r_scale=1e-6, iterations=20, reps=10, seed=0)
    base.update(kw)
    return ExperimentManifest(**base)


def arm_manifest(**kw) -> ExperimentManifest:
    base = dict(family="two-link-arm", n_steps=100, state_dim=4, input_dim=2, strike_time=1.0,
                forget=0.8, prior_var=1e4, link_prior_var=1e10, noise_var=1.0, q_scale=1.0, r_scale=1e-2,
                law="bayes_cautious", iterations=11, reps=10, seed=0, arm_friction=0.1)
    base.update(kw)
    return ExperimentManifest(**base)


def _random_problem(rng, n_max=5, dim_max=3):
    n = int(rng.integers(1, n_max + 1))
    s = int(rng.integers(1, dim_max + 1))
    m = int(rng.integers(1, dim_max + 1))
    a = rng.normal(size=(n, s, s))
    b = rng.normal(size=(n, s, m))
    q = np.array([np.diag(rng.uniform(0.5, 2.0, s)) for _ in range(n + 1)])
    r = np.array([np.diag(rng.uniform(0.1, 1.0, m)) for _ in range(n)])
    return LtvModel.from_arrays(a, b), CostWeights(q, r)


def _random_cov(rng, p, n=None, scale=0.3):
    shape = (p, p) if n is None else (n, p, p)
    half = rng.normal(size=shape) * scale
    return half @ np.swapaxes(half, -1, -2)


# ----------------------------------------------------------------- checks

def check_qp_oracle(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(25):
        model, w = _random_problem(rng)
        n, s, p = model.horizon.n_steps, model.dims.state_dim, model.dims.n_params
        belief = ModelBelief(model.stacked_params(), np.zeros((n, p, p)), s)
        e = rng.normal(size=(n + 1, s))
        e[0] = 0.0
        du = replay_update(model, cautious_backward_pass(belief, e, w))
        f = lifted_matrix(model.a_mats, model.b_mats)
        qq = scipy.linalg.block_diag(*w.q_mats[1:])
        rr = scipy.linalg.block_diag(*w.r_mats)
        dense = -np.linalg.solve(f.T @ qq @ f + rr, f.T @ qq @ e[1:].reshape(-1))
        worst = max(worst, float(np.max(np.abs(du.reshape(-1) - dense))))
    return CheckResult(1, "oracle equivalence", worst < 1e-8, f"max |du - du_QP| = {worst:.2e} (tol 1e-8)")


def check_disturbance_identity(seed: int = 1) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(25):
        model, w = _random_problem(rng)
        n, s, p = model.horizon.n_steps, model.dims.state_dim, model.dims.n_params
        belief = ModelBelief(model.stacked_params(), _random_cov(rng, p, n), s)
        e = rng.normal(size=(n + 1, s))
        short = cautious_backward_pass(belief, e, w)
        full = full_backward_pass_with_disturbance(belief, AffineDisturbance.from_trial(e), w)
        worst = max(worst,
                    float(np.max(np.abs(short.feedback_gain - full.feedback_gain))),
                    float(np.max(np.abs(short.affine_feedforward() - full.feedforward))),
                    float(np.max(full.extras["cancellation_residual"], initial=0.0)),
                    float(np.max(full.extras["extra_term_residual"], initial=0.0)))
    return CheckResult(2, "disturbance-free identity", worst < 1e-9, f"max deviation {worst:.2e} (tol 1e-9)")


def check_certainty_equivalence(seed: int = 2) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(25):
        model, w = _random_problem(rng)
        n, s, p = model.horizon.n_steps, model.dims.state_dim, model.dims.n_params
        belief = ModelBelief(model.stacked_params(), np.zeros((n, p, p)), s)
        pol = cautious_backward_pass(belief, rng.normal(size=(n + 1, s)), w)
        worst = max(worst, float(np.max(np.abs(pol.feedback_gain - lqr_design(model, w).gains))))
    return CheckResult(3, "certainty equivalence", worst < 1e-10, f"max |K - K_LQR| = {worst:.2e} (tol 1e-10)")


def check_broyden_limit(seed: int = 3) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(100):
        s = int(rng.integers(1, 4))
        c = int(rng.integers(1, 5))
        jac = rng.normal(size=(s, c))
        dx = rng.normal(size=c)
        df = rng.normal(size=s)
        belief = ModelBelief(jac.T.reshape(1, -1), np.eye(s * c)[None], s, noise_var=1e-10, forget=1e-10)
        post = lbr_update(belief, RegressionDatum.from_differences(dx, df), 0).mean_matrix(0)
        ref = broyden_update(jac, dx, df)
        worst = max(worst, float(np.linalg.norm(post - ref) / max(np.linalg.norm(ref), 1e-300)))
    return CheckResult(4, "Broyden limit", worst < 1e-4, f"max relative deviation {worst:.2e} (tol 1e-4)")


def check_covariance_monotone(seed: int = 4) -> CheckResult:
    rng = np.random.default_rng(seed)
    n, s, c = 6, 2, 4
    p = s * c
    belief = ModelBelief(rng.normal(size=(n, p)), _random_cov(rng, p, n, 1.0) + np.eye(p), s, 1.0, 1.0)
    violations = 0
    prev = np.trace(belief.covs, axis1=1, axis2=2)
    for _ in range(50):
        for j in range(n):
            belief = lbr_update(belief, RegressionDatum.from_differences(rng.normal(size=c), rng.normal(size=s)), j)
        tr = np.trace(belief.covs, axis1=1, axis2=2)
        violations += int(np.sum(tr > prev * (1 + 1e-12)))
        prev = tr
    return CheckResult(5, "covariance monotonicity", violations == 0, f"{violations} trace increases over 50 updates")


def check_expectation_mc(seed: int = 5, samples: int = 200_000) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(10):
        s = int(rng.integers(1, 4))
        m = int(rng.integers(1, 4))
        p = s * (s + m)
        mean = rng.normal(size=p)
        cov = _random_cov(rng, p, None, 0.4)
        p_next = _random_cov(rng, s, None, 1.0) + np.eye(s)
        r_mat = np.diag(rng.uniform(0.1, 1.0, m))
        terms = expectation_terms(mean, cov, p_next, r_mat, s, m)
        draws = rng.multivariate_normal(mean, cov, size=samples, method="eigh")
        mats = draws.reshape(samples, s + m, s).transpose(0, 2, 1)
        a, b = mats[:, :, :s], mats[:, :, s:]
        pa, pb = p_next @ a, p_next @ b
        samp = {
            "theta": r_mat + np.swapaxes(b, 1, 2) @ pb,
            "psi": np.swapaxes(b, 1, 2) @ pa,
            "m_mat": np.swapaxes(a, 1, 2) @ pa,
        }
        for key, vals in samp.items():
            est = vals.mean(axis=0)
            se = vals.std(axis=0, ddof=1) / math.sqrt(samples)
            z = np.abs(getattr(terms, key) - est) / np.maximum(se, 1e-300)
            worst = max(worst, float(np.max(np.where(se > 0, z, 0.0))))
    return CheckResult(6, "expectation terms vs Monte Carlo", worst <= 3.0, f"max |z| = {worst:.2f} (tol 3 SE)")


def _rep_costs(log, reps, length):
    out = []
    for c in log.costs(reps):
        c = list(c) + [math.inf] * (length - len(c)) if any(not math.isfinite(x) for x in c) else list(c)
        out.append(np.array(c, dtype=float))
    return out


def check_random_ltv_alpha100(workers: int = 1) -> CheckResult:
    mf = random_ltv_manifest(100.0)
    slack = noise_slack(mf)
    rec = run_experiment(mf, "recursive_plain", workers)
    bat = run_experiment(mf, "batch_pinv", workers)
    rc = _rep_costs(rec, mf.reps, mf.iterations + 1)
    bc = _rep_costs(bat, mf.reps, mf.iterations + 1)
    good = sum(bool(c[-1] < 0.05 * c[0] and monotone(c, 0, slack)) for c in rc)
    worse = sum(bool(b[-1] > r[-1]) for b, r in zip(bc, rc))
    ok = good >= 9 and worse >= 7
    return CheckResult(7, "random LTV, alpha=100", ok,
                       f"recursive converged+monotone on {good}/10 (need 9); batch final worse on {worse}/10 (need 7)",
                       data={"recursive": rc, "batch": bc})


def check_random_ltv_alpha1000(workers: int = 1) -> CheckResult:
    mf = random_ltv_manifest(1000.0, adaptation="lbr-discrete", prior_var=1e4, noise_var=1.0, forget=1.0)
    slack = noise_slack(mf)
    bayes = _rep_costs(run_experiment(mf, "bayes_cautious", workers), mf.reps, mf.iterations + 1)
    plain_log = run_experiment(mf.replace(adaptation="none"), "recursive_plain", workers)
    plain = _rep_costs(plain_log, mf.reps, mf.iterations + 1)
    good = sum(bool(len(c) > 2 and monotone(c, 2, slack) and c[-1] < 0.2 * c[0]) for c in bayes)
    bad = sum(bool(not np.all(np.isfinite(c)) or c[-1] > c[0]) for c in plain)
    ok = good >= 8 and bad >= 5
    return CheckResult(8, "random LTV, alpha=1000", ok,
                       f"bayesILC monotone and below 0.2 J0 on {good}/10 (need 8); recursive diverged on {bad}/10 "
                       f"(need 5)", data={"bayes": bayes, "plain": plain})


def _paired_mean(a, b):
    """Seed-paired means of final costs; seeds whose initial rollout diverged are dropped."""
    keep = [i for i in range(len(a)) if math.isfinite(a[i][0]) and math.isfinite(b[i][0])]
    fa = float(np.mean([a[i][-1] for i in keep])) if keep else math.inf
    fb = float(np.mean([b[i][-1] for i in keep])) if keep else math.inf
    return fa, fb, len(keep)


def check_gp_dynamics(workers: int = 1) -> CheckResult:
    mf = gp_manifest()
    bayes = _rep_costs(run_experiment(mf.replace(adaptation="lbr-discrete", prior_source="isotropic"),
                                      "bayes_cautious", workers), mf.reps, mf.iterations + 1)
    cautious = _rep_costs(run_experiment(mf.replace(adaptation="none", prior_source="plant"), "bayes_cautious",
                                         workers), mf.reps, mf.iterations + 1)
    fb, fc, kept = _paired_mean(bayes, cautious)
    ok = fb < fc
    return CheckResult(9, "GP dynamics", ok,
                       f"paired mean final J: bayesILC {fb:.3g} vs cautious-only {fc:.3g} over {kept} seeds",
                       data={"bayes": bayes, "cautious": cautious})


def check_arm_adaptation(workers: int = 1) -> CheckResult:
    parts = []
    ok = True
    data = {}
    for law in ("lbr-discrete", "lbr-continuous", "link-params"):
        mf = arm_manifest(adaptation=law)
        costs = _rep_costs(run_experiment(mf, "bayes_cautious", workers), mf.reps, mf.iterations + 1)
        j1 = float(np.mean([c[1] for c in costs]))
        j11 = float(np.mean([c[11] for c in costs]))
        red = 1.0 - j11 / j1 if math.isfinite(j11) and j1 > 0 else -math.inf
        ok &= red >= 0.5
        parts.append(f"{law} {100 * red:.0f}%")
        data[law] = costs
    return CheckResult(10, "arm adaptation laws", ok, "mean J reduction 1->11: " + ", ".join(parts) + " (need 50%)",
                       data=data)


def check_initial_conditions(workers: int = 1) -> CheckResult:
    mf = arm_manifest(adaptation="lbr-discrete", init_perturbation=0.05, iterations=10)
    means = {}
    for ic in (True, False):
        rec = run_experiment(mf.replace(ic_adapt=ic), "bayes_cautious", workers)
        means[ic] = [float(np.mean([math.inf if r.diverged else r.final_cost for r in rec.for_rep(k)]))
                     for k in range(mf.reps)]
    wins = sum(a < b for a, b in zip(means[True], means[False]))
    return CheckResult(11, "varying initial conditions", wins >= 8,
                       f"trajectory adaptation lower mean final-state cost on {wins}/10 seeds (need 8)", data=means)


def _best_time(fn, repeats=3):
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def check_complexity(seed: int = 12) -> CheckResult:
    rng = np.random.default_rng(seed)
    s = m = 4
    times_rec, times_bat = {}, {}
    for n in (200, 400):
        a = np.eye(s) + 0.05 * rng.normal(size=(n, s, s))
        b = 0.1 * rng.normal(size=(n, s, m))
        model = LtvModel.from_arrays(a, b)
        w = CostWeights.uniform(n, model.dims, 1.0, 1e-6)
        p = model.dims.n_params
        belief = ModelBelief(model.stacked_params(), np.broadcast_to(1e-4 * np.eye(p), (n, p, p)), s)
        e = rng.normal(size=(n + 1, s))
        lifted = LiftedModel(lifted_matrix(a, b), float("nan"), (s, m))
        u = np.zeros(n * m)
        times_rec[n] = _best_time(lambda: cautious_backward_pass(belief, e, w))
        times_bat[n] = _best_time(lambda: batch_ilc_update(lifted, e[1:].reshape(-1), u), repeats=2)
    r_rec = times_rec[400] / times_rec[200]
    r_bat = times_bat[400] / times_bat[200]
    return CheckResult(12, "complexity scaling", r_rec < 3 and r_bat > 4,
                       f"recursive T(400)/T(200) = {r_rec:.2f} (< 3), batch = {r_bat:.2f} (> 4)")


def check_strike_polynomials(seed: int = 13) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(1000):
        q0, qd0, qf, qdf = rng.uniform(-2, 2, size=(4, 2))
        t = float(rng.uniform(0.2, 2.0))
        poly = StrikePolynomial.from_boundary(q0, qd0, qf, qdf, t)
        q, qd, _ = poly.evaluate(np.array([0.0, t]))
        worst = max(worst, float(np.max(np.abs(np.array([q[0] - q0, qd[0] - qd0, q[1] - qf, qd[1] - qdf])))))
    smooth = StrikePolynomial.from_boundary([0.0], [0.0], [1.0], [0.0], 1.0)
    exact = bool(smooth.a3[0] == -2.0 and smooth.a2[0] == 3.0)
    return CheckResult(13, "strike polynomials", worst < 1e-12 and exact,
                       f"max boundary error {worst:.2e} (tol 1e-12); smoothstep exact: {exact}")


def _csv_without_timing(log) -> str:
    import io

    buf = io.StringIO()
    emit_csv(log, buf)
    return "\n".join(",".join(line.split(",")[:-1]) for line in buf.getvalue().splitlines())


def check_determinism(workers: int = 1) -> CheckResult:
    mf = random_ltv_manifest(100.0, n_steps=30, iterations=4, reps=3, adaptation="lbr-discrete",
                             law="bayes_cautious", prior_var=1e-2)
    first = _csv_without_timing(run_experiment(mf, workers=workers))
    second = _csv_without_timing(run_experiment(mf, workers=max(1, workers)))
    same = first == second
    return CheckResult(14, "determinism", same, "repeated run CSVs identical" if same else "CSV differs")


CHECKS = {
    1: check_qp_oracle,
    2: check_disturbance_identity,
    3: check_certainty_equivalence,
    4: check_broyden_limit,
    5: check_covariance_monotone,
    6: check_expectation_mc,
    7: check_random_ltv_alpha100,
    8: check_random_ltv_alpha1000,
    9: check_gp_dynamics,
    10: check_arm_adaptation,
    11: check_initial_conditions,
    12: check_complexity,
    13: check_strike_polynomials,
    14: check_determinism,
}

_USES_WORKERS = {7, 8, 9, 10, 11, 14}


def run_check(number: int, workers: int = 1) -> CheckResult:
    fn = CHECKS[number]
    t0 = time.perf_counter()
    res = fn(workers) if number in _USES_WORKERS else fn()
    res.seconds = time.perf_counter() - t0
    return res


def run_all(only=None, workers: int = 1) -> list:
    numbers = sorted(only) if only else sorted(CHECKS)
    return [run_check(k, workers) for k in numbers]
