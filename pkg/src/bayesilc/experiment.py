"""Configuration-driven runs of the learning loop over plants and update laws."""
from __future__ import annotations

import configparser
import csv
import dataclasses
import io
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import adapt as adapt_mod
from .adapt import LinkParams, ModelBelief
from .arm import ArmPlant, TwoLinkArm, adapt_to_initial_state, final_state_cost, generate_strike, linearize_along
from .baselines import IlcUpdateLaw, batch_ilc_update, lqr_design, pd_ilc_update
from .benchgen import (GpPlant, LtvPlant, TrialConfig, build_gp_oracle, build_nominal_from_oracle,
                       draw_random_ltv, draw_reference_trajectory, make_mismatched_pair, simulate_trial)
from .cautious import cautious_backward_pass
from .ltv import CostWeights, Dimensions, Horizon, LtvModel, build_lifted

FAMILIES = ("random-ltv", "gp-oracle", "two-link-arm")
LAWS = ("bayes_cautious", "recursive_plain", "batch_pinv", "pd_type")
ADAPTATIONS = ("none", "lbr-discrete", "lbr-continuous", "link-params")
CSV_HEADER = ("rep", "iter", "J", "ident_err", "final_cost", "diverged", "wall_ms")


class ConfigError(ValueError):
    """Invalid or inconsistent experiment manifest."""


# (section, field) layout of the manifest file
_SECTIONS = {
    "plant": ("family", "n_steps", "state_dim", "input_dim", "alpha", "gp_rollouts", "noise_sd",
              "init_perturbation"),
    "law": ("law", "laws", "rate", "p_gain", "d_gain", "pinv_rtol", "feedback_offset"),
    "adaptation": ("adaptation", "forget", "prior_var", "noise_var", "prior_source", "link_prior_var",
                   "link_samples"),
    "weights": ("q_scale", "r_scale"),
    "filter": ("filter_enabled", "cutoff_ratio", "filter_order"),
    "arm": ("strike_time", "perturb_low", "perturb_high", "arm_friction", "ic_adapt"),
    "run": ("iterations", "reps", "seed", "epsilon", "out_dir"),
}


@dataclass(frozen=True)
class ExperimentManifest:
    family: str = "random-ltv"
    n_steps: int = 120
    state_dim: int = 2
    input_dim: int = 2
    alpha: float = 100.0
    gp_rollouts: int = 20
    noise_sd: float = 1e-3
    init_perturbation: float = 0.0
    law: str = "recursive_plain"
    laws: tuple = ()
    rate: float = 1.0
    p_gain: float = 0.0
    d_gain: float = 0.0
    pinv_rtol: float = 0.0
    feedback_offset: str = "raw"
    adaptation: str = "none"
    forget: float = 1.0
    prior_var: float = 1e4
    noise_var: float = 1.0
    prior_source: str = "isotropic"
    link_prior_var: float = 1e10
    link_samples: int = 100
    q_scale: float = 1.0
    r_scale: float = 1e-6
    filter_enabled: bool = True
    cutoff_ratio: float = 0.2
    filter_order: int = 2
    strike_time: float = 1.0
    perturb_low: float = 0.8
    perturb_high: float = 1.2
    arm_friction: float = 0.1
    ic_adapt: bool = True
    iterations: int = 20
    reps: int = 10
    seed: int = 0
    epsilon: float = 1e-3
    out_dir: str = "out"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"plant family must be one of {FAMILIES}, got {self.family!r}")
        for name in (self.law,) + tuple(self.laws):
            if name not in LAWS:
                raise ConfigError(f"update law must be one of {LAWS}, got {name!r}")
        if self.adaptation not in ADAPTATIONS:
            raise ConfigError(f"adaptation must be one of {ADAPTATIONS}, got {self.adaptation!r}")
        if self.adaptation == "link-params" and self.family != "two-link-arm":
            raise ConfigError("link-params adaptation needs the two-link-arm plant")
        if self.adaptation == "lbr-continuous" and self.family != "two-link-arm":
            raise ConfigError("lbr-continuous adaptation needs a mechanical (two-link-arm) plant")
        if self.prior_source not in ("isotropic", "plant"):
            raise ConfigError("prior_source must be 'isotropic' or 'plant'")
        if self.feedback_offset not in ("raw", "filtered"):
            raise ConfigError("feedback_offset must be 'raw' or 'filtered'")
        checks = [
            (self.n_steps >= 7, "n_steps must be >= 7 (filter warm-up)"),
            (self.state_dim >= 1 and self.input_dim >= 1, "dimensions must be >= 1"),
            (self.alpha >= 0, "alpha must be >= 0"),
            (self.gp_rollouts >= 1, "gp_rollouts must be >= 1"),
            (self.noise_sd >= 0, "noise_sd must be >= 0"),
            (self.init_perturbation >= 0, "init_perturbation must be >= 0"),
            (0 < self.rate <= 1, "rate must lie in (0, 1]"),
            (0 < self.forget <= 1, "forget must lie in (0, 1]"),
            (self.prior_var >= 0 and self.link_prior_var > 0, "prior variances must be non-negative"),
            (self.noise_var > 0, "noise_var must be positive"),
            (self.link_samples >= 2, "link_samples must be >= 2"),
            (self.q_scale >= 0 and self.r_scale > 0, "need q_scale >= 0 and r_scale > 0"),
            (0 < self.cutoff_ratio < 1, "cutoff_ratio must lie in (0, 1)"),
            (self.filter_order >= 1, "filter_order must be >= 1"),
            (self.strike_time > 0, "strike_time must be positive"),
            (0 < self.perturb_low <= self.perturb_high, "need 0 < perturb_low <= perturb_high"),
            (self.iterations >= 0 and self.reps >= 1, "need iterations >= 0 and reps >= 1"),
            (self.seed >= 0, "seed must be non-negative"),
            (self.epsilon > 0, "epsilon must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if self.family == "two-link-arm" and (self.state_dim, self.input_dim) != (4, 2):
            raise ConfigError("two-link-arm plant has state_dim=4 and input_dim=2")

    @property
    def law_list(self) -> tuple:
        return tuple(self.laws) or (self.law,)

    def replace(self, **changes) -> "ExperimentManifest":
        return dataclasses.replace(self, **changes)

    # ---- serialization

    def to_ini(self) -> str:
        cfg = configparser.ConfigParser()
        for section, names in _SECTIONS.items():
            cfg[section] = {name: _format_value(getattr(self, name)) for name in names}
        buf = io.StringIO()
        cfg.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentManifest":
        cfg = configparser.ConfigParser()
        try:
            cfg.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse manifest: {exc}") from exc
        defaults = cls()
        values = {}
        known = {name: section for section, names in _SECTIONS.items() for name in names}
        for section in cfg.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown manifest section [{section}]")
            for key, raw in cfg[section].items():
                if known.get(key) != section:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
                values[key] = _parse_value(raw, getattr(defaults, key), key)
        return cls(**values)

    @classmethod
    def load(cls, path) -> "ExperimentManifest":
        with open(path, encoding="utf-8") as fh:
            return cls.from_ini(fh.read())

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_ini())


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(value)
    return str(value)


def _parse_value(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(raw)
            return lowered in ("true", "yes", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(v.strip() for v in raw.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"invalid value {raw!r} for {key}") from exc
    return raw


# --------------------------------------------------------------- run log


@dataclass(frozen=True)
class LogRow:
    rep: int
    iteration: int
    cost: float
    ident_err: float
    final_cost: float
    diverged: bool
    wall_ms: float


@dataclass
class RunLog:
    rows: list = field(default_factory=list)
    law: str = ""

    def costs(self, n_reps: int | None = None) -> list:
        """Per-repetition lists of J_k in iteration order."""
        reps = sorted({r.rep for r in self.rows}) if n_reps is None else range(n_reps)
        return [[r.cost for r in self.rows if r.rep == rep] for rep in reps]

    def for_rep(self, rep: int) -> list:
        return [r for r in self.rows if r.rep == rep]


def emit_csv(log: RunLog, path_or_buffer) -> None:
    """Write the run log with 12 significant digits, UTF-8, newline-terminated rows."""
    if hasattr(path_or_buffer, "write"):
        _write_rows(log, path_or_buffer)
        return
    with open(path_or_buffer, "w", newline="", encoding="utf-8") as fh:
        _write_rows(log, fh)


def _fmt(v: float) -> str:
    return f"{v:.12g}"


def _write_rows(log: RunLog, fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in log.rows:
        writer.writerow([r.rep, r.iteration, _fmt(r.cost), _fmt(r.ident_err), _fmt(r.final_cost),
                         int(r.diverged), _fmt(r.wall_ms)])


def read_csv(path_or_buffer) -> RunLog:
    if hasattr(path_or_buffer, "read"):
        text = path_or_buffer.read()
    else:
        with open(path_or_buffer, encoding="utf-8") as fh:
            text = fh.read()
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) != CSV_HEADER:
        raise ConfigError(f"unexpected CSV header {header}")
    rows = [LogRow(int(r[0]), int(r[1]), float(r[2]), float(r[3]), float(r[4]), bool(int(r[5])), float(r[6]))
            for r in reader]
    return RunLog(rows)


# ----------------------------------------------------------- problem setup


@dataclass
class Problem:
    plant: object
    trajectory: object
    nominal_model: LtvModel
    true_model: LtvModel | None
    weights: CostWeights
    config: TrialConfig
    plant_covs: np.ndarray | None = None
    nominal_arm: TwoLinkArm | None = None
    strike: object = None
    horizon: Horizon | None = None


def _seeds(manifest: ExperimentManifest, rep: int, count: int = 6):
    return np.random.SeedSequence([manifest.seed, rep]).spawn(count)


def identification_error_norm(belief_or_model, true_model: LtvModel) -> float:
    """Frobenius norm of the stacked per-step differences of [A_j, B_j]."""
    if true_model is None:
        return float("nan")
    if isinstance(belief_or_model, ModelBelief):
        means = belief_or_model.means
    else:
        means = belief_or_model.stacked_params()
    return float(np.linalg.norm(means - true_model.stacked_params()))


def build_problem(manifest: ExperimentManifest, rep: int) -> Problem:
    seeds = _seeds(manifest, rep)
    n = manifest.n_steps
    if manifest.family == "random-ltv":
        horizon = Horizon(n, 1.0 / n)
        dims = Dimensions(manifest.state_dim, manifest.input_dim)
        true = draw_random_ltv(dims, horizon, seed=np.random.default_rng(seeds[0]))
        pair = make_mismatched_pair(true, manifest.alpha, seed=seeds[1])
        traj = draw_reference_trajectory(dims, horizon, seed=np.random.default_rng(seeds[2]))
        plant, nominal, true_model, covs = LtvPlant(true), pair.nominal_model, true, None
        arm = strike = None
    elif manifest.family == "gp-oracle":
        horizon = Horizon(n, 1.0 / n)
        dims = Dimensions(manifest.state_dim, manifest.input_dim)
        oracle = build_gp_oracle(dims, horizon, manifest.gp_rollouts, seed=seeds[0])
        nom = build_nominal_from_oracle(oracle, seed=seeds[1])
        plant, traj, nominal, true_model, covs = GpPlant(oracle), nom.trajectory, nom.model, None, nom.covs
        arm = strike = None
    else:
        horizon = Horizon(n, manifest.strike_time / n)
        rng = np.random.default_rng(seeds[0])
        true_arm = TwoLinkArm.default(friction=(manifest.arm_friction,) * 2)
        scale = rng.uniform(manifest.perturb_low, manifest.perturb_high, size=true_arm.theta.size)
        arm = TwoLinkArm.default().with_theta(true_arm.theta * scale)
        q0 = np.array([-0.6, 0.9]) + rng.uniform(-0.2, 0.2, 2)
        qf = q0 + rng.uniform(0.4, 0.9, 2) * np.array([1.0, -1.0])
        qdf = rng.uniform(1.0, 2.5, 2) * np.array([1.0, -1.0])
        strike, traj = generate_strike(q0, np.zeros(2), qf, qdf, manifest.strike_time, horizon, arm)
        plant = ArmPlant(true_arm, horizon.dt)
        nominal = linearize_along(arm, traj, horizon.dt)
        true_model = linearize_along(true_arm, traj, horizon.dt)
        covs = None
    dims_q = nominal.dims
    weights = CostWeights.uniform(n, dims_q, manifest.q_scale, manifest.r_scale)
    cfg = TrialConfig(weights, manifest.noise_sd, manifest.cutoff_ratio, manifest.filter_order,
                      manifest.filter_enabled)
    return Problem(plant, traj, nominal, true_model, weights, cfg, covs, arm, strike, horizon)


def initial_belief(manifest: ExperimentManifest, problem: Problem) -> ModelBelief:
    model = problem.nominal_model
    if manifest.prior_source == "plant" and problem.plant_covs is not None:
        return ModelBelief(model.stacked_params(), problem.plant_covs, model.dims.state_dim, manifest.noise_var,
                           manifest.forget)
    return ModelBelief.from_model(model, manifest.prior_var, manifest.noise_var, manifest.forget)


def _mean_only(belief: ModelBelief) -> ModelBelief:
    return ModelBelief(belief.means, np.zeros_like(belief.covs), belief.out_dim, belief.noise_var, belief.forget)


class Adapter:
    """Belief over the linearized dynamics, maintained by one of the adaptation laws.

    The posterior covariance is always tracked; ``policy_belief`` hides it
    from the backward pass for the non-cautious laws.
    """

    def __init__(self, manifest: ExperimentManifest, problem: Problem, rng: np.random.Generator):
        self.manifest = manifest
        self.problem = problem
        self.kind = manifest.adaptation
        self.rng = rng
        model = problem.nominal_model
        self.dt = model.horizon.dt
        self.belief = initial_belief(manifest, problem)
        if self.kind == "lbr-continuous":
            s = model.dims.state_dim
            n_j = s // 2
            # reduced belief over the acceleration rows of [A_c, B_c]
            a_c = (model.a_mats - np.eye(s)) / self.dt
            b_c = model.b_mats / self.dt
            lower = np.concatenate([a_c[:, n_j:, :], b_c[:, n_j:, :]], axis=2)
            mu = lower.transpose(0, 2, 1).reshape(lower.shape[0], -1)
            p = mu.shape[1]
            covs = np.broadcast_to(manifest.prior_var * np.eye(p), (mu.shape[0], p, p))
            self.cont = ModelBelief(mu, covs, n_j, manifest.noise_var, manifest.forget)
            self.belief = adapt_mod.discretize_belief(self.cont, self.dt)
        elif self.kind == "link-params":
            th = problem.nominal_arm.theta
            self.params = LinkParams(th, manifest.link_prior_var * np.eye(th.size))

    def policy_belief(self, cautious: bool) -> ModelBelief:
        return self.belief if cautious else _mean_only(self.belief)

    def observe_first(self, trial, trajectory) -> None:
        # Link parameters need a single trial, so the initial rollout is used too.
        if self.kind == "link-params":
            self._link_update(trial, trajectory)

    def observe(self, prev, curr, trajectory) -> None:
        if self.kind == "lbr-discrete":
            self.belief = adapt_mod.adapt_discrete(self.belief, prev, curr)
        elif self.kind == "lbr-continuous":
            self.cont = adapt_mod.adapt_continuous_all(self.cont, prev, curr, self.dt)
            self.belief = adapt_mod.discretize_belief(self.cont, self.dt)
        elif self.kind == "link-params":
            self._link_update(curr, trajectory)

    def _link_update(self, trial, trajectory) -> None:
        pr, mf = self.problem, self.manifest
        self.params = adapt_mod.adapt_link_params(self.params, trial, pr.nominal_arm, trajectory, self.dt,
                                                  mf.noise_var, mf.forget)
        self.belief = adapt_mod.sample_link_derivatives(self.params, pr.nominal_arm, pr.trajectory,
                                                        mf.link_samples, self.dt, self.rng, mf.noise_var,
                                                        mf.forget)


def _initial_state(manifest: ExperimentManifest, problem: Problem, rng: np.random.Generator):
    """Per-trial start: (trajectory to track, offset of x_0 from its first reference point).

    Arm runs perturb the joint angles; with ``ic_adapt`` the strike is
    regenerated from the perturbed start so the offset vanishes.
    """
    traj = problem.trajectory
    s = traj.refs.shape[1]
    if manifest.init_perturbation <= 0:
        return traj, None
    amp = manifest.init_perturbation
    if problem.strike is None:
        return traj, rng.uniform(-amp, amp, s)
    n_j = s // 2
    dq = rng.uniform(-amp, amp, n_j)
    if manifest.ic_adapt:
        active, _ = adapt_to_initial_state(problem.strike, problem.strike.q0 + dq, problem.strike.qdot0,
                                           problem.nominal_arm, np.zeros_like(traj.nominal_inputs),
                                           problem.horizon)
        return active, None
    pert = np.zeros(s)
    pert[:n_j] = dq
    return traj, pert


def run_single(manifest: ExperimentManifest, rep: int, law: str | None = None) -> list:
    """One repetition of the learning loop; returns its log rows.

    Trial 0 runs the nominal LQR feedback with zero feedforward. Afterwards
    the recursive laws apply u_{k+1} = u_k + du_k with feedback
    K_j (e_{k+1,j} - e_{k,j}) about the previous measured error, while the
    batch and PD laws run open loop.
    """
    law = law or manifest.law
    problem = build_problem(manifest, rep)
    seeds = _seeds(manifest, rep)
    noise_rng = np.random.default_rng(seeds[3])
    ic_rng = np.random.default_rng(seeds[4])
    weights, cfg = problem.weights, problem.config
    traj = problem.trajectory
    n, m = traj.nominal_inputs.shape
    s = traj.refs.shape[1]
    adapter = Adapter(manifest, problem, np.random.default_rng(seeds[5]))
    update_law = IlcUpdateLaw(law, manifest.rate, manifest.p_gain, manifest.d_gain, manifest.pinv_rtol or None)
    cautious = law == "bayes_cautious"
    rows = []

    def record(k, trial, active, t0):
        final = float("nan")
        if problem.strike is not None:
            final = final_state_cost(trial, problem.strike.qf, problem.strike.qdotf, active)
        ident = identification_error_norm(adapter.belief, problem.true_model)
        rows.append(LogRow(rep, k, trial.error_norm, ident, final, trial.diverged,
                           1e3 * (time.perf_counter() - t0)))

    def execute(k, ff, gains, offsets):
        active, pert = _initial_state(manifest, problem, ic_rng)
        trial = simulate_trial(problem.plant, active, ff, cfg, gains, offsets, pert, noise_rng, k)
        return trial, active

    t0 = time.perf_counter()
    lqr_gains = lqr_design(problem.nominal_model, weights).gains
    curr, active = execute(0, np.zeros((n, m)), lqr_gains, None)
    if not curr.diverged:
        try:
            adapter.observe_first(curr, active)
        except (RuntimeError, FloatingPointError, ValueError, np.linalg.LinAlgError):
            curr = dataclasses.replace(curr, diverged=True)
    record(0, curr, active, t0)
    lifted = build_lifted(problem.nominal_model) if law == "batch_pinv" else None
    for k in range(1, manifest.iterations + 1):
        if curr.diverged or curr.error_norm < manifest.epsilon:
            break
        t0 = time.perf_counter()
        offsets = curr.raw_errors if manifest.feedback_offset == "raw" else curr.filtered_errors
        base = curr.applied_inputs
        if law in ("bayes_cautious", "recursive_plain"):
            try:
                policy = cautious_backward_pass(adapter.policy_belief(cautious), curr.filtered_errors, weights)
            except (FloatingPointError, np.linalg.LinAlgError):
                rows.append(LogRow(rep, k, float("inf"), float("nan"), float("nan"), True,
                                   1e3 * (time.perf_counter() - t0)))
                break
            new, active = execute(k, base + update_law.rate * policy.feedforward, policy.feedback_gain, offsets)
        elif law == "batch_pinv":
            if adapter.kind != "none":
                lifted = build_lifted(adapter.belief.to_model(adapter.dt))
            u_next = batch_ilc_update(lifted, curr.filtered_errors[1:].reshape(-1), base.reshape(-1),
                                      update_law.rate, update_law.pinv_rtol)
            new, active = execute(k, u_next.reshape(n, m), None, None)
        else:
            delta = pd_ilc_update(curr.filtered_errors, _pd_gain(update_law.p_gain, m, s),
                                  _pd_gain(update_law.d_gain, m, s), adapter.dt)
            new, active = execute(k, base - delta, None, None)
        if not new.diverged:
            try:
                adapter.observe(curr, new, active)
            except (RuntimeError, FloatingPointError, ValueError, np.linalg.LinAlgError):
                # belief update broke down (e.g. no PD parameter samples): the rep is lost
                new = dataclasses.replace(new, diverged=True)
        record(k, new, active, t0)
        curr = new
    return rows


def _pd_gain(g: float, m: int, s: int):
    if m == s:
        return g
    # Arm: act on the joint-position (first m) coordinates.
    mat = np.zeros((m, s))
    mat[:, :m] = g * np.eye(m)
    return mat


def run_experiment(manifest: ExperimentManifest, law: str | None = None, workers: int = 1) -> RunLog:
    """All repetitions of one update law, rows sorted by (rep, iter)."""
    reps = range(manifest.reps)
    if workers > 1 and manifest.reps > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_single, [manifest] * manifest.reps, reps, [law] * manifest.reps))
    else:
        results = [run_single(manifest, r, law) for r in reps]
    rows = [row for part in results for row in part]
    return RunLog(rows, law or manifest.law)


def monotone(costs, start: int = 0, slack: float = 0.0) -> bool:
    """True when J_{k+1} <= J_k + slack for all k >= start and nothing diverged."""
    c = np.asarray(costs, dtype=float)
    if not np.all(np.isfinite(c)):
        return False
    d = np.diff(c[start:])
    return bool(np.all(d <= slack))


def noise_slack(manifest: ExperimentManifest) -> float:
    """Norm of one trial's measurement noise, sigma sqrt(N s): changes below it are not resolvable."""
    return manifest.noise_sd * math.sqrt(manifest.n_steps * manifest.state_dim)


@dataclass
class LawSummary:
    law: str
    mean: np.ndarray
    sd: np.ndarray
    monotone_fraction: float
    logs: RunLog


def compare_laws(manifest: ExperimentManifest, laws=None, workers: int = 1) -> dict:
    """Run every law on identical seeds; mean/sd of J_k per iteration and monotone fraction."""
    laws = tuple(laws or manifest.law_list)
    out = {}
    slack = noise_slack(manifest)
    for law in laws:
        log = run_experiment(manifest, law, workers)
        per_rep = log.costs(manifest.reps)
        length = manifest.iterations + 1
        mat = np.full((len(per_rep), length), np.nan)
        for i, c in enumerate(per_rep):
            mat[i, :len(c)] = c
            if c and not math.isfinite(c[-1]):
                mat[i, len(c):] = math.inf
        # missing cells come from epsilon termination; diverged cells are inf and propagate
        with np.errstate(invalid="ignore"), warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            mean = np.nanmean(mat, axis=0)
            sd = np.nanstd(mat, axis=0)
        frac = float(np.mean([monotone(c, 0, slack) for c in per_rep]))
        out[law] = LawSummary(law, mean, sd, frac, log)
    return out


def format_summary(summary: dict) -> str:
    lines = []
    laws = list(summary)
    lines.append("iter," + ",".join(f"{l}_mean,{l}_sd" for l in laws))
    length = max(len(s.mean) for s in summary.values())
    for k in range(length):
        cells = []
        for law in laws:
            s = summary[law]
            cells += [_fmt(s.mean[k]) if k < len(s.mean) else "", _fmt(s.sd[k]) if k < len(s.sd) else ""]
        lines.append(f"{k}," + ",".join(cells))
    lines.append("monotone_fraction," + ",".join(f"{_fmt(summary[l].monotone_fraction)}," for l in laws)[:-1])
    return "\n".join(lines) + "\n"
