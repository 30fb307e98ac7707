"""Bayesian adaptation of model parameters from trial data.

Parameters are stored per time step as ``vec([A, B])`` (column-major, A first),
so the entry (row c, column a) of the stacked matrix lives at index
``a * out_dim + c``. The same layout is used for the reduced continuous-time
belief over ``[A_c, B_c]`` (rows = joint accelerations).
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .ltv import Dimensions, Horizon, LtvModel, StructuralError, Trajectory, TrialRecord

JITTER = 1e-12


def symmetrize_psd(cov: np.ndarray) -> np.ndarray:
    """(C + C^T) / 2 with eigenvalues floored at zero; works on stacks."""
    sym = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    w, v = np.linalg.eigh(sym)
    if np.all(w >= 0):
        return sym
    w = np.clip(w, 0.0, None)
    out = (v * w[..., None, :]) @ np.swapaxes(v, -1, -2)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


@dataclass(frozen=True)
class ModelBelief:
    """Gaussian belief over per-step parameter vectors.

    ``means`` has shape (N, p) and ``covs`` (N, p, p); ``out_dim`` is the
    number of rows of the parameter matrix, so ``p / out_dim`` is its column
    count.
    """

    means: np.ndarray
    covs: np.ndarray
    out_dim: int
    noise_var: float = 1.0
    forget: float = 1.0

    def __post_init__(self):
        mu = np.array(self.means, dtype=float)
        cov = np.array(self.covs, dtype=float)
        if mu.ndim != 2 or cov.shape != (mu.shape[0], mu.shape[1], mu.shape[1]):
            raise StructuralError(f"means {mu.shape} and covs {cov.shape} are inconsistent")
        if mu.shape[1] % self.out_dim:
            raise StructuralError(f"parameter length {mu.shape[1]} not divisible by out_dim {self.out_dim}")
        if not self.noise_var > 0:
            raise ValueError("noise_var must be positive")
        if not 0 <= self.forget <= 1:
            raise ValueError("forget must lie in [0, 1]")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(cov))):
            raise ValueError("belief contains non-finite values")
        if np.max(np.abs(cov - np.swapaxes(cov, 1, 2)), initial=0.0) > 1e-10 * max(1.0, np.max(np.abs(cov), initial=0.0)):
            raise ValueError("covariances must be symmetric")
        mu.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covs", cov)

    @property
    def n_steps(self) -> int:
        return self.means.shape[0]

    @property
    def n_params(self) -> int:
        return self.means.shape[1]

    @property
    def n_cols(self) -> int:
        return self.n_params // self.out_dim

    def mean_matrix(self, step: int) -> np.ndarray:
        """Mean parameter matrix at ``step``, shape (out_dim, n_cols)."""
        return self.means[step].reshape(self.n_cols, self.out_dim).T

    @classmethod
    def from_model(cls, model: LtvModel, prior_var: float = 1e4, noise_var: float = 1.0,
                   forget: float = 1.0) -> "ModelBelief":
        """Belief centred on ``model`` with isotropic covariance ``prior_var * I``."""
        mu = model.stacked_params()
        p = mu.shape[1]
        covs = np.broadcast_to(prior_var * np.eye(p), (mu.shape[0], p, p))
        return cls(mu, covs, model.dims.state_dim, noise_var, forget)

    def to_model(self, dt: float = 1.0) -> LtvModel:
        s = self.out_dim
        m = self.n_cols - s
        if m < 1:
            raise StructuralError("belief does not describe a square A block plus inputs")
        mats = self.means.reshape(self.n_steps, self.n_cols, s).transpose(0, 2, 1)
        return LtvModel(Horizon(self.n_steps, dt), Dimensions(s, m), mats[:, :, :s], mats[:, :, s:])

    def with_step(self, step: int, mean: np.ndarray, cov: np.ndarray) -> "ModelBelief":
        means = self.means.copy()
        covs = self.covs.copy()
        means[step] = mean
        covs[step] = cov
        return replace(self, means=means, covs=covs)


@dataclass(frozen=True)
class RegressionDatum:
    """Linear observation ``target ~ design @ theta`` with isotropic noise."""

    design: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        d = np.atleast_2d(np.asarray(self.design, dtype=float))
        y = np.asarray(self.target, dtype=float).reshape(-1)
        if d.shape[0] != y.shape[0]:
            raise StructuralError(f"design rows {d.shape[0]} != target length {y.shape[0]}")
        object.__setattr__(self, "design", d)
        object.__setattr__(self, "target", y)

    @classmethod
    def from_differences(cls, regressor, target) -> "RegressionDatum":
        """Build D = regressor^T kron I for a matrix-valued linear model.

        ``regressor`` stacks the state-error and input differences; the row
        count of the parameter matrix is taken from ``target``.
        """
        x = np.asarray(regressor, dtype=float).reshape(-1)
        y = np.asarray(target, dtype=float).reshape(-1)
        return cls(np.kron(x[None, :], np.eye(y.size)), y)

    @classmethod
    def stack(cls, data) -> "RegressionDatum":
        return cls(np.vstack([d.design for d in data]), np.concatenate([d.target for d in data]))


def lbr_posterior(mean, cov, design, target, noise_var: float, forget: float = 1.0):
    """One exponentially weighted Bayesian linear-regression step.

    Algebraically Sigma' = (D^T D / s2 + lam Sigma^-1)^-1 and
    mu' = Sigma' (lam Sigma^-1 mu + D^T y / s2); evaluated in gain form on the
    inflated prior Sigma / lam so a singular prior or lam -> 0 stays usable.
    """
    if not forget > 0:
        raise ValueError("forget must be positive in lbr_posterior; use broyden_update for the lam -> 0 limit")
    design = np.atleast_2d(design)
    if not (np.all(np.isfinite(design)) and np.all(np.isfinite(target))):
        raise ValueError("regression datum contains non-finite values")
    prior = cov / forget
    pd_t = prior @ design.T
    innov_cov = design @ pd_t + noise_var * np.eye(design.shape[0])
    gain = np.linalg.solve(innov_cov, pd_t.T).T
    new_mean = mean + gain @ (target - design @ mean)
    ikd = np.eye(cov.shape[0]) - gain @ design
    # Joseph form keeps the result PSD under rounding.
    new_cov = ikd @ prior @ ikd.T + noise_var * gain @ gain.T
    return new_mean, symmetrize_psd(new_cov)


def lbr_update(belief: ModelBelief, datum: RegressionDatum, step: int) -> ModelBelief:
    if datum.design.shape[1] != belief.n_params:
        raise StructuralError(f"design has {datum.design.shape[1]} columns, belief has {belief.n_params} parameters")
    mean, cov = lbr_posterior(belief.means[step], belief.covs[step], datum.design, datum.target,
                              belief.noise_var, belief.forget)
    return belief.with_step(step, mean, cov)


def lbr_update_all(belief: ModelBelief, data) -> ModelBelief:
    """Apply one datum per step (``None`` skips a step); a single copy of the belief."""
    means = belief.means.copy()
    covs = belief.covs.copy()
    for j, datum in enumerate(data):
        if datum is None:
            continue
        means[j], covs[j] = lbr_posterior(means[j], covs[j], datum.design, datum.target,
                                          belief.noise_var, belief.forget)
    return replace(belief, means=means, covs=covs)


def broyden_update(jacobian_est, dx, df, weight=None) -> np.ndarray:
    """Weighted rank-one secant update.

    Returns the F' closest to F in the metric tr(dF W^-1 dF^T) with
    F' dx = df, i.e. F' = F + (df - F dx) (W dx)^T / (dx^T W dx).
    """
    f = np.asarray(jacobian_est, dtype=float)
    dx = np.asarray(dx, dtype=float).reshape(-1)
    df = np.asarray(df, dtype=float).reshape(-1)
    if np.linalg.norm(dx) < 1e-14:
        raise ValueError("degenerate secant step: ||dx|| < 1e-14")
    w = np.eye(dx.size) if weight is None else np.asarray(weight, dtype=float)
    wdx = w @ dx
    denom = dx @ wdx
    if denom <= 0:
        raise ValueError("weight is not positive along dx")
    return f + np.outer(df - f @ dx, wdx) / denom


def discrete_datum(prev: TrialRecord, curr: TrialRecord, step: int) -> RegressionDatum:
    """Datum relating consecutive trials at one step.

    Target ê_k[j+1] - ê_{k-1}[j+1], regressor (ê_k[j] - ê_{k-1}[j], u_k[j] - u_{k-1}[j]).
    """
    de = curr.filtered_errors[step] - prev.filtered_errors[step]
    du = curr.applied_inputs[step] - prev.applied_inputs[step]
    y = curr.filtered_errors[step + 1] - prev.filtered_errors[step + 1]
    return RegressionDatum.from_differences(np.concatenate([de, du]), y)


def adapt_discrete(belief: ModelBelief, prev: TrialRecord, curr: TrialRecord) -> ModelBelief:
    return lbr_update_all(belief, [discrete_datum(prev, curr, j) for j in range(belief.n_steps)])


def acceleration_estimates(filtered_velocities, dt: float) -> np.ndarray:
    """Central differences (one-sided at the ends) of already smoothed velocities."""
    return np.gradient(np.asarray(filtered_velocities, dtype=float), dt, axis=0)


def adapt_continuous(belief: ModelBelief, accel_diff, error_diff, input_diff, step: int) -> ModelBelief:
    """LBR step on the reduced belief over [A_c(t_j), B_c(t_j)].

    Model: qdd_k - qdd_{k-1} ~ A_c (e_k - e_{k-1}) + B_c (u_k - u_{k-1}).
    """
    x = np.concatenate([np.ravel(error_diff), np.ravel(input_diff)])
    datum = RegressionDatum.from_differences(x, accel_diff)
    return lbr_update(belief, datum, step)


def continuous_data(prev: TrialRecord, curr: TrialRecord, n_joints: int, dt: float):
    vel_prev = prev.filtered_errors[:, n_joints:]
    vel_curr = curr.filtered_errors[:, n_joints:]
    acc_diff = acceleration_estimates(vel_curr, dt) - acceleration_estimates(vel_prev, dt)
    de = curr.filtered_errors - prev.filtered_errors
    du = curr.applied_inputs - prev.applied_inputs
    return [
        RegressionDatum.from_differences(np.concatenate([de[j], du[j]]), acc_diff[j])
        for j in range(du.shape[0])
    ]


def adapt_continuous_all(belief: ModelBelief, prev: TrialRecord, curr: TrialRecord, dt: float) -> ModelBelief:
    return lbr_update_all(belief, continuous_data(prev, curr, belief.out_dim, dt))


def _embedding(n: int, m: int, dt: float) -> np.ndarray:
    """Linear map from vec([A_c, B_c]) (n rows) into vec([A_d, B_d]) (2n rows)."""
    cols = 2 * n + m
    emb = np.zeros((2 * n * cols, n * cols))
    for a in range(cols):
        for c in range(n):
            emb[a * 2 * n + n + c, a * n + c] = dt
    return emb


def discretize_belief(cont: ModelBelief, dt: float) -> ModelBelief:
    """Euler embedding A_d = I + dt [[0, I], A_c], B_d = dt [[0], B_c].

    The covariance is pushed through the same linear map, so only the
    velocity rows carry uncertainty, scaled by dt^2.
    """
    n = cont.out_dim
    cols = cont.n_cols
    m = cols - 2 * n
    if m < 1:
        raise StructuralError("continuous belief must have 2n state columns plus inputs")
    emb = _embedding(n, m, dt)
    offset = np.zeros((2 * n, cols))
    offset[:, :2 * n] = np.eye(2 * n)
    offset[:n, n:2 * n] += dt * np.eye(n)
    offset_vec = offset.T.reshape(-1)
    means = offset_vec + cont.means @ emb.T
    covs = emb @ cont.covs @ emb.T
    return ModelBelief(means, 0.5 * (covs + np.swapaxes(covs, 1, 2)), 2 * n, cont.noise_var, cont.forget)


@dataclass(frozen=True)
class LinkParams:
    """Per-link (m, m*cx, m*cy, m*cz, Ixx, Ixy, Ixz, Iyy, Iyz, Izz).

    First moments and inertias are taken about the link frame origin, which is
    the parametrization in which inverse dynamics is linear.
    """

    theta: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        th = np.array(self.theta, dtype=float).reshape(-1)
        cov = np.array(self.covariance, dtype=float)
        if th.size % 10 or cov.shape != (th.size, th.size):
            raise StructuralError(f"theta length {th.size} / covariance {cov.shape} inconsistent")
        cov = 0.5 * (cov + cov.T)
        th.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "theta", th)
        object.__setattr__(self, "covariance", cov)

    @property
    def n_links(self) -> int:
        return self.theta.size // 10

    def validate(self) -> None:
        for i, blk in enumerate(self.theta.reshape(-1, 10)):
            if blk[0] <= 0:
                raise ValueError(f"link {i} mass must be positive")
            ixx, ixy, ixz, iyy, iyz, izz = blk[4:]
            inertia = np.array([[ixx, ixy, ixz], [ixy, iyy, iyz], [ixz, iyz, izz]])
            if np.min(np.linalg.eigvalsh(inertia)) < -1e-12:
                raise ValueError(f"link {i} inertia tensor is not PSD")


def trial_joint_estimates(trial: TrialRecord, trajectory: Trajectory, n_joints: int, dt: float):
    """Smoothed joint positions, velocities and accelerations along a trial."""
    states = trajectory.refs + trial.filtered_errors
    q = states[:, :n_joints]
    qd = states[:, n_joints:]
    qdd = acceleration_estimates(qd, dt)
    return q, qd, qdd


def adapt_link_params(params: LinkParams, trial: TrialRecord, arm, trajectory: Trajectory, dt: float,
                      noise_var: float = 1.0, forget: float = 1.0) -> LinkParams:
    """LBR on link parameters using the inverse-dynamics regressor stacked over the trial."""
    n_steps = trial.applied_inputs.shape[0]
    if n_steps == 0:
        return params
    n = arm.n_joints
    q, qd, qdd = trial_joint_estimates(trial, trajectory, n, dt)
    phi = arm.regressor(q[:n_steps], qd[:n_steps], qdd[:n_steps])
    torques = trajectory.nominal_inputs + trial.applied_inputs
    # Friction is not part of theta; it stays as residual in the target.
    design = phi.reshape(n_steps * n, -1)
    target = torques.reshape(-1)
    rank = np.linalg.matrix_rank(design)
    if rank < arm.base_rank:
        warnings.warn(f"link-parameter regressor rank {rank} below base rank {arm.base_rank}", RuntimeWarning)
    mean, cov = lbr_posterior(params.theta, params.covariance, design, target, noise_var, forget)
    return LinkParams(mean, cov)


def sample_link_derivatives(params: LinkParams, arm, trajectory: Trajectory, n_samples: int, dt: float,
                            rng: np.random.Generator, noise_var: float = 1.0, forget: float = 1.0,
                            return_continuous: bool = False):
    """Monte-Carlo moments of the forward-dynamics Jacobians under the parameter belief."""
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    n = arm.n_joints
    n_steps = trajectory.n_steps
    q = trajectory.refs[:n_steps, :n]
    qd = trajectory.refs[:n_steps, n:]
    tau = trajectory.nominal_inputs
    cov = symmetrize_psd(params.covariance)
    accepted = []
    drawn = 0
    while len(accepted) < n_samples:
        if drawn >= 10 * n_samples:
            raise RuntimeError(f"only {len(accepted)} of {n_samples} parameter samples gave a PD mass matrix")
        batch = rng.multivariate_normal(params.theta, cov, size=n_samples, method="eigh", check_valid="ignore")
        for th in batch:
            drawn += 1
            sampled = arm.with_theta(th)
            if sampled.mass_matrix_pd(q):
                accepted.append(sampled)
                if len(accepted) == n_samples:
                    break
    vecs = np.empty((n_samples, n_steps, n * (3 * n)))
    for i, sampled in enumerate(accepted):
        a_lo, b_lo = sampled.dynamics_jacobians(q, qd, tau)
        lower = np.concatenate([a_lo, b_lo], axis=2)
        vecs[i] = lower.transpose(0, 2, 1).reshape(n_steps, -1)
    mean = vecs.mean(axis=0)
    centred = vecs - mean
    cov = np.einsum("sjp,sjq->jpq", centred, centred) / (n_samples - 1)
    cont = ModelBelief(mean, 0.5 * (cov + np.swapaxes(cov, 1, 2)), n, noise_var, forget)
    if return_continuous:
        return cont
    return discretize_belief(cont, dt)


def write_belief_csv(belief: ModelBelief, path) -> None:
    """One row per step: step, mean vector, row-major lower triangle of the covariance."""
    p = belief.n_params
    rows, cols = np.tril_indices(p)
    header = ["step"] + [f"mu_{i}" for i in range(p)] + [f"cov_{r}_{c}" for r, c in zip(rows, cols)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# out_dim={belief.out_dim},noise_var={belief.noise_var!r},forget={belief.forget!r}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for j in range(belief.n_steps):
            writer.writerow([j] + [repr(float(v)) for v in belief.means[j]]
                            + [repr(float(v)) for v in belief.covs[j][rows, cols]])


def read_belief_csv(path) -> ModelBelief:
    with open(path, encoding="utf-8") as fh:
        meta_line = fh.readline().lstrip("#").strip()
        meta = dict(item.split("=") for item in meta_line.split(","))
        reader = csv.reader(fh)
        header = next(reader)
        p = sum(1 for h in header if h.startswith("mu_"))
        rows, cols = np.tril_indices(p)
        means, covs = [], []
        for rec in reader:
            vals = np.array(rec[1:], dtype=float)
            means.append(vals[:p])
            cov = np.zeros((p, p))
            cov[rows, cols] = vals[p:]
            cov[cols, rows] = vals[p:]
            covs.append(cov)
    return ModelBelief(np.array(means), np.array(covs), int(meta["out_dim"]),
                       float(meta["noise_var"]), float(meta["forget"]))
