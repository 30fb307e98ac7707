"""Plant oracles and randomized problem generators.

Random LTV plants have every entry of (A_c(t), B_c(t)) drawn from an
independent squared-exponential GP over time. The GP-dynamics oracle is a set
of GPs over (state, input) that is sampled sequentially along rollouts and then
used through its posterior mean as the true nonlinear plant.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize

from .ltv import (CostWeights, Dimensions, Horizon, LtvModel, StructuralError, Trajectory, TrialRecord,
                  discretize_euler, lifted_matrix, zero_phase_filter)

GP_JITTER = 1e-10
DIVERGENCE_THRESHOLD = 1e6
DEFAULT_NOISE_SD = 1e-3


@dataclass(frozen=True)
class GpSpec:
    lengthscale: float
    signal_var: float
    noise_var: float = 0.0
    mean_fn: str = "zero"

    def __post_init__(self):
        if not self.lengthscale > 0:
            raise ValueError("lengthscale must be positive")
        if self.signal_var < 0 or self.noise_var < 0:
            raise ValueError("variances must be non-negative")
        if self.mean_fn not in ("zero", "linear"):
            raise ValueError(f"mean_fn must be 'zero' or 'linear', got {self.mean_fn!r}")


@dataclass(frozen=True)
class GpHyperPrior:
    """Hyperparameter randomization; lengths are fractions of the horizon duration."""

    lengthscale_mean: float = 0.5
    lengthscale_sd: float = 0.1
    signal_sd_mean: float = 1.0
    signal_sd_sd: float = 0.2

    def draw(self, rng: np.random.Generator, duration: float = 1.0) -> GpSpec:
        ell = abs(rng.normal(self.lengthscale_mean, self.lengthscale_sd)) * duration
        sd = abs(rng.normal(self.signal_sd_mean, self.signal_sd_sd))
        return GpSpec(max(ell, 1e-3 * duration), sd ** 2)


def se_kernel(x1, x2, lengthscale: float, signal_var: float) -> np.ndarray:
    """SE kernel between row-stacked inputs; 1-D arrays are treated as scalar inputs."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    x1 = x1[:, None] if x1.ndim == 1 else x1
    x2 = x2[:, None] if x2.ndim == 1 else x2
    sq = np.sum(x1 ** 2, 1)[:, None] + np.sum(x2 ** 2, 1)[None, :] - 2 * x1 @ x2.T
    return signal_var * np.exp(-0.5 * np.maximum(sq, 0.0) / lengthscale ** 2)


def sample_gp_paths(times, spec: GpSpec, rng: np.random.Generator, size: int = 1) -> np.ndarray:
    """Prior sample paths at ``times``, shape (size, len(times)).

    Uses the symmetric eigendecomposition with negative eigenvalues clipped,
    so nearly singular kernels (very long lengthscales) sample without jitter.
    """
    t = np.asarray(times, dtype=float)
    k = se_kernel(t[:, None], t[:, None], spec.lengthscale, spec.signal_var)
    if spec.noise_var:
        k = k + spec.noise_var * np.eye(t.size)
    w, v = np.linalg.eigh(k)
    if not np.all(np.isfinite(w)):
        raise np.linalg.LinAlgError("kernel matrix eigendecomposition failed")
    root = v * np.sqrt(np.clip(w, 0.0, None))
    return rng.standard_normal((size, t.size)) @ root.T


def draw_random_ltv(dims: Dimensions, horizon: Horizon, hyper_prior: GpHyperPrior | None = None,
                    seed: int | np.random.Generator = 0) -> LtvModel:
    """LTV model whose continuous-time entries are independent GP paths over time."""
    rng = np.random.default_rng(seed)
    prior = hyper_prior or GpHyperPrior()
    a_c, b_c = _gp_matrices(dims, horizon, prior, rng)
    a, b = discretize_euler(a_c, b_c, horizon.dt)
    return LtvModel(horizon, dims, a, b)


def _gp_matrices(dims, horizon, prior, rng):
    s, m = dims.state_dim, dims.input_dim
    n = horizon.n_steps
    times = np.arange(n) * horizon.dt
    entries = np.empty((s * (s + m), n))
    for i in range(entries.shape[0]):
        entries[i] = sample_gp_paths(times, prior.draw(rng, horizon.duration), rng)[0]
    mats = entries.T.reshape(n, s, s + m)
    return mats[:, :, :s], mats[:, :, s:]


@dataclass(frozen=True)
class RandomLtvPlant:
    true_model: LtvModel
    nominal_model: LtvModel
    mismatch_alpha: float
    seed: int
    perturbation_scale: float = 0.0


def lifted_mismatch(true_model: LtvModel, nominal_model: LtvModel) -> float:
    f_t = lifted_matrix(true_model.a_mats, true_model.b_mats)
    f_n = lifted_matrix(nominal_model.a_mats, nominal_model.b_mats)
    return float(np.linalg.norm(f_n - f_t, 2))


def make_mismatched_pair(true_model: LtvModel, alpha: float, seed: int = 0,
                         hyper_prior: GpHyperPrior | None = None) -> RandomLtvPlant:
    """Nominal model = true + c * (GP perturbation), c set so ||F_nom - F_true||_2 = alpha sigma_min(F_true)."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    f_true = lifted_matrix(true_model.a_mats, true_model.b_mats)
    sv = np.linalg.svd(f_true, compute_uv=False)
    if sv[-1] < 1e-14:
        raise ValueError(f"degenerate plant: sigma_min(F) = {sv[-1]:.3e}")
    if alpha == 0:
        return RandomLtvPlant(true_model, true_model, 0.0, seed)
    target = alpha * sv[-1]
    rng = np.random.default_rng(seed)
    d_ac, d_bc = _gp_matrices(true_model.dims, true_model.horizon, hyper_prior or GpHyperPrior(), rng)
    dt = true_model.horizon.dt
    d_a, d_b = dt * d_ac, dt * d_bc

    def gap(c):
        f_n = lifted_matrix(true_model.a_mats + c * d_a, true_model.b_mats + c * d_b)
        return np.linalg.norm(f_n - f_true, 2) - target

    hi = 1.0
    while gap(hi) < 0:
        hi *= 2.0
        if hi > 1e12:
            raise RuntimeError("could not bracket the mismatch scale")
    c = scipy.optimize.brentq(gap, 0.0, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    nominal = LtvModel(true_model.horizon, true_model.dims, true_model.a_mats + c * d_a,
                       true_model.b_mats + c * d_b)
    return RandomLtvPlant(true_model, nominal, float(alpha), seed, float(c))


def draw_reference_trajectory(dims: Dimensions, horizon: Horizon, gp_spec: GpSpec | GpHyperPrior | None = None,
                              seed: int | np.random.Generator = 0) -> Trajectory:
    """One GP path per state coordinate on the N+1 grid; zero nominal inputs."""
    rng = np.random.default_rng(seed)
    refs = np.empty((horizon.n_steps + 1, dims.state_dim))
    for i in range(dims.state_dim):
        spec = gp_spec if isinstance(gp_spec, GpSpec) else (gp_spec or GpHyperPrior()).draw(rng, horizon.duration)
        refs[:, i] = sample_gp_paths(horizon.times, spec, rng)[0]
    return Trajectory(refs, np.zeros((horizon.n_steps, dims.input_dim)))


# ---------------------------------------------------------------- GP dynamics


class _IncrementalGp:
    """Exact GP over R^d with an SE kernel, a fixed linear mean and rank-one Cholesky growth."""

    def __init__(self, spec: GpSpec, weights: np.ndarray, dim: int):
        self.spec = spec
        self.weights = np.asarray(weights, dtype=float)
        self.dim = dim
        self.inputs = np.empty((0, dim))
        self.targets = np.empty(0)
        self.chol = np.empty((0, 0))
        self._alpha = None

    @property
    def jitter(self) -> float:
        return self.spec.noise_var + GP_JITTER * self.spec.signal_var

    def kern(self, x1, x2):
        return se_kernel(x1, x2, self.spec.lengthscale, self.spec.signal_var)

    def mean_fn(self, x):
        return np.atleast_2d(x) @ self.weights

    def predict_point(self, x):
        """Posterior mean and variance at a single input."""
        x = np.asarray(x, dtype=float)[None, :]
        if self.targets.size == 0:
            return float(self.mean_fn(x)[0]), self.spec.signal_var
        k_star = self.kern(self.inputs, x)[:, 0]
        v = scipy.linalg.solve_triangular(self.chol, k_star, lower=True)
        mu = float(self.mean_fn(x)[0] + k_star @ self.alpha)
        var = max(self.spec.signal_var - v @ v, 0.0)
        return mu, var

    @property
    def alpha(self):
        if self._alpha is None:
            resid = self.targets - self.mean_fn(self.inputs)
            self._alpha = scipy.linalg.cho_solve((self.chol, True), resid)
        return self._alpha

    def add(self, x, y):
        x = np.asarray(x, dtype=float)[None, :]
        k_new = self.kern(x, x)[0, 0] + self.jitter
        if self.targets.size:
            k_star = self.kern(self.inputs, x)[:, 0]
            v = scipy.linalg.solve_triangular(self.chol, k_star, lower=True)
            d2 = k_new - v @ v
        else:
            v = np.empty(0)
            d2 = k_new
        if not d2 > 0:
            raise np.linalg.LinAlgError("GP kernel matrix lost positive definiteness while conditioning")
        n = self.targets.size
        chol = np.zeros((n + 1, n + 1))
        chol[:n, :n] = self.chol
        chol[n, :n] = v
        chol[n, n] = np.sqrt(d2)
        self.chol = chol
        self.inputs = np.vstack([self.inputs, x])
        self.targets = np.append(self.targets, y)
        self._alpha = None

    def mean(self, x):
        x = np.atleast_2d(x)
        m = self.mean_fn(x)
        if self.targets.size:
            m = m + self.kern(x, self.inputs) @ self.alpha
        return m

    def gradient(self, x):
        """Posterior mean gradient and its covariance at one input."""
        x = np.asarray(x, dtype=float)
        ell2 = self.spec.lengthscale ** 2
        prior_cov = self.spec.signal_var / ell2 * np.eye(self.dim)
        if self.targets.size == 0:
            return self.weights.copy(), prior_cov
        k_star = self.kern(self.inputs, x[None, :])[:, 0]
        # d k(x, z_i) / dx = -(x - z_i) / ell^2 k(x, z_i)
        dk = -(x[None, :] - self.inputs) / ell2 * k_star[:, None]
        grad = self.weights + dk.T @ self.alpha
        w = scipy.linalg.solve_triangular(self.chol, dk, lower=True)
        cov = prior_cov - w.T @ w
        return grad, 0.5 * (cov + cov.T)


@dataclass
class GpDynamicsOracle:
    """n state-derivative GPs over (x, u) plus m control GPs over time."""

    dims: Dimensions
    horizon: Horizon
    state_gps: list = field(repr=False)
    control_specs: list = field(repr=False)
    rollouts: list = field(default_factory=list, repr=False)
    seed: int = 0

    def mean_derivative(self, x, u) -> np.ndarray:
        z = np.concatenate([x, u])[None, :]
        return np.array([gp.mean(z)[0] for gp in self.state_gps])

    def mean_step(self, x, u) -> np.ndarray:
        return x + self.horizon.dt * self.mean_derivative(x, u)

    def rollout_mean(self, inputs, x0=None) -> np.ndarray:
        n = self.horizon.n_steps
        xs = np.zeros((n + 1, self.dims.state_dim))
        if x0 is not None:
            xs[0] = x0
        for j in range(n):
            xs[j + 1] = self.mean_step(xs[j], inputs[j])
        return xs

    def draw_controls(self, rng: np.random.Generator) -> np.ndarray:
        times = np.arange(self.horizon.n_steps) * self.horizon.dt
        return np.stack([sample_gp_paths(times, spec, rng)[0] for spec in self.control_specs], axis=1)


class OracleScales:
    """Defaults for the GP-dynamics family (not given by the method description)."""

    state_lengthscale = 2.0
    linear_mean_sd = 1.0


def _oracle_hyper(rng: np.random.Generator, dim: int, prior: GpHyperPrior) -> tuple[GpSpec, np.ndarray]:
    # Lengthscales live in (state, input) units here; the prior fraction is applied to unit scale.
    spec = GpSpec(max(abs(rng.normal(prior.lengthscale_mean, prior.lengthscale_sd)), 1e-3) * OracleScales.state_lengthscale,
                  abs(rng.normal(prior.signal_sd_mean, prior.signal_sd_sd)) ** 2, 0.0, "linear")
    weights = rng.normal(0.0, OracleScales.linear_mean_sd, size=dim)
    return spec, weights


def build_gp_oracle(dims: Dimensions, horizon: Horizon, n_rollouts: int = 20, seed: int = 0,
                    hyper_prior: GpHyperPrior | None = None) -> GpDynamicsOracle:
    """Sample K rollouts from zero state, conditioning the oracle GPs along the way."""
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    rng = np.random.default_rng(seed)
    prior = hyper_prior or GpHyperPrior()
    d = dims.state_dim + dims.input_dim
    gps = []
    for _ in range(dims.state_dim):
        spec, w = _oracle_hyper(rng, d, prior)
        gps.append(_IncrementalGp(spec, w, d))
    control_specs = [prior.draw(rng, horizon.duration) for _ in range(dims.input_dim)]
    oracle = GpDynamicsOracle(dims, horizon, gps, control_specs, [], int(seed) if np.isscalar(seed) else 0)
    n = horizon.n_steps
    for _ in range(n_rollouts):
        v = oracle.draw_controls(rng)
        xs = np.zeros((n + 1, dims.state_dim))
        for j in range(n):
            z = np.concatenate([xs[j], v[j]])
            f = np.empty(dims.state_dim)
            for i, gp in enumerate(gps):
                mu, var = gp.predict_point(z)
                f[i] = mu + np.sqrt(var) * rng.standard_normal()
                gp.add(z, f[i])
            xs[j + 1] = xs[j] + horizon.dt * f
        oracle.rollouts.append((v, xs))
    return oracle


@dataclass(frozen=True)
class GpNominal:
    model: LtvModel
    covs: np.ndarray  # (N, p, p) over vec([A_j, B_j])
    trajectory: Trajectory
    controls: np.ndarray
    continuous_jacobians: np.ndarray  # (N, s, s+m)


def build_nominal_from_oracle(oracle: GpDynamicsOracle, seed: int = 0, conditioning=None) -> GpNominal:
    """Fresh control draw, mean rollout, model GPs conditioned on it, analytic derivatives.

    ``conditioning`` optionally replaces the rollout data with explicit
    (inputs (M, s+m), derivative targets (M, s)) pairs. The returned
    trajectory is the rollout itself with zero nominal inputs, so the learner
    starts without the controls that produced it.
    """
    rng = np.random.default_rng(seed)
    s, m = oracle.dims.state_dim, oracle.dims.input_dim
    n = oracle.horizon.n_steps
    dt = oracle.horizon.dt
    v = oracle.draw_controls(rng)
    xs = oracle.rollout_mean(v)
    if conditioning is None:
        z_data = np.concatenate([xs[:-1], v], axis=1)
        f_data = (xs[1:] - xs[:-1]) / dt
    else:
        z_data, f_data = (np.asarray(c, dtype=float) for c in conditioning)
    models = []
    for i, ogp in enumerate(oracle.state_gps):
        gp = _IncrementalGp(ogp.spec, ogp.weights, s + m)
        for z, f in zip(z_data, f_data[:, i]):
            gp.add(z, f)
        models.append(gp)
    jac = np.empty((n, s, s + m))
    p = s * (s + m)
    covs = np.zeros((n, p, p))
    for j in range(n):
        z = np.concatenate([xs[j], v[j]])
        for i, gp in enumerate(models):
            grad, gcov = gp.gradient(z)
            jac[j, i] = grad
            # Row i of [A B] at column a sits at index a * s + i.
            idx = np.arange(s + m) * s + i
            covs[j][np.ix_(idx, idx)] = dt ** 2 * gcov
    a, b = discretize_euler(jac[:, :, :s], jac[:, :, s:], dt)
    model = LtvModel(oracle.horizon, oracle.dims, a, b)
    covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
    w, vecs = np.linalg.eigh(covs)
    covs = (vecs * np.clip(w, 0, None)[:, None, :]) @ np.swapaxes(vecs, 1, 2)
    return GpNominal(model, 0.5 * (covs + np.swapaxes(covs, 1, 2)), Trajectory(xs, np.zeros((n, m))), v, jac)


# ------------------------------------------------------------------- plants


class PlantOracle:
    """True system executing a trial: ``step(j, x, u)`` returns the next state."""

    state_dim: int
    input_dim: int

    def step(self, j: int, x: np.ndarray, u: np.ndarray) -> np.ndarray:  # pragma: no cover - interface
        raise NotImplementedError


@dataclass(frozen=True)
class LtvPlant(PlantOracle):
    model: LtvModel

    @property
    def state_dim(self):
        return self.model.dims.state_dim

    @property
    def input_dim(self):
        return self.model.dims.input_dim

    def step(self, j, x, u):
        return self.model.a_mats[j] @ x + self.model.b_mats[j] @ u


@dataclass(frozen=True)
class GpPlant(PlantOracle):
    oracle: GpDynamicsOracle

    @property
    def state_dim(self):
        return self.oracle.dims.state_dim

    @property
    def input_dim(self):
        return self.oracle.dims.input_dim

    def step(self, j, x, u):
        return self.oracle.mean_step(x, u)


@dataclass(frozen=True)
class TrialConfig:
    weights: CostWeights
    noise_sd: float = DEFAULT_NOISE_SD
    cutoff_ratio: float = 0.2
    filter_order: int = 2
    filter_errors: bool = True


def simulate_trial(plant: PlantOracle, trajectory: Trajectory, inputs, config: TrialConfig, gains=None,
                   offsets=None, init_perturbation=None, rng: np.random.Generator | None = None,
                   iteration: int = 0) -> TrialRecord:
    """Run one trial under u_j = inputs_j + K_j (e_j - offsets_j) on top of the nominal inputs.

    Feedback acts on the measured (noisy) error. ``applied_inputs`` in the
    record are the totals sent in addition to the nominal inputs.
    """
    n = trajectory.n_steps
    s, m = plant.state_dim, plant.input_dim
    refs = trajectory.refs
    if refs.shape[1] != s or trajectory.nominal_inputs.shape[1] != m:
        raise StructuralError("trajectory dimensions do not match the plant")
    ff = np.asarray(inputs, dtype=float).reshape(n, m)
    rng = rng if rng is not None else np.random.default_rng(0)
    noise = config.noise_sd * rng.standard_normal((n + 1, s)) if config.noise_sd > 0 else np.zeros((n + 1, s))
    x = refs[0].copy()
    if init_perturbation is not None:
        x = x + np.asarray(init_perturbation, dtype=float)
    raw = np.full((n + 1, s), np.inf)
    applied = np.zeros((n, m))
    diverged = False
    for j in range(n + 1):
        raw[j] = x - refs[j] + noise[j]
        if j == n:
            break
        u = ff[j].copy()
        if gains is not None:
            off = 0.0 if offsets is None else offsets[j]
            u = u + gains[j] @ (raw[j] - off)
        applied[j] = u
        with np.errstate(over="ignore", invalid="ignore"):
            x = plant.step(j, x, trajectory.nominal_inputs[j] + u)
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > DIVERGENCE_THRESHOLD:
            diverged = True
            applied[j + 1:] = 0.0
            break
    if diverged:
        return TrialRecord(iteration, raw, raw, applied, float("inf"), True)
    filt = (zero_phase_filter(raw, config.cutoff_ratio, config.filter_order) if config.filter_errors else raw)
    return TrialRecord.from_errors(iteration, raw, filt, applied, config.weights)
