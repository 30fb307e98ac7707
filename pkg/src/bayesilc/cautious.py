"""Expected-cost backward pass for cautious ILC.

The model matrices at each step are random with the Gaussian belief of
:class:`~bayesilc.adapt.ModelBelief`. Expectations of the quadratic forms
B^T P B, B^T P A and A^T P A are evaluated in closed form from the belief
mean and covariance, which is what turns parameter uncertainty into
regularization of the input update.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .adapt import ModelBelief
from .ltv import CostWeights, StructuralError, TrialRecord

JITTER_LADDER = (0.0, 1e-12, 1e-10, 1e-8)
# Riccati matrices are renormalized above this magnitude; see CautiousPolicy.
RESCALE_ABOVE = 1e100


def covariance_index(kind: str, row: int, col: int, state_dim: int, input_dim: int) -> int:
    """Flat index of entry (row, col) of A or B inside vec([A, B]) (0-based)."""
    s, m = state_dim, input_dim
    if kind == "A":
        if not (0 <= row < s and 0 <= col < s):
            raise StructuralError(f"A index ({row}, {col}) out of range for s={s}")
        return col * s + row
    if kind == "B":
        if not (0 <= row < s and 0 <= col < m):
            raise StructuralError(f"B index ({row}, {col}) out of range for s={s}, m={m}")
        return s * s + col * s + row
    raise StructuralError(f"unknown block {kind!r}")


def split_mean(mean_vec: np.ndarray, s: int, m: int) -> tuple[np.ndarray, np.ndarray]:
    ab = np.asarray(mean_vec).reshape(s + m, s).T
    return ab[:, :s], ab[:, s:]


@dataclass(frozen=True)
class ExpectationTerms:
    theta: np.ndarray  # R + E[B^T P B], (m, m)
    psi: np.ndarray  # E[B^T P A], (m, s)
    m_mat: np.ndarray  # E[A^T P A], (s, s)
    a_mean: np.ndarray
    b_mean: np.ndarray


def expectation_terms(mean_vec, cov, p_next, r_mat, state_dim: int, input_dim: int,
                      r_scale: float = 1.0) -> ExpectationTerms:
    """Closed-form second moments of the random step matrices.

    ``r_scale`` multiplies R only; it is used by the rescaled Riccati
    recursion and is 1 otherwise.
    """
    s, m = state_dim, input_dim
    p = s * (s + m)
    cov = np.asarray(cov, dtype=float)
    if np.asarray(mean_vec).size != p or cov.shape != (p, p):
        raise StructuralError(f"belief of size {np.asarray(mean_vec).size}/{cov.shape} does not match s={s}, m={m}")
    a_bar, b_bar = split_mean(mean_vec, s, m)
    # cov4[a, c, b, d] = sigma(X^{c,a}, Y^{d,b}) with column a, row c.
    s_aa = cov[:s * s, :s * s].reshape(s, s, s, s)
    s_ba = cov[s * s:, :s * s].reshape(m, s, s, s)
    s_bb = cov[s * s:, s * s:].reshape(m, s, m, s)
    theta = r_scale * r_mat + b_bar.T @ p_next @ b_bar + np.einsum("cd,acbd->ab", p_next, s_bb)
    psi = b_bar.T @ p_next @ a_bar + np.einsum("cd,acbd->ab", p_next, s_ba)
    m_mat = a_bar.T @ p_next @ a_bar + np.einsum("cd,acbd->ab", p_next, s_aa)
    return ExpectationTerms(0.5 * (theta + theta.T), psi, 0.5 * (m_mat + m_mat.T), a_bar, b_bar)


def _factor_theta(theta: np.ndarray, step: int):
    scale = max(1.0, float(np.mean(np.abs(np.diag(theta)))))
    for jit in JITTER_LADDER:
        try:
            return scipy.linalg.cho_factor(theta + jit * scale * np.eye(theta.shape[0]))
        except np.linalg.LinAlgError:
            continue
    raise np.linalg.LinAlgError(f"Theta is numerically singular at step {step}")


def _check_finite(step: int, *arrays) -> None:
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite value in backward pass at step {step}")


@dataclass(frozen=True)
class CautiousPolicy:
    """Feedback gains and feedforward compensations for the next trial.

    The input update at step j is ``K_j (e_{k+1,j} - feedback_offset_j) + feedforward_j``.
    Riccati matrices are stored as ``riccati[j] * exp(riccati_log_scale[j])``;
    the log-scale is zero unless the recursion had to be renormalized.
    """

    feedback_gain: np.ndarray  # (N, m, s)
    feedforward: np.ndarray  # (N, m)
    riccati: np.ndarray  # (N+1, s, s)
    nu: np.ndarray  # (N+1, s)
    feedback_offset: np.ndarray  # (N, s)
    riccati_log_scale: np.ndarray = None
    extras: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.riccati_log_scale is None:
            object.__setattr__(self, "riccati_log_scale", np.zeros(self.riccati.shape[0]))
        for name in ("feedback_gain", "feedforward", "riccati", "nu", "feedback_offset"):
            arr = np.array(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise FloatingPointError(f"policy field {name} is not finite")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_steps(self) -> int:
        return self.feedforward.shape[0]

    def affine_feedforward(self) -> np.ndarray:
        """Feedforward part when feedback is written as K_j e_{k+1,j}."""
        return self.feedforward - np.einsum("jab,jb->ja", self.feedback_gain, self.feedback_offset)

    def riccati_full(self) -> np.ndarray:
        with np.errstate(over="ignore"):
            return self.riccati * np.exp(self.riccati_log_scale)[:, None, None]


def _terminal(weights: CostWeights):
    p_n = np.array(weights.q_mats[-1], dtype=float)
    return p_n


def cautious_backward_pass(belief: ModelBelief, prev_trial, weights: CostWeights,
                           terminal_q=None) -> CautiousPolicy:
    """Cautious recursion that needs no disturbance estimate.

    ``prev_trial`` is a :class:`TrialRecord` or the (N+1, s) filtered errors.
    The feedforward is -Theta_j^-1 B_mean^T nu_{j+1} with
    nu_j = (A_mean + B_mean K_j)^T nu_{j+1} + Q_j e_j and nu_N = Q_N e_N.
    """
    errs = prev_trial.filtered_errors if isinstance(prev_trial, TrialRecord) else np.asarray(prev_trial, float)
    n = belief.n_steps
    s = belief.out_dim
    m = belief.n_cols - s
    if errs.shape != (n + 1, s) or weights.n_steps != n:
        raise StructuralError(f"errors {errs.shape} / weights N={weights.n_steps} do not fit belief N={n}, s={s}")
    q = weights.q_mats
    r = weights.r_mats
    p_next = _terminal(weights) if terminal_q is None else np.asarray(terminal_q, float)
    log_scale = 0.0

    gains = np.empty((n, m, s))
    ff = np.empty((n, m))
    riccati = np.empty((n + 1, s, s))
    log_scales = np.zeros(n + 1)
    nu = np.empty((n + 1, s))
    riccati[n] = p_next
    nu[n] = p_next @ errs[n]

    for j in range(n - 1, -1, -1):
        inv_scale = math.exp(-log_scale)
        terms = expectation_terms(belief.means[j], belief.covs[j], p_next, r[j], s, m, r_scale=inv_scale)
        cho = _factor_theta(terms.theta, j)
        k = -scipy.linalg.cho_solve(cho, terms.psi)
        # With P = c * P~, Theta = c * Theta~ and the feedforward picks up 1/c.
        ff[j] = -inv_scale * scipy.linalg.cho_solve(cho, terms.b_mean.T @ nu[j + 1])
        p_j = inv_scale * q[j] + terms.m_mat + terms.psi.T @ k
        p_j = 0.5 * (p_j + p_j.T)
        nu[j] = (terms.a_mean + terms.b_mean @ k).T @ nu[j + 1] + q[j] @ errs[j]
        _check_finite(j, k, ff[j], p_j, nu[j])
        peak = float(np.max(np.abs(p_j)))
        if peak > RESCALE_ABOVE:
            p_j = p_j / peak
            log_scale += math.log(peak)
        gains[j] = k
        riccati[j] = p_j
        log_scales[j] = log_scale
        p_next = p_j

    return CautiousPolicy(gains, ff, riccati, nu, errs[:n].copy(), log_scales)


@dataclass(frozen=True)
class AffineDisturbance:
    """Random total disturbance dbar_{j+1} = offset_j + A_j state_load_j + B_j input_load_j.

    ``dbar`` collects everything in the next error that is not driven by the
    current error or the input update, i.e. B u_k + d.
    """

    offset: np.ndarray  # (N, s)
    state_load: np.ndarray  # (N, s)
    input_load: np.ndarray  # (N, m)

    @classmethod
    def from_explicit(cls, disturbances, prev_inputs) -> "AffineDisturbance":
        """Deterministic d_{j+1} estimates; only B u_{k,j} is random."""
        d = np.asarray(disturbances, dtype=float)
        u = np.asarray(prev_inputs, dtype=float)
        return cls(d, np.zeros_like(d), u)

    @classmethod
    def from_trial(cls, filtered_errors) -> "AffineDisturbance":
        """d_{j+1} = e_{k,j+1} - A_j e_{k,j} - B_j u_{k,j}, random through A_j and B_j."""
        e = np.asarray(filtered_errors, dtype=float)
        return cls(e[1:].copy(), -e[:-1], np.zeros((e.shape[0] - 1, 0)))

    @classmethod
    def residual_from_trial(cls, belief: ModelBelief, filtered_errors, prev_inputs) -> "AffineDisturbance":
        """d_{j+1} taken as the residual under the mean dynamics (deterministic)."""
        e = np.asarray(filtered_errors, dtype=float)
        u = np.asarray(prev_inputs, dtype=float)
        s = belief.out_dim
        m = belief.n_cols - s
        d = np.empty((belief.n_steps, s))
        for j in range(belief.n_steps):
            a, b = split_mean(belief.means[j], s, m)
            d[j] = e[j + 1] - a @ e[j] - b @ u[j]
        return cls.from_explicit(d, u)


def cancellation_residual(theta, gain, alpha) -> np.ndarray:
    """-K^T Theta Theta^-1 alpha + K^T alpha, assembled from computed factors."""
    return -gain.T @ theta @ np.linalg.solve(theta, alpha) + gain.T @ alpha


def full_backward_pass_with_disturbance(belief: ModelBelief, disturbances, weights: CostWeights,
                                        prev_inputs=None, terminal_q=None) -> CautiousPolicy:
    """Unsimplified recursion with an explicit (possibly random) disturbance model.

    Feedback acts on the absolute next-trial error (``feedback_offset`` is 0)
    and ``nu`` holds the linear value-function term b_j. Retained to check the
    disturbance-free recursion against.
    """
    if isinstance(disturbances, AffineDisturbance):
        dist = disturbances
    else:
        if prev_inputs is None:
            raise ValueError("prev_inputs required with explicit disturbance vectors")
        dist = AffineDisturbance.from_explicit(disturbances, prev_inputs)
    n = belief.n_steps
    s = belief.out_dim
    m = belief.n_cols - s
    q = weights.q_mats
    r = weights.r_mats
    p_next = _terminal(weights) if terminal_q is None else np.asarray(terminal_q, float)
    b_next = np.zeros(s)
    has_state_load = dist.state_load.size > 0
    has_input_load = dist.input_load.size > 0

    gains = np.empty((n, m, s))
    ff = np.empty((n, m))
    riccati = np.empty((n + 1, s, s))
    bvec = np.empty((n + 1, s))
    resid = np.empty(n)
    extra_resid = np.empty(n)
    riccati[n] = p_next
    bvec[n] = b_next

    for j in range(n - 1, -1, -1):
        terms = expectation_terms(belief.means[j], belief.covs[j], p_next, r[j], s, m)
        cho = _factor_theta(terms.theta, j)
        theta, psi, m_mat = terms.theta, terms.psi, terms.m_mat
        btpb = theta - r[j]
        k = -scipy.linalg.cho_solve(cho, psi)
        c = dist.offset[j]
        g = dist.state_load[j] if has_state_load else np.zeros(s)
        h = dist.input_load[j] if has_input_load else np.zeros(m)
        alpha = terms.b_mean.T @ (p_next @ c + b_next) + psi @ g + btpb @ h
        ff_j = -scipy.linalg.cho_solve(cho, alpha)
        h_m = h + ff_j
        a_cl = terms.a_mean + terms.b_mean @ k
        # E[Abar^T (P m + b)], m = dbar - B Theta^-1 alpha.
        e_cl = a_cl.T @ (p_next @ c + b_next) + m_mat @ g + psi.T @ h_m + k.T @ (psi @ g + btpb @ h_m)
        theta_inv_alpha = -ff_j
        b_j = psi.T @ scipy.linalg.cho_solve(cho, r[j] @ theta_inv_alpha) + e_cl
        # The three terms that cancel against each other when b_j is simplified.
        extra = (psi.T @ scipy.linalg.cho_solve(cho, r[j] @ theta_inv_alpha)
                 - (psi.T + k.T @ btpb) @ theta_inv_alpha)
        resid[j] = float(np.max(np.abs(cancellation_residual(theta, k, alpha)), initial=0.0))
        extra_resid[j] = float(np.max(np.abs(extra), initial=0.0))
        p_j = q[j] + m_mat + psi.T @ k
        p_j = 0.5 * (p_j + p_j.T)
        _check_finite(j, k, ff_j, p_j, b_j)
        gains[j] = k
        ff[j] = ff_j
        riccati[j] = p_j
        bvec[j] = b_j
        p_next = p_j
        b_next = b_j

    return CautiousPolicy(gains, ff, riccati, bvec, np.zeros((n, s)),
                          extras={"cancellation_residual": resid, "extra_term_residual": extra_resid})


def replay_update(model_or_belief, policy: CautiousPolicy, initial_error_change=None) -> np.ndarray:
    """Total input update from replaying the policy on the mean model.

    The next-trial error deviation from the feedback offset evolves as
    z_{j+1} = A_j z_j + B_j du_j (disturbances cancel between trials), so the
    update is du_j = K_j z_j + feedforward_j. Returns du with shape (N, m).
    """
    if isinstance(model_or_belief, ModelBelief):
        model = model_or_belief.to_model()
    else:
        model = model_or_belief
    n = model.horizon.n_steps
    s = model.dims.state_dim
    z = np.zeros(s) if initial_error_change is None else np.asarray(initial_error_change, float)
    du = np.empty((n, model.dims.input_dim))
    for j in range(n):
        du[j] = policy.feedback_gain[j] @ z + policy.feedforward[j]
        z = model.a_mats[j] @ z + model.b_mats[j] @ du[j]
    return du


def expected_step_costs(belief: ModelBelief, policy: CautiousPolicy, prev_errors, weights: CostWeights,
                        initial_error_change=None) -> np.ndarray:
    """E[e_{k+1,j}^T Q_j e_{k+1,j}] for j = 0..N under the random step matrices.

    Exact moment propagation of z = e_{k+1} - e_k with
    z_{j+1} = A_j z_j + B_j (K_j z_j + ff_j); steps are independent, so each
    step's parameter moments enter linearly.
    """
    e = np.asarray(prev_errors, dtype=float)
    n = belief.n_steps
    s = belief.out_dim
    m = belief.n_cols - s
    mu_z = np.zeros(s) if initial_error_change is None else np.asarray(initial_error_change, float)
    z2 = np.outer(mu_z, mu_z)
    out = np.empty(n + 1)
    q = weights.q_mats

    def cost(j):
        return float(np.trace(q[j] @ z2) + 2 * e[j] @ q[j] @ mu_z + e[j] @ q[j] @ e[j])

    out[0] = cost(0)
    for j in range(n):
        g = np.vstack([np.eye(s), policy.feedback_gain[j]])
        h = np.concatenate([np.zeros(s), policy.feedforward[j]])
        mu_x = g @ mu_z + h
        x2 = g @ z2 @ g.T + np.outer(g @ mu_z, h) + np.outer(h, g @ mu_z) + np.outer(h, h)
        theta_mu = belief.means[j]
        lam = (belief.covs[j] + np.outer(theta_mu, theta_mu)).reshape(s + m, s, s + m, s)
        mean_mat = theta_mu.reshape(s + m, s).T
        mu_z = mean_mat @ mu_x
        z2 = np.einsum("ab,acbd->cd", x2, lam)
        z2 = 0.5 * (z2 + z2.T)
        out[j + 1] = cost(j + 1)
    return out


def markov_caution_bound(prev_norm_sq_j: float, expected_next_cost_j: float) -> float:
    """Markov upper bound on P(e_{k+1}^T Q e_{k+1} >= e_k^T Q e_k)."""
    if prev_norm_sq_j < 0 or expected_next_cost_j < 0:
        raise ValueError("costs must be non-negative")
    if prev_norm_sq_j == 0:
        warnings.warn("previous cost is zero; caution bound is unbounded", RuntimeWarning)
        return math.inf
    return expected_next_cost_j / prev_norm_sq_j


def write_policy_csv(policy: CautiousPolicy, path) -> None:
    """Rows: step, gain entries row-major (K_j[0,0], K_j[0,1], ...), feedforward vector."""
    n, m, s = policy.feedback_gain.shape
    header = ["step"] + [f"K_{a}_{b}" for a in range(m) for b in range(s)] + [f"ff_{a}" for a in range(m)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for j in range(n):
            writer.writerow([j] + [f"{v:.12g}" for v in policy.feedback_gain[j].reshape(-1)]
                            + [f"{v:.12g}" for v in policy.feedforward[j]])
