"""Comparison update laws: batch lifted inversion, PD-type, plain recursive and LQR."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .adapt import ModelBelief
from .cautious import CautiousPolicy, cautious_backward_pass
from .ltv import CostWeights, LiftedModel, LtvModel

VARIANTS = ("batch_pinv", "pd_type", "recursive_plain", "bayes_cautious")


@dataclass(frozen=True)
class IlcUpdateLaw:
    variant: str
    rate: float = 1.0
    p_gain: float = 0.0
    d_gain: float = 0.0
    pinv_rtol: float | None = None
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown update law {self.variant!r}; expected one of {VARIANTS}")
        if not 0 < self.rate <= 1:
            raise ValueError(f"learning rate must lie in (0, 1], got {self.rate}")
        if not (np.isfinite(self.p_gain) and np.isfinite(self.d_gain)):
            raise ValueError("p and d gains must be finite")


def pinv_tolerance(mat: np.ndarray) -> float:
    sv_max = np.linalg.norm(mat, 2) if mat.size else 0.0
    return max(mat.shape) * np.finfo(float).eps * sv_max


def batch_ilc_update(lifted: LiftedModel, stacked_errors, stacked_inputs, rate: float = 1.0,
                     rtol: float | None = None) -> np.ndarray:
    """U_{k+1} = U_k - rate * pinv(F) E_k.

    ``stacked_errors`` are e_1..e_N flattened. ``rtol`` is relative to
    sigma_max; the default truncates at max(dim) * eps * sigma_max.
    """
    if not 0 < rate <= 1:
        raise ValueError(f"rate must lie in (0, 1], got {rate}")
    f = lifted.f_matrix
    e = np.asarray(stacked_errors, dtype=float).reshape(-1)
    u = np.asarray(stacked_inputs, dtype=float).reshape(-1)
    if e.size != f.shape[0] or u.size != f.shape[1]:
        raise ValueError(f"stacked sizes {e.size}, {u.size} do not match F {f.shape}")
    if rtol is None:
        f_pinv = np.linalg.pinv(f, rcond=max(f.shape) * np.finfo(float).eps)
    else:
        f_pinv = np.linalg.pinv(f, rcond=rtol)
    if not np.all(np.isfinite(f_pinv)):
        raise FloatingPointError(f"pseudoinverse is not finite (condition estimate {lifted.condition_estimate:.3e})")
    return u - rate * f_pinv @ e


def pd_ilc_update(errors, p_gain, d_gain, dt: float = 1.0) -> np.ndarray:
    """PD-type compensation p e_j + d (e_{j+1} - e_j) / dt for j = 0..N-1.

    Gains are scalars (state and input dimensions equal) or (m, s) matrices.
    An (N+1)-point error gives N forward differences, one per input step.
    """
    e = np.asarray(errors, dtype=float)
    if e.ndim == 1:
        e = e[:, None]
    diff = np.diff(e, axis=0) / dt
    p = np.asarray(p_gain, dtype=float)
    d = np.asarray(d_gain, dtype=float)
    if p.ndim == 0 and d.ndim == 0:
        return p * e[:-1] + d * diff
    s = e.shape[1]
    p = p * np.eye(s) if p.ndim == 0 else p
    d = d * np.eye(s) if d.ndim == 0 else d
    return e[:-1] @ p.T + diff @ d.T


@dataclass(frozen=True)
class LqrGains:
    gains: np.ndarray  # (N, m, s)
    riccati: np.ndarray  # (N+1, s, s)


def lqr_design(model: LtvModel, weights: CostWeights) -> LqrGains:
    """Finite-horizon time-varying LQR by the standard backward Riccati recursion."""
    n = model.horizon.n_steps
    s, m = model.dims.state_dim, model.dims.input_dim
    q, r = weights.q_mats, weights.r_mats
    p = np.array(q[n], dtype=float)
    gains = np.empty((n, m, s))
    riccati = np.empty((n + 1, s, s))
    riccati[n] = p
    for j in range(n - 1, -1, -1):
        a, b = model.a_mats[j], model.b_mats[j]
        btp = b.T @ p
        cho = scipy.linalg.cho_factor(r[j] + btp @ b)
        k = -scipy.linalg.cho_solve(cho, btp @ a)
        p = q[j] + a.T @ p @ a + (a.T @ p @ b) @ k
        p = 0.5 * (p + p.T)
        if not (np.all(np.isfinite(k)) and np.all(np.isfinite(p))):
            raise FloatingPointError(f"non-finite value in LQR recursion at step {j}")
        gains[j] = k
        riccati[j] = p
    return LqrGains(gains, riccati)


def recursive_plain_update(model: LtvModel, prev_trial, weights: CostWeights) -> CautiousPolicy:
    """Certainty-equivalent recursive update (the cautious pass with zero covariance)."""
    p = model.dims.n_params
    belief = ModelBelief(model.stacked_params(), np.zeros((model.horizon.n_steps, p, p)), model.dims.state_dim)
    return cautious_backward_pass(belief, prev_trial, weights)
