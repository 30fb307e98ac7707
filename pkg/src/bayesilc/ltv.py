"""Trajectories, discrete LTV error models, lifted form and signal filtering."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.signal

RANK_RTOL = 1e-12


class StructuralError(ValueError):
    """Array shapes or sizes are inconsistent with the declared dimensions."""


def _frozen(arr, dtype=float) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def _require_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")


@dataclass(frozen=True)
class Horizon:
    n_steps: int
    dt: float

    def __post_init__(self):
        # N = 1 is allowed so a single-block lifted model can be expressed.
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")

    @property
    def duration(self) -> float:
        return self.n_steps * self.dt

    @property
    def times(self) -> np.ndarray:
        """Sample times of the N+1 trajectory points."""
        return np.arange(self.n_steps + 1) * self.dt


@dataclass(frozen=True)
class Dimensions:
    state_dim: int
    input_dim: int

    def __post_init__(self):
        if self.state_dim < 1 or self.input_dim < 1:
            raise ValueError(f"dimensions must be >= 1, got {self}")

    @property
    def n_params(self) -> int:
        """Length of vec([A, B])."""
        return self.state_dim * (self.state_dim + self.input_dim)


@dataclass(frozen=True)
class LtvModel:
    """Per-step matrices of e[j+1] = A[j] e[j] + B[j] u[j] + d[j+1]."""

    horizon: Horizon
    dims: Dimensions
    a_mats: np.ndarray
    b_mats: np.ndarray

    def __post_init__(self):
        a = _frozen(self.a_mats)
        b = _frozen(self.b_mats)
        n, s, m = self.horizon.n_steps, self.dims.state_dim, self.dims.input_dim
        if a.shape != (n, s, s):
            raise StructuralError(f"a_mats shape {a.shape} != {(n, s, s)}")
        if b.shape != (n, s, m):
            raise StructuralError(f"b_mats shape {b.shape} != {(n, s, m)}")
        _require_finite("a_mats", a)
        _require_finite("b_mats", b)
        object.__setattr__(self, "a_mats", a)
        object.__setattr__(self, "b_mats", b)

    @classmethod
    def from_arrays(cls, a_mats, b_mats, dt: float = 1.0) -> "LtvModel":
        a = np.asarray(a_mats, dtype=float)
        b = np.asarray(b_mats, dtype=float)
        if a.ndim != 3 or b.ndim != 3:
            raise StructuralError("expected stacks of matrices (N, s, s) and (N, s, m)")
        return cls(Horizon(a.shape[0], dt), Dimensions(a.shape[1], b.shape[2]), a, b)

    def stacked_params(self) -> np.ndarray:
        """vec([A_j, B_j]) per step, column-major, shape (N, s(s+m))."""
        ab = np.concatenate([self.a_mats, self.b_mats], axis=2)
        return ab.transpose(0, 2, 1).reshape(self.horizon.n_steps, -1)

    def simulate(self, e0, inputs, disturbances=None) -> np.ndarray:
        """Roll the error dynamics forward; returns the (N+1, s) error sequence."""
        n = self.horizon.n_steps
        inputs = np.asarray(inputs, dtype=float).reshape(n, self.dims.input_dim)
        errs = np.empty((n + 1, self.dims.state_dim))
        errs[0] = e0
        for j in range(n):
            errs[j + 1] = self.a_mats[j] @ errs[j] + self.b_mats[j] @ inputs[j]
            if disturbances is not None:
                errs[j + 1] += disturbances[j]
        return errs


@dataclass(frozen=True)
class Trajectory:
    refs: np.ndarray
    nominal_inputs: np.ndarray

    def __post_init__(self):
        r = _frozen(self.refs)
        u = _frozen(self.nominal_inputs)
        if r.ndim != 2 or u.ndim != 2 or r.shape[0] != u.shape[0] + 1:
            raise StructuralError(
                f"refs must be (N+1, s) and nominal_inputs (N, m); got {r.shape}, {u.shape}"
            )
        _require_finite("refs", r)
        _require_finite("nominal_inputs", u)
        object.__setattr__(self, "refs", r)
        object.__setattr__(self, "nominal_inputs", u)

    @property
    def n_steps(self) -> int:
        return self.nominal_inputs.shape[0]


@dataclass(frozen=True)
class CostWeights:
    q_mats: np.ndarray
    r_mats: np.ndarray

    def __post_init__(self):
        q = _frozen(self.q_mats)
        r = _frozen(self.r_mats)
        if q.ndim != 3 or r.ndim != 3 or q.shape[0] != r.shape[0] + 1:
            raise StructuralError(f"q_mats must be (N+1, s, s), r_mats (N, m, m); got {q.shape}, {r.shape}")
        if np.any(np.linalg.eigvalsh(0.5 * (q + q.transpose(0, 2, 1))) < -1e-10):
            raise ValueError("Q_j must be positive semidefinite")
        if np.any(np.linalg.eigvalsh(0.5 * (r + r.transpose(0, 2, 1))) <= 0):
            raise ValueError("R_j must be positive definite")
        object.__setattr__(self, "q_mats", q)
        object.__setattr__(self, "r_mats", r)

    @classmethod
    def uniform(cls, n_steps: int, dims: Dimensions, q: float = 1.0, r: float = 1e-6) -> "CostWeights":
        s, m = dims.state_dim, dims.input_dim
        return cls(
            np.broadcast_to(q * np.eye(s), (n_steps + 1, s, s)),
            np.broadcast_to(r * np.eye(m), (n_steps, m, m)),
        )

    @property
    def n_steps(self) -> int:
        return self.r_mats.shape[0]


def error_norm(filtered_errors, weights: CostWeights) -> float:
    """sqrt(sum_{j=1..N} e_j^T Q_j e_j); the j = 0 sample is excluded."""
    e = np.asarray(filtered_errors, dtype=float)
    if e.shape[0] != weights.q_mats.shape[0] or e.shape[1] != weights.q_mats.shape[1]:
        raise StructuralError(f"errors shape {e.shape} incompatible with weights {weights.q_mats.shape}")
    total = np.einsum("ja,jab,jb->", e[1:], weights.q_mats[1:], e[1:])
    return float(np.sqrt(max(total, 0.0)))


@dataclass(frozen=True)
class TrialRecord:
    iteration: int
    raw_errors: np.ndarray
    filtered_errors: np.ndarray
    applied_inputs: np.ndarray
    error_norm: float
    diverged: bool = False
    weights: CostWeights | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.iteration < 0:
            raise ValueError("iteration must be non-negative")
        raw = _frozen(self.raw_errors)
        filt = _frozen(self.filtered_errors)
        u = _frozen(self.applied_inputs)
        if raw.shape != filt.shape or raw.ndim != 2 or u.ndim != 2 or u.shape[0] + 1 != raw.shape[0]:
            raise StructuralError(
                f"inconsistent trial shapes raw={raw.shape} filtered={filt.shape} inputs={u.shape}"
            )
        if not self.diverged and not (self.error_norm >= 0):
            raise ValueError("error_norm must be non-negative")
        if self.weights is not None and not self.diverged:
            expected = error_norm(filt, self.weights)
            if not np.isclose(expected, self.error_norm, rtol=1e-10, atol=1e-14):
                raise ValueError(f"error_norm {self.error_norm} does not match weighted norm {expected}")
        object.__setattr__(self, "raw_errors", raw)
        object.__setattr__(self, "filtered_errors", filt)
        object.__setattr__(self, "applied_inputs", u)

    @classmethod
    def from_errors(cls, iteration, raw_errors, filtered_errors, applied_inputs, weights: CostWeights,
                    diverged: bool = False) -> "TrialRecord":
        filt = np.asarray(filtered_errors, dtype=float)
        norm = error_norm(filt, weights) if np.all(np.isfinite(filt)) else float("inf")
        return cls(iteration, raw_errors, filtered_errors, applied_inputs, norm, diverged, weights)


@dataclass(frozen=True)
class LiftedModel:
    f_matrix: np.ndarray
    condition_estimate: float
    block_shape: tuple[int, int]

    @property
    def n_steps(self) -> int:
        return self.f_matrix.shape[0] // self.block_shape[0]

    def block(self, i: int, j: int) -> np.ndarray:
        """Block F_(i,j), 1-indexed as in the lifted-form convention."""
        s, m = self.block_shape
        return self.f_matrix[(i - 1) * s:i * s, (j - 1) * m:j * m]


def condition_number(mat: np.ndarray) -> float:
    sv = np.linalg.svd(mat, compute_uv=False)
    if sv[0] == 0 or sv[-1] <= RANK_RTOL * sv[0]:
        return float("inf")
    return float(sv[0] / sv[-1])


def lifted_matrix(a_mats: np.ndarray, b_mats: np.ndarray) -> np.ndarray:
    """Input-to-output matrix mapping (u_0..u_{N-1}) to (e_1..e_N) from e_0 = 0."""
    n, s, _ = a_mats.shape
    m = b_mats.shape[2]
    f = np.zeros((n * s, n * m))
    for col in range(n):
        blk = b_mats[col]
        f[col * s:(col + 1) * s, col * m:(col + 1) * m] = blk
        for row in range(col + 1, n):
            blk = a_mats[row] @ blk
            f[row * s:(row + 1) * s, col * m:(col + 1) * m] = blk
    return f


def build_lifted(model: LtvModel) -> LiftedModel:
    if model.a_mats.shape[0] != model.b_mats.shape[0]:
        raise StructuralError("A and B stacks have different lengths")
    f = lifted_matrix(model.a_mats, model.b_mats)
    f.setflags(write=False)
    return LiftedModel(f, condition_number(f), (model.dims.state_dim, model.dims.input_dim))


def zero_phase_filter(signal, cutoff_ratio: float = 0.2, order: int = 2) -> np.ndarray:
    """Butterworth low-pass run forward and backward along axis 0.

    ``cutoff_ratio`` is a fraction of the Nyquist frequency. Ends are padded by
    odd reflection of length ``3 * order``, so constants pass unchanged.
    """
    x = np.asarray(signal, dtype=float)
    if not 0 < cutoff_ratio < 1:
        raise ValueError(f"cutoff_ratio must lie in (0, 1), got {cutoff_ratio}")
    padlen = 3 * order
    if x.shape[0] <= padlen:
        raise ValueError(f"signal of length {x.shape[0]} too short for filter warm-up (need > {padlen})")
    _require_finite("signal", x)
    b, a = scipy.signal.butter(order, cutoff_ratio)
    return scipy.signal.filtfilt(b, a, x, axis=0, padtype="odd", padlen=padlen)


def discretize_euler(a_cont, b_cont, dt: float) -> tuple[np.ndarray, np.ndarray]:
    if not dt > 0:
        raise ValueError("dt must be positive")
    a_cont = np.asarray(a_cont, dtype=float)
    return np.eye(a_cont.shape[-1]) + dt * a_cont, dt * np.asarray(b_cont, dtype=float)


def discretize_exact(a_cont, b_cont, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order-hold discretization through the augmented matrix exponential."""
    a_cont = np.asarray(a_cont, dtype=float)
    b_cont = np.asarray(b_cont, dtype=float)
    s, m = b_cont.shape
    aug = np.zeros((s + m, s + m))
    aug[:s, :s] = a_cont
    aug[:s, s:] = b_cont
    phi = scipy.linalg.expm(dt * aug)
    return phi[:s, :s], phi[:s, s:]
