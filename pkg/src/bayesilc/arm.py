"""Two-link planar arm, striking polynomials and varying-initial-state adjustment.

Link parameters follow the ten-per-link layout of :class:`~bayesilc.adapt.LinkParams`
(m, m*cx, m*cy, m*cz, Ixx, Ixy, Ixz, Iyy, Iyz, Izz), with first moments and
inertias about each joint axis. The arm moves in the vertical x-y plane with
gravity along -y; joint angles are measured from the +x axis.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .ltv import Horizon, LtvModel, Dimensions, Trajectory, TrialRecord, discretize_euler

N_JOINTS = 2


def point_mass_theta(masses, lengths) -> np.ndarray:
    """Links with their mass concentrated at mid-length."""
    theta = np.zeros(10 * N_JOINTS)
    for i, (m, l) in enumerate(zip(masses, lengths)):
        cx = 0.5 * l
        blk = theta[10 * i:10 * (i + 1)]
        blk[0] = m
        blk[1] = m * cx
        blk[7] = m * cx ** 2  # Iyy
        blk[9] = m * cx ** 2  # Izz
    return theta


@dataclass(frozen=True)
class TwoLinkArm:
    theta: np.ndarray
    lengths: tuple = (0.5, 0.4)
    gravity: float = 9.81
    friction: tuple = (0.0, 0.0)

    def __post_init__(self):
        th = np.array(self.theta, dtype=float).reshape(-1)
        if th.size != 10 * N_JOINTS:
            raise ValueError(f"theta must have {10 * N_JOINTS} entries")
        th.setflags(write=False)
        object.__setattr__(self, "theta", th)
        object.__setattr__(self, "lengths", tuple(float(v) for v in self.lengths))
        object.__setattr__(self, "friction", tuple(float(v) for v in self.friction))

    @classmethod
    def default(cls, masses=(2.0, 1.0), lengths=(0.5, 0.4), friction=(0.0, 0.0), gravity=9.81) -> "TwoLinkArm":
        return cls(point_mass_theta(masses, lengths), tuple(lengths), gravity, tuple(friction))

    def with_theta(self, theta) -> "TwoLinkArm":
        return replace(self, theta=np.asarray(theta, dtype=float))

    @property
    def n_joints(self) -> int:
        return N_JOINTS

    @property
    def base_rank(self) -> int:
        """Identifiable parameter combinations: (h1x, h1y, Izz1 + m2 l1^2, h2x, h2y, Izz2)."""
        return 6

    def _params(self):
        th = self.theta
        return th[1], th[2], th[9], th[10], th[11], th[12], th[19]

    # ---- dynamics terms, vectorized over leading axes

    def _terms(self, q):
        q = np.asarray(q, dtype=float)
        h1x, h1y, i1, m2, h2x, h2y, i2 = self._params()
        l1 = self.lengths[0]
        q1, q2 = q[..., 0], q[..., 1]
        c2, s2 = np.cos(q2), np.sin(q2)
        phi = q1 + q2
        beta = l1 * (h2x * c2 - h2y * s2)
        dbeta = -l1 * (h2x * s2 + h2y * c2)
        g = self.gravity
        g_phi = g * (h2x * np.cos(phi) - h2y * np.sin(phi))
        dg_phi = -g * (h2x * np.sin(phi) + h2y * np.cos(phi))
        g1 = g * (h1x * np.cos(q1) - h1y * np.sin(q1) + m2 * l1 * np.cos(q1)) + g_phi
        dg1 = g * (-h1x * np.sin(q1) - h1y * np.cos(q1) - m2 * l1 * np.sin(q1))
        return dict(beta=beta, dbeta=dbeta, g_phi=g_phi, dg_phi=dg_phi, g1=g1, dg1=dg1,
                    m11=i1 + i2 + m2 * l1 ** 2 + 2 * beta, m12=i2 + beta, m22=i2 + 0 * beta)

    def mass_matrix(self, q) -> np.ndarray:
        t = self._terms(q)
        return np.stack([np.stack([t["m11"], t["m12"]], -1), np.stack([t["m12"], t["m22"]], -1)], -2)

    def mass_matrix_pd(self, q) -> bool:
        mm = self.mass_matrix(np.atleast_2d(q))
        det = mm[..., 0, 0] * mm[..., 1, 1] - mm[..., 0, 1] ** 2
        return bool(np.all(mm[..., 0, 0] > 0) and np.all(det > 0))

    def bias(self, q, qd) -> np.ndarray:
        """Coriolis, centrifugal, gravity and friction torques."""
        t = self._terms(q)
        qd = np.asarray(qd, dtype=float)
        qd1, qd2 = qd[..., 0], qd[..., 1]
        f = self.friction
        c1 = t["dbeta"] * (2 * qd1 * qd2 + qd2 ** 2)
        c2 = -t["dbeta"] * qd1 ** 2
        return np.stack([c1 + t["g1"] + f[0] * qd1, c2 + t["g_phi"] + f[1] * qd2], -1)

    def gravity_torque(self, q) -> np.ndarray:
        t = self._terms(q)
        return np.stack([t["g1"], t["g_phi"]], -1)

    def inverse_dynamics(self, q, qd, qdd) -> np.ndarray:
        mm = self.mass_matrix(q)
        return np.einsum("...ab,...b->...a", mm, np.asarray(qdd, dtype=float)) + self.bias(q, qd)

    def forward_dynamics(self, q, qd, tau) -> np.ndarray:
        mm = self.mass_matrix(q)
        det = mm[..., 0, 0] * mm[..., 1, 1] - mm[..., 0, 1] ** 2
        if np.any(np.abs(det) < 1e-14):
            raise np.linalg.LinAlgError("mass matrix is singular")
        rhs = np.asarray(tau, dtype=float) - self.bias(q, qd)
        return np.linalg.solve(mm, rhs[..., None])[..., 0]

    def regressor(self, q, qd, qdd) -> np.ndarray:
        """Phi with inverse_dynamics = Phi @ theta (+ friction), shape (..., 2, 20)."""
        q = np.asarray(q, dtype=float)
        qd = np.asarray(qd, dtype=float)
        qdd = np.asarray(qdd, dtype=float)
        l1, g = self.lengths[0], self.gravity
        q1, q2 = q[..., 0], q[..., 1]
        qd1, qd2 = qd[..., 0], qd[..., 1]
        a1, a2 = qdd[..., 0], qdd[..., 1]
        c1, s1, c2, s2 = np.cos(q1), np.sin(q1), np.cos(q2), np.sin(q2)
        cp, sp = np.cos(q1 + q2), np.sin(q1 + q2)
        vel1 = 2 * qd1 * qd2 + qd2 ** 2
        phi = np.zeros(q.shape[:-1] + (2, 20))
        phi[..., 0, 1] = g * c1
        phi[..., 0, 2] = -g * s1
        phi[..., 0, 9] = a1
        phi[..., 0, 10] = l1 ** 2 * a1 + g * l1 * c1
        phi[..., 0, 11] = l1 * c2 * (2 * a1 + a2) - l1 * s2 * vel1 + g * cp
        phi[..., 1, 11] = l1 * c2 * a1 + l1 * s2 * qd1 ** 2 + g * cp
        phi[..., 0, 12] = -l1 * s2 * (2 * a1 + a2) - l1 * c2 * vel1 - g * sp
        phi[..., 1, 12] = -l1 * s2 * a1 + l1 * c2 * qd1 ** 2 - g * sp
        phi[..., 0, 19] = a1 + a2
        phi[..., 1, 19] = a1 + a2
        return phi

    def inverse_dynamics_jacobians(self, q, qd, qdd):
        """d tau / d q and d tau / d qd at fixed qdd, shapes (..., 2, 2)."""
        t = self._terms(q)
        qd = np.asarray(qd, dtype=float)
        qdd = np.asarray(qdd, dtype=float)
        qd1, qd2 = qd[..., 0], qd[..., 1]
        a1, a2 = qdd[..., 0], qdd[..., 1]
        b, db = t["beta"], t["dbeta"]
        ddb = -b
        dgp = t["dg_phi"]
        f = self.friction
        vel1 = 2 * qd1 * qd2 + qd2 ** 2
        dq = np.empty(qd.shape[:-1] + (2, 2))
        dq[..., 0, 0] = t["dg1"] + dgp
        dq[..., 1, 0] = dgp
        dq[..., 0, 1] = 2 * db * a1 + db * a2 + ddb * vel1 + dgp
        dq[..., 1, 1] = db * a1 - ddb * qd1 ** 2 + dgp
        dqd = np.empty_like(dq)
        dqd[..., 0, 0] = 2 * db * qd2 + f[0]
        dqd[..., 1, 0] = -2 * db * qd1
        dqd[..., 0, 1] = db * (2 * qd1 + 2 * qd2)
        dqd[..., 1, 1] = f[1] + 0 * qd1
        return dq, dqd

    def dynamics_jacobians(self, q, qd, tau):
        """Lower rows of the continuous-time (A_c, B_c): d qdd / d(q, qd) and d qdd / d tau."""
        qdd = self.forward_dynamics(q, qd, tau)
        dq, dqd = self.inverse_dynamics_jacobians(q, qd, qdd)
        m_inv = np.linalg.inv(self.mass_matrix(q))
        a_lo = -m_inv @ np.concatenate([dq, dqd], axis=-1)
        return a_lo, m_inv

    def state_derivative(self, x, tau) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        n = N_JOINTS
        return np.concatenate([x[..., n:], self.forward_dynamics(x[..., :n], x[..., n:], tau)], -1)

    def energy(self, x) -> float:
        """Kinetic plus potential energy (zero friction assumed by callers)."""
        x = np.asarray(x, dtype=float)
        q, qd = x[:N_JOINTS], x[N_JOINTS:]
        h1x, h1y, _, m2, h2x, h2y, _ = self._params()
        l1, g = self.lengths[0], self.gravity
        phi = q[0] + q[1]
        pot = g * (h1x * np.sin(q[0]) + h1y * np.cos(q[0]) + m2 * l1 * np.sin(q[0])
                   + h2x * np.sin(phi) + h2y * np.cos(phi))
        return float(0.5 * qd @ self.mass_matrix(q) @ qd + pot)


def _scalar_derivative(arm: TwoLinkArm):
    """Closed-form x' for a single state; same terms as the vectorized path, without array overhead."""
    h1x, h1y, i1, m2, h2x, h2y, i2 = (float(v) for v in arm._params())
    l1, g = float(arm.lengths[0]), float(arm.gravity)
    f1, f2 = float(arm.friction[0]), float(arm.friction[1])

    def deriv(x, tau0, tau1):
        q1, q2, qd1, qd2 = x
        c2, s2 = math.cos(q2), math.sin(q2)
        cp, sp = math.cos(q1 + q2), math.sin(q1 + q2)
        beta = l1 * (h2x * c2 - h2y * s2)
        dbeta = -l1 * (h2x * s2 + h2y * c2)
        g_phi = g * (h2x * cp - h2y * sp)
        g1 = g * (h1x * math.cos(q1) - h1y * math.sin(q1) + m2 * l1 * math.cos(q1)) + g_phi
        m11 = i1 + i2 + m2 * l1 * l1 + 2 * beta
        m12 = i2 + beta
        m22 = i2
        r1 = tau0 - (dbeta * (2 * qd1 * qd2 + qd2 * qd2) + g1 + f1 * qd1)
        r2 = tau1 - (-dbeta * qd1 * qd1 + g_phi + f2 * qd2)
        det = m11 * m22 - m12 * m12
        if abs(det) < 1e-14:
            raise np.linalg.LinAlgError("mass matrix is singular")
        return (qd1, qd2, (m22 * r1 - m12 * r2) / det, (m11 * r2 - m12 * r1) / det)

    return deriv


def rk4_step(arm: TwoLinkArm, x, tau, dt: float, substeps: int = 10) -> np.ndarray:
    h = dt / substeps
    x = np.asarray(x, dtype=float)
    if x.shape == (2 * N_JOINTS,) and np.all(np.isfinite(x)):
        deriv = _scalar_derivative(arm)
        t0, t1 = (float(v) for v in np.ravel(tau))
        xs = tuple(float(v) for v in x)
        for _ in range(substeps):
            k1 = deriv(xs, t0, t1)
            k2 = deriv(tuple(a + 0.5 * h * b for a, b in zip(xs, k1)), t0, t1)
            k3 = deriv(tuple(a + 0.5 * h * b for a, b in zip(xs, k2)), t0, t1)
            k4 = deriv(tuple(a + h * b for a, b in zip(xs, k3)), t0, t1)
            xs = tuple(a + h / 6.0 * (b1 + 2 * b2 + 2 * b3 + b4) for a, b1, b2, b3, b4 in zip(xs, k1, k2, k3, k4))
            if not all(math.isfinite(v) and abs(v) < 1e150 for v in xs):
                return np.full(2 * N_JOINTS, np.inf)
        return np.array(xs)
    for _ in range(substeps):
        k1 = arm.state_derivative(x, tau)
        k2 = arm.state_derivative(x + 0.5 * h * k1, tau)
        k3 = arm.state_derivative(x + 0.5 * h * k2, tau)
        k4 = arm.state_derivative(x + h * k3, tau)
        x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


@dataclass(frozen=True)
class ArmPlant:
    """True arm integrated with fixed-step RK4, inputs held over each control step."""

    arm: TwoLinkArm
    dt: float
    substeps: int = 10

    state_dim = 2 * N_JOINTS
    input_dim = N_JOINTS

    def step(self, j, x, u):
        return rk4_step(self.arm, x, u, self.dt, self.substeps)


def linearize_along(arm: TwoLinkArm, trajectory: Trajectory, dt: float | None = None) -> LtvModel:
    """Forward-Euler discretized Jacobians of the arm dynamics at (r_j, u_IDM,j)."""
    n_steps = trajectory.n_steps
    dt = dt if dt is not None else 1.0 / n_steps
    n = N_JOINTS
    q = trajectory.refs[:n_steps, :n]
    qd = trajectory.refs[:n_steps, n:]
    a_lo, b_lo = arm.dynamics_jacobians(q, qd, trajectory.nominal_inputs)
    a_c = np.zeros((n_steps, 2 * n, 2 * n))
    a_c[:, :n, n:] = np.eye(n)
    a_c[:, n:, :] = a_lo
    b_c = np.zeros((n_steps, 2 * n, n))
    b_c[:, n:, :] = b_lo
    a, b = discretize_euler(a_c, b_c, dt)
    return LtvModel(Horizon(n_steps, dt), Dimensions(2 * n, n), a, b)


@dataclass(frozen=True)
class StrikePolynomial:
    a3: np.ndarray
    a2: np.ndarray
    q0: np.ndarray
    qdot0: np.ndarray
    qf: np.ndarray
    qdotf: np.ndarray
    duration: float

    @classmethod
    def from_boundary(cls, q0, qdot0, qf, qdotf, duration: float) -> "StrikePolynomial":
        if not duration > 0:
            raise ValueError("hitting time must be positive")
        q0, qdot0, qf, qdotf = (np.asarray(v, dtype=float).reshape(-1) for v in (q0, qdot0, qf, qdotf))
        t = float(duration)
        a3 = 2.0 / t ** 3 * (q0 - qf) + 1.0 / t ** 2 * (qdot0 + qdotf)
        a2 = 3.0 / t ** 2 * (qf - q0) - 1.0 / t * (qdotf + 2 * qdot0)
        return cls(a3, a2, q0, qdot0, qf, qdotf, t)

    def evaluate(self, times):
        t = np.asarray(times, dtype=float)[:, None]
        q = self.a3 * t ** 3 + self.a2 * t ** 2 + self.qdot0 * t + self.q0
        qd = 3 * self.a3 * t ** 2 + 2 * self.a2 * t + self.qdot0
        qdd = 6 * self.a3 * t + 2 * self.a2
        return q, qd, qdd


def generate_strike(q0, qdot0, qf, qdotf, duration: float, horizon: Horizon, arm: TwoLinkArm):
    """Polynomial plus sampled reference and nominal inverse-dynamics inputs.

    The horizon is expected to span the hitting time, i.e. N dt = duration.
    """
    poly = StrikePolynomial.from_boundary(q0, qdot0, qf, qdotf, duration)
    return poly, strike_trajectory(poly, horizon, arm)


def strike_trajectory(poly: StrikePolynomial, horizon: Horizon, arm: TwoLinkArm) -> Trajectory:
    q, qd, qdd = poly.evaluate(horizon.times)
    tau = arm.inverse_dynamics(q[:-1], qd[:-1], qdd[:-1])
    return Trajectory(np.concatenate([q, qd], axis=1), tau)


def adapt_to_initial_state(strike: StrikePolynomial, q0_new, qdot0_new, arm: TwoLinkArm, current_ilc_inputs,
                           horizon: Horizon):
    """Regenerate the strike from a perturbed start and shift the ILC inputs by the IDM change.

    Returns (new trajectory, u_ILC) with u_ILC = u_{k+1} + u_IDM(new) - u_IDM(old).
    The trajectory carries the new IDM inputs; ``u_ILC`` is the shifted total.
    """
    old = strike_trajectory(strike, horizon, arm)
    new_poly = StrikePolynomial.from_boundary(q0_new, qdot0_new, strike.qf, strike.qdotf, strike.duration)
    new = strike_trajectory(new_poly, horizon, arm)
    u = np.asarray(current_ilc_inputs, dtype=float)
    return new, u + new.nominal_inputs - old.nominal_inputs


def final_state_cost(trial: TrialRecord, qf, qdotf, trajectory: Trajectory | None = None) -> float:
    """2-norm of the terminal state minus (qf, qdotf); the terminal state is r_N + e_N."""
    target = np.concatenate([np.ravel(qf), np.ravel(qdotf)])
    e_n = trial.raw_errors[-1]
    x_n = e_n + (trajectory.refs[-1] if trajectory is not None else target)
    return float(np.linalg.norm(x_n - target))


def write_trajectory_csv(trajectory: Trajectory, horizon: Horizon, path) -> None:
    """Columns t, q_i, qd_i, tau_i; tau at the final point is left empty."""
    n = trajectory.refs.shape[1] // 2
    header = ["t"] + [f"q{i}" for i in range(n)] + [f"qd{i}" for i in range(n)] + [f"tau{i}" for i in range(n)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for j, t in enumerate(horizon.times):
            tau = trajectory.nominal_inputs[j] if j < trajectory.n_steps else [""] * n
            writer.writerow([f"{t:.12g}"] + [f"{v:.12g}" for v in trajectory.refs[j]]
                            + [v if v == "" else f"{v:.12g}" for v in tau])
