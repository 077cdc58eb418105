"""Planar floating-base biped with telescoping legs and point feet.

Generalized coordinates q = [base_x, base_z, torso_pitch,
left_hip_angle, left_leg_length, right_hip_angle, right_leg_length].
The torso is a rigid body; each leg is a massless prismatic rod from a
common hip point to a point-mass foot.  In single support the pinned
contact removes two DOF, leaving five, against four actuators (hip
torque and leg force per leg): one degree of underactuation.

Ground incline is realized by working in the incline-aligned frame: the
ground plane is z = 0 and the gravity vector is rotated, so foot height
is measured normal to the slope.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import IntEnum

import numpy as np

NQ = 7
NU = 4
LEFT = "left"
RIGHT = "right"
_LEG_COORDS = {LEFT: (3, 4), RIGHT: (5, 6)}

# actuated coordinates: hip angles and leg lengths
B_MATRIX = np.zeros((NQ, NU))
B_MATRIX[3, 0] = B_MATRIX[4, 1] = B_MATRIX[5, 2] = B_MATRIX[6, 3] = 1.0


class SimulationDiverged(RuntimeError):
    """Integration produced non-finite state."""


class SingularContact(RuntimeError):
    """The constrained dynamics system is singular (e.g. coincident feet)."""


@dataclass(frozen=True)
class BipedModel:
    torso_mass: float = 10.0
    torso_inertia: float = 1.0
    foot_mass: float = 0.5
    hip_offset: tuple[float, float] = (0.0, -0.2)  # in torso frame, from torso CoM
    leg_min: float = 0.5
    leg_max: float = 1.1
    torque_limits: tuple[float, ...] = (60.0, 300.0, 60.0, 300.0)
    gravity: float = 9.81
    friction: float = 0.8
    incline: float = 0.0  # rad; ground x-axis points uphill for incline > 0
    baumgarte_omega: float = 20.0
    joint_limit_stiffness: float = 2.0e4
    joint_limit_damping: float = 100.0
    fall_height: float = 0.4
    fall_pitch: float = 1.0

    def __post_init__(self):
        if min(self.torso_mass, self.torso_inertia, self.foot_mass) <= 0:
            raise ValueError("masses and inertias must be positive")
        if not 0 < self.leg_min < self.leg_max:
            raise ValueError("need 0 < leg_min < leg_max")
        if self.friction <= 0:
            raise ValueError("friction coefficient must be positive")

    @property
    def total_mass(self) -> float:
        return self.torso_mass + 2.0 * self.foot_mass

    @property
    def u_max(self) -> np.ndarray:
        return np.asarray(self.torque_limits, dtype=float)

    def with_incline(self, incline: float) -> "BipedModel":
        return replace(self, incline=incline)


@dataclass
class FullState:
    q: np.ndarray
    v: np.ndarray
    t: float = 0.0

    def copy(self) -> "FullState":
        return FullState(q=self.q.copy(), v=self.v.copy(), t=self.t)


@dataclass(frozen=True)
class ContactMode:
    """Active point contacts; anchors pin feet for Baumgarte correction."""

    active: tuple[str, ...] = ()
    anchors: dict | None = None

    def anchor(self, model: BipedModel, q: np.ndarray, side: str) -> np.ndarray:
        if self.anchors is not None and side in self.anchors:
            return np.asarray(self.anchors[side], dtype=float)
        return foot_position(model, q, side)


def gravity_vector(model: BipedModel) -> np.ndarray:
    g, inc = model.gravity, model.incline
    return np.array([-g * np.sin(inc), -g * np.cos(inc)])


def _rot(th: float) -> np.ndarray:
    c, s = np.cos(th), np.sin(th)
    return np.array([[c, -s], [s, c]])


def _leg_kinematics(model: BipedModel, q: np.ndarray, v: np.ndarray | None, side: str):
    """Foot position, Jacobian, and (if v given) Jacobian time derivative."""
    ia, il = _LEG_COORDS[side]
    th = q[2]
    a, ell = q[ia], q[il]
    w = _rot(th) @ np.asarray(model.hip_offset)  # hip offset in ground frame
    sw = np.array([-w[1], w[0]])  # d(w)/d(theta)
    beta = th + a
    e = np.array([np.sin(beta), -np.cos(beta)])
    ep = np.array([np.cos(beta), np.sin(beta)])  # de/dbeta; d(ep)/dbeta = -e

    pos = q[:2] + w + ell * e
    J = np.zeros((2, NQ))
    J[0, 0] = J[1, 1] = 1.0
    J[:, 2] = sw + ell * ep
    J[:, ia] = ell * ep
    J[:, il] = e

    if v is None:
        return pos, J, None
    thd = v[2]
    betad = thd + v[ia]
    elld = v[il]
    Jdot = np.zeros((2, NQ))
    Jdot[:, 2] = -thd * w + elld * ep - ell * betad * e
    Jdot[:, ia] = elld * ep - ell * betad * e
    Jdot[:, il] = betad * ep
    return pos, J, Jdot


def foot_position(model: BipedModel, q: np.ndarray, side: str) -> np.ndarray:
    return _leg_kinematics(model, q, None, side)[0]


def foot_jacobian(model: BipedModel, q: np.ndarray, side: str) -> np.ndarray:
    return _leg_kinematics(model, q, None, side)[1]


def foot_jacobian_dot(model: BipedModel, q: np.ndarray, v: np.ndarray, side: str) -> np.ndarray:
    return _leg_kinematics(model, q, v, side)[2]


def com_position(model: BipedModel, q: np.ndarray) -> np.ndarray:
    mt, mf = model.torso_mass, model.foot_mass
    pl = foot_position(model, q, LEFT)
    pr = foot_position(model, q, RIGHT)
    return (mt * q[:2] + mf * pl + mf * pr) / model.total_mass


def com_jacobian(model: BipedModel, q: np.ndarray) -> np.ndarray:
    mt, mf = model.torso_mass, model.foot_mass
    Jb = np.zeros((2, NQ))
    Jb[0, 0] = Jb[1, 1] = 1.0
    Jl = foot_jacobian(model, q, LEFT)
    Jr = foot_jacobian(model, q, RIGHT)
    return (mt * Jb + mf * Jl + mf * Jr) / model.total_mass


def com_jacobian_dot(model: BipedModel, q: np.ndarray, v: np.ndarray) -> np.ndarray:
    mf = model.foot_mass
    Jl = foot_jacobian_dot(model, q, v, LEFT)
    Jr = foot_jacobian_dot(model, q, v, RIGHT)
    return mf * (Jl + Jr) / model.total_mass


def mass_matrix(model: BipedModel, q: np.ndarray) -> np.ndarray:
    M = np.zeros((NQ, NQ))
    M[0, 0] = M[1, 1] = model.torso_mass
    M[2, 2] = model.torso_inertia
    for side in (LEFT, RIGHT):
        _, J, _ = _leg_kinematics(model, q, None, side)
        M += model.foot_mass * (J.T @ J)
    return M


def coriolis_matrix(model: BipedModel, q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """C(q, v) with the point-mass convention C = sum(m * J^T Jdot).

    This convention makes Mdot - 2C skew-symmetric.
    """
    C = np.zeros((NQ, NQ))
    for side in (LEFT, RIGHT):
        _, J, Jdot = _leg_kinematics(model, q, v, side)
        C += model.foot_mass * (J.T @ Jdot)
    return C


def gravity_force(model: BipedModel, q: np.ndarray) -> np.ndarray:
    gv = gravity_vector(model)
    Q = np.zeros(NQ)
    Q[:2] = model.torso_mass * gv
    for side in (LEFT, RIGHT):
        _, J, _ = _leg_kinematics(model, q, None, side)
        Q += model.foot_mass * (J.T @ gv)
    return Q


@dataclass
class DynTerms:
    """Per-state dynamics quantities shared by the simulator and the OSC."""

    M: np.ndarray
    coriolis: np.ndarray  # sum(m * J^T Jdot v)
    gravity: np.ndarray
    kin: dict  # side -> (pos, J, Jdot)


def dynamics_terms(model: BipedModel, q: np.ndarray, v: np.ndarray) -> DynTerms:
    M = np.zeros((NQ, NQ))
    M[0, 0] = M[1, 1] = model.torso_mass
    M[2, 2] = model.torso_inertia
    gv = gravity_vector(model)
    grav = np.zeros(NQ)
    grav[:2] = model.torso_mass * gv
    cor = np.zeros(NQ)
    kin = {}
    mf = model.foot_mass
    for side in (LEFT, RIGHT):
        pos, J, Jdot = _leg_kinematics(model, q, v, side)
        kin[side] = (pos, J, Jdot)
        M += mf * (J.T @ J)
        grav += mf * (J.T @ gv)
        cor += mf * (J.T @ (Jdot @ v))
    return DynTerms(M=M, coriolis=cor, gravity=grav, kin=kin)


def joint_limit_force(model: BipedModel, q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """One-sided spring-damper keeping leg lengths inside [leg_min, leg_max]."""
    k, d = model.joint_limit_stiffness, model.joint_limit_damping
    Q = np.zeros(NQ)
    for il in (4, 6):
        ell, elld = q[il], v[il]
        if ell < model.leg_min:
            Q[il] = max(0.0, k * (model.leg_min - ell) - d * elld)
        elif ell > model.leg_max:
            Q[il] = min(0.0, -k * (ell - model.leg_max) - d * elld)
    return Q


def _applied_force(model: BipedModel, q, v, u, terms: DynTerms) -> np.ndarray:
    u = np.clip(np.asarray(u, dtype=float), -model.u_max, model.u_max)
    return B_MATRIX @ u + terms.gravity + joint_limit_force(model, q, v) - terms.coriolis


def _contact_blocks(model: BipedModel, q, v, contact: ContactMode, terms: DynTerms = None):
    rows_J, rows_rhs, phis = [], [], []
    for side in contact.active:
        if terms is not None:
            pos, J, Jdot = terms.kin[side]
        else:
            pos, J, Jdot = _leg_kinematics(model, q, v, side)
        rows_J.append(J)
        rows_rhs.append(Jdot @ v)
        phis.append(pos - contact.anchor(model, q, side))
    Jc = np.vstack(rows_J)
    Jdv = np.concatenate(rows_rhs)
    phi = np.concatenate(phis)
    return Jc, Jdv, phi


def _solve_constrained(M, Jc, rhs_top, rhs_bot):
    n, m = M.shape[0], Jc.shape[0]
    K = np.zeros((n + m, n + m))
    K[:n, :n] = M
    K[:n, n:] = -Jc.T
    K[n:, :n] = Jc
    rhs = np.concatenate([rhs_top, rhs_bot])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularContact(f"constrained dynamics singular: {exc}") from exc
    if not np.all(np.isfinite(sol)):
        raise SingularContact("constrained dynamics produced non-finite solution")
    return sol[:n], sol[n:]


def dynamics(
    model: BipedModel,
    x: FullState,
    u: np.ndarray,
    contact: ContactMode,
    stabilized: bool = False,
    terms: DynTerms | None = None,
):
    """Forward dynamics: accelerations and per-contact ground forces.

    With ``stabilized`` the contact-acceleration constraint includes the
    Baumgarte velocity/position correction used by the integrator;
    without it the pinned foot has exactly zero acceleration.
    """
    q, v = x.q, x.v
    if terms is None:
        terms = dynamics_terms(model, q, v)
    f = _applied_force(model, q, v, u, terms)
    if not contact.active:
        return np.linalg.solve(terms.M, f), {}
    Jc, Jdv, phi = _contact_blocks(model, q, v, contact, terms)
    rhs_bot = -Jdv
    if stabilized:
        om = model.baumgarte_omega
        rhs_bot = rhs_bot - 2.0 * om * (Jc @ v) - om**2 * phi
    vdot, lam = _solve_constrained(terms.M, Jc, f, rhs_bot)
    forces = {
        side: lam[2 * i : 2 * i + 2] for i, side in enumerate(contact.active)
    }
    return vdot, forces


def integrate_step(
    model: BipedModel,
    x: FullState,
    u: np.ndarray,
    contact: ContactMode,
    dt: float = 1e-3,
    terms: DynTerms | None = None,
) -> FullState:
    """One semi-implicit Euler step (velocity first) with Baumgarte correction."""
    vdot, _ = dynamics(model, x, u, contact, stabilized=True, terms=terms)
    v_new = x.v + dt * vdot
    q_new = x.q + dt * v_new
    if not (np.all(np.isfinite(q_new)) and np.all(np.isfinite(v_new))):
        raise SimulationDiverged(f"non-finite state at t={x.t + dt:.4f}")
    return FullState(q=q_new, v=v_new, t=x.t + dt)


def impact_map(model: BipedModel, x: FullState, new_contact: str | tuple) -> FullState:
    """Plastic impact: instantaneous impulse zeroing the new contact velocity."""
    sides = (new_contact,) if isinstance(new_contact, str) else tuple(new_contact)
    q, v = x.q, x.v
    M = mass_matrix(model, q)
    Jc = np.vstack([_leg_kinematics(model, q, None, s)[1] for s in sides])
    v_plus, _ = _solve_constrained(M, Jc, M @ v, np.zeros(Jc.shape[0]))
    return FullState(q=q.copy(), v=v_plus, t=x.t)


def kinetic_energy(model: BipedModel, x: FullState) -> float:
    return 0.5 * float(x.v @ mass_matrix(model, x.q) @ x.v)


def total_energy(model: BipedModel, x: FullState) -> float:
    gv = gravity_vector(model)
    pe = -model.torso_mass * float(gv @ x.q[:2])
    for side in (LEFT, RIGHT):
        pe -= model.foot_mass * float(gv @ foot_position(model, x.q, side))
    return kinetic_energy(model, x) + pe


def is_fallen(model: BipedModel, x: FullState) -> bool:
    return bool(x.q[1] < model.fall_height or abs(x.q[2]) > model.fall_pitch)


# --- time-based finite state machine -------------------------------------


class FsmMode(IntEnum):
    LEFT_SUPPORT = 0
    RIGHT_SUPPORT = 1
    DOUBLE_SUPPORT = 2


@dataclass(frozen=True)
class FsmSchedule:
    single_support: float = 0.35
    double_support: float = 0.0
    first_support: str = LEFT

    @property
    def step_period(self) -> float:
        return self.single_support + self.double_support


@dataclass(frozen=True)
class FsmState:
    mode: FsmMode
    phase: float
    time_in_mode: float
    step_index: int

    def stance_foot(self) -> str:
        if self.mode == FsmMode.DOUBLE_SUPPORT:
            raise ValueError("double support has two stance feet")
        return LEFT if self.mode == FsmMode.LEFT_SUPPORT else RIGHT

    def swing_foot(self) -> str:
        return RIGHT if self.stance_foot() == LEFT else LEFT


def fsm_state(t: float, schedule: FsmSchedule = FsmSchedule()) -> FsmState:
    """Mode, phase, and step counter of the periodic support schedule."""
    if t < 0:
        raise ValueError(f"time must be nonnegative, got {t}")
    period = schedule.step_period
    step = int(np.floor(t / period + 1e-12))
    tau = t - step * period
    first_left = schedule.first_support == LEFT
    if tau < schedule.single_support or schedule.double_support == 0.0:
        left = (step % 2 == 0) == first_left
        mode = FsmMode.LEFT_SUPPORT if left else FsmMode.RIGHT_SUPPORT
        tin, dur = tau, schedule.single_support
    else:
        mode = FsmMode.DOUBLE_SUPPORT
        tin, dur = tau - schedule.single_support, schedule.double_support
    return FsmState(mode=mode, phase=tin / dur, time_in_mode=tin, step_index=step)


def contacts_for(model: BipedModel, q: np.ndarray, fsm: FsmState,
                 anchors: dict | None = None) -> ContactMode:
    if fsm.mode == FsmMode.DOUBLE_SUPPORT:
        active: tuple[str, ...] = (LEFT, RIGHT)
    else:
        active = (fsm.stance_foot(),)
    return ContactMode(active=active, anchors=anchors)


# --- nominal postures ------------------------------------------------------


def standing_state(
    model: BipedModel,
    com_height: float = 0.9,
    foot_spread: float = 0.1,
    base_x: float = 0.0,
) -> FullState:
    """Symmetric double-support stance with the CoM at the given height."""
    base_z = com_height * model.total_mass / model.torso_mass
    hip = np.array([base_x, base_z]) + _rot(0.0) @ np.asarray(model.hip_offset)
    q = np.zeros(NQ)
    q[0], q[1] = base_x, base_z
    for side, sgn in ((LEFT, -1.0), (RIGHT, 1.0)):
        ia, il = _LEG_COORDS[side]
        foot = np.array([base_x + sgn * foot_spread / 2.0, 0.0])
        delta = foot - hip
        q[il] = float(np.hypot(*delta))
        q[ia] = float(np.arctan2(delta[0], -delta[1]))
    return FullState(q=q, v=np.zeros(NQ), t=0.0)
