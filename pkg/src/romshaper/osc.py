"""Operational space controller: a small exact QP over joint torques.

The full-dynamics and contact-acceleration equalities determine
(accelerations, contact forces) uniquely for any torque, so the QP is
reduced to the 4-dim torque box with friction-cone rows, and solved with
a primal active-set method.  Solutions saturate bounds exactly and carry
machine-precision KKT residuals, which interior-point solvers do not
provide.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import biped
from .biped import NQ, NU, BipedModel, ContactMode, FullState
from .planner import pd_desired_accel


class OscInfeasibleError(RuntimeError):
    """No torque in the box satisfies the friction-cone constraints."""

    def __init__(self, msg: str, diagnostics: dict | None = None):
        super().__init__(msg)
        self.diagnostics = diagnostics or {}


@dataclass
class OutputSpec:
    """One tracked output: desired motion, PD gains, and its QP weight."""

    kind: str  # "com" | "swing_foot" | "torso_pitch" | "leg_length"
    pos_des: np.ndarray
    vel_des: np.ndarray
    acc_ff: np.ndarray
    kp: float
    kd: float
    weight: float
    side: str | None = None  # for swing_foot / leg_length


# DesiredOutputs is simply a list of OutputSpec entries.
DesiredOutputs = list


@dataclass
class OscInfo:
    vdot: np.ndarray
    contact_forces: dict
    achieved: dict
    desired: dict
    kkt_residual: float
    dynamics_residual: float
    inequality_violation: float
    iterations: int
    active_set: tuple


def _output_kinematics(model: BipedModel, x: FullState, spec: OutputSpec, terms=None):
    """Measured value, velocity, Jacobian, and Jdot*v of one output."""
    q, v = x.q, x.v
    if spec.kind == "com":
        if terms is not None:
            mt, mf, tot = model.torso_mass, model.foot_mass, model.total_mass
            pl, Jl, Jdl = terms.kin[biped.LEFT]
            pr, Jr, Jdr = terms.kin[biped.RIGHT]
            Jb = np.zeros((2, NQ))
            Jb[0, 0] = Jb[1, 1] = 1.0
            pos = (mt * q[:2] + mf * pl + mf * pr) / tot
            J = (mt * Jb + mf * Jl + mf * Jr) / tot
            jd_v = mf * (Jdl @ v + Jdr @ v) / tot
            return pos, J @ v, J, jd_v
        J = biped.com_jacobian(model, q)
        jd = biped.com_jacobian_dot(model, q, v)
        return biped.com_position(model, q), J @ v, J, jd @ v
    if spec.kind == "swing_foot":
        if terms is not None:
            pos, J, Jdot = terms.kin[spec.side]
        else:
            pos, J, Jdot = biped._leg_kinematics(model, q, v, spec.side)
        return pos, J @ v, J, Jdot @ v
    if spec.kind == "torso_pitch":
        J = np.zeros((1, NQ))
        J[0, 2] = 1.0
        return np.array([q[2]]), np.array([v[2]]), J, np.zeros(1)
    if spec.kind == "leg_length":
        il = biped._LEG_COORDS[spec.side][1]
        J = np.zeros((1, NQ))
        J[0, il] = 1.0
        return np.array([q[il]]), np.array([v[il]]), J, np.zeros(1)
    raise ValueError(f"unknown output kind {spec.kind!r}")


def solve_box_cone_qp(H, g, G, h, u0, max_iter: int = 200):
    """min 0.5 u'Hu + g'u  s.t.  Gu <= h, starting from feasible u0.

    Primal active-set method; ties broken by lowest constraint index.
    Returns (u, multipliers, active tuple, iterations).
    """
    n = H.shape[0]
    u = u0.copy()
    work: list[int] = []  # blocking constraints join via the ratio test
    nu = np.zeros(G.shape[0])
    for it in range(max_iter):
        Gw = G[work]
        m = len(work)
        K = np.zeros((n + m, n + m))
        K[:n, :n] = H
        if m:
            K[:n, n:] = Gw.T
            K[n:, :n] = Gw
        rhs = np.concatenate([-(g + H @ u), np.zeros(m)])
        try:
            sol = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
        p, lam_w = sol[:n], sol[n:]
        if np.max(np.abs(p), initial=0.0) < 1e-11:
            if m == 0 or np.min(lam_w) >= -1e-9:
                nu[:] = 0.0
                nu[work] = lam_w
                return u, nu, tuple(work), it + 1
            work.pop(int(np.argmin(lam_w)))
            continue
        # ratio test against constraints outside the working set
        alpha, blocker = 1.0, -1
        for i in range(G.shape[0]):
            if i in work:
                continue
            gp = G[i] @ p
            if gp > 1e-14:
                a = (h[i] - G[i] @ u) / gp
                if a < alpha - 1e-15:
                    alpha, blocker = max(a, 0.0), i
        u = u + alpha * p
        if blocker >= 0:
            work.append(blocker)
    raise OscInfeasibleError(
        "active-set QP failed to converge",
        {"iterations": max_iter, "working_set": tuple(work)},
    )


def _feasible_start(H, g, G, h, u_max, warm):
    candidates = []
    try:
        candidates.append(np.clip(np.linalg.solve(H, -g), -u_max, u_max))
    except np.linalg.LinAlgError:
        pass
    if warm is not None:
        candidates.append(np.clip(np.asarray(warm, dtype=float), -u_max, u_max))
    candidates.append(np.zeros(u_max.size))
    for u0 in candidates:
        if np.all(G @ u0 - h <= 1e-10):
            return u0
    # rare: search for a cone-feasible torque with an LP
    from scipy.optimize import linprog

    n, m = u_max.size, G.shape[0]
    # variables (u, s): minimize sum s, G u - s <= h, s >= 0, box on u
    c = np.concatenate([np.zeros(n), np.ones(m)])
    A_ub = np.hstack([G, -np.eye(m)])
    bounds = [(-um, um) for um in u_max] + [(0, None)] * m
    res = linprog(c, A_ub=A_ub, b_ub=h, bounds=bounds, method="highs")
    if not res.success or res.fun > 1e-9:
        raise OscInfeasibleError(
            "no torque satisfies the friction cone",
            {"lp_status": getattr(res, "message", "failed"),
             "violation": float(getattr(res, "fun", np.inf))},
        )
    return res.x[:n]


def osc_solve(
    model: BipedModel,
    x: FullState,
    outputs: DesiredOutputs,
    contact: ContactMode,
    rho_u: float = 1e-4,
    warm_u: np.ndarray | None = None,
    return_info: bool = False,
    terms=None,
):
    """Torques minimizing weighted output-acceleration error.

    Subject to the full dynamics with contact forces, torque limits, and
    the friction cone on each active contact.  Raises
    :class:`OscInfeasibleError` when no cone-feasible torque exists.
    """
    q, v = x.q, x.v
    if terms is None:
        terms = biped.dynamics_terms(model, q, v)
    M = terms.M
    bias = terms.coriolis - terms.gravity

    n_c = 2 * len(contact.active)
    if n_c:
        Jc, Jdv, phi = biped._contact_blocks(model, q, v, contact, terms)
        om = model.baumgarte_omega
        rhs_bot = -Jdv - 2.0 * om * (Jc @ v) - om**2 * phi
        K = np.zeros((NQ + n_c, NQ + n_c))
        K[:NQ, :NQ] = M
        K[:NQ, NQ:] = -Jc.T
        K[NQ:, :NQ] = Jc
    else:
        K = M
        rhs_bot = np.zeros(0)

    # affine map u -> (vdot, lambda)
    rhs = np.zeros((NQ + n_c, NU + 1))
    rhs[:NQ, :NU] = biped.B_MATRIX
    rhs[:NQ, NU] = -bias
    rhs[NQ:, NU] = rhs_bot
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError as exc:
        raise biped.SingularContact(f"OSC dynamics singular: {exc}") from exc
    Vu, v0 = sol[:NQ, :NU], sol[:NQ, NU]
    Lu, l0 = sol[NQ:, :NU], sol[NQ:, NU]

    # stack weighted tracking residual rows: A u + b
    rows_A, rows_b = [], []
    desired, meta = {}, []
    for spec in outputs:
        pos, vel, J, jdot_v = _output_kinematics(model, x, spec, terms)
        a_des = pd_desired_accel(
            spec.pos_des, spec.vel_des, spec.acc_ff, pos, vel, spec.kp, spec.kd
        )
        sw = np.sqrt(spec.weight)
        rows_A.append(sw * (J @ Vu))
        rows_b.append(sw * (J @ v0 + jdot_v - a_des))
        key = spec.kind if spec.side is None else f"{spec.kind}_{spec.side}"
        desired[key] = a_des
        meta.append((key, J, jdot_v))
    rows_A.append(np.sqrt(rho_u) * np.eye(NU))
    rows_b.append(np.zeros(NU))
    A = np.vstack(rows_A)
    b = np.concatenate(rows_b)
    H = A.T @ A
    g = A.T @ b

    u_max = model.u_max
    G_rows = [np.eye(NU), -np.eye(NU)]
    h_rows = [u_max, u_max]
    mu = model.friction
    for i in range(len(contact.active)):
        Lx, lx = Lu[2 * i], l0[2 * i]
        Lz, lz = Lu[2 * i + 1], l0[2 * i + 1]
        G_rows += [-Lz[None, :], (Lx - mu * Lz)[None, :], (-Lx - mu * Lz)[None, :]]
        h_rows += [np.array([lz]), np.array([-(lx - mu * lz)]), np.array([lx + mu * lz])]
    G = np.vstack(G_rows)
    h = np.concatenate(h_rows)

    u0 = _feasible_start(H, g, G, h, u_max, warm_u)
    u, nu, active, iters = solve_box_cone_qp(H, g, G, h, u0)

    if not return_info:
        return u

    vdot = Vu @ u + v0
    lam = Lu @ u + l0
    forces = {
        side: lam[2 * i : 2 * i + 2] for i, side in enumerate(contact.active)
    }
    achieved = {key: J @ vdot + jdot_v for key, J, jdot_v in meta}
    dyn_res = M @ vdot + bias - biped.B_MATRIX @ u
    if n_c:
        dyn_res = dyn_res - Jc.T @ lam
    stat = H @ u + g + G.T @ nu
    info = OscInfo(
        vdot=vdot,
        contact_forces=forces,
        achieved=achieved,
        desired=desired,
        kkt_residual=float(
            max(np.max(np.abs(stat)), np.max(np.clip(G @ u - h, 0.0, None), initial=0.0))
        ),
        dynamics_residual=float(np.max(np.abs(dyn_res))),
        inequality_violation=float(np.max(np.clip(G @ u - h, 0.0, None), initial=0.0)),
        iterations=iters,
        active_set=active,
    )
    return u, info
